//! Self-test suites behind `sald validate`.
//!
//! Every check compares library output with an independent computation
//! (finite differences, closed forms, Monte Carlo standard errors) and
//! reports a value against a limit. The report is deterministic.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guides::{zo_gradient, ZoEstimatorConfig};
use crate::metrics::{alpha_complexity, gaussian_kl, kl_grid, KL_EPS};
use crate::point::Vec2;
use crate::rng::{RngLineage, Substream};
use crate::samplers::{ignore, run_va_sald_vp, ParticleEnsemble, SamplerConfig};
use crate::schedules::BetaSchedule;
use crate::targets::{GaussianMixture, GridSpec, VpMarginalFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracles,
    Calibration,
    Unguided,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracles" => Ok(Suite::Oracles),
            "calibration" => Ok(Suite::Calibration),
            "unguided" => Ok(Suite::Unguided),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!(
                "unknown suite '{other}' (oracles, calibration, unguided, all)"
            ))),
        }
    }
}

/// Fault injection for negative controls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ValidationHooks {
    /// Flip the sign of the analytic score before comparing it.
    pub flip_score_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Tab-separated `suite check status value limit detail`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("suite\tcheck\tstatus\tvalue\tlimit\tdetail\n");
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{}\t{}\t{}\t{:.6e}\t{:.6e}\t{}", c.suite, c.name, status, c.value, c.limit, c.detail);
        }
        out
    }
}

struct Recorder<'a> {
    suite: &'a str,
    checks: &'a mut Vec<CheckResult>,
}

impl Recorder<'_> {
    /// Records `value <= limit`; a NaN value fails.
    fn at_most(&mut self, name: &str, value: f64, limit: f64, detail: String) {
        self.checks.push(CheckResult {
            suite: self.suite.to_string(),
            name: name.to_string(),
            passed: value <= limit,
            value,
            limit,
            detail,
        });
    }

    fn from_result(&mut self, name: &str, r: Result<(f64, f64, String)>) {
        match r {
            Ok((value, limit, detail)) => self.at_most(name, value, limit, detail),
            Err(e) => self.at_most(name, f64::NAN, 0.0, format!("error: {e}")),
        }
    }
}

/// Runs a suite with default seeds.
pub fn validate(suite: Suite) -> ValidationReport {
    validate_with(suite, 0, ValidationHooks::default())
}

pub fn validate_with(suite: Suite, seed: u64, hooks: ValidationHooks) -> ValidationReport {
    let mut checks = Vec::new();
    let lineage = RngLineage::new(seed).with_stream(0x5641_4C);
    if matches!(suite, Suite::Oracles | Suite::All) {
        let mut rec = Recorder { suite: "oracles", checks: &mut checks };
        rec.from_result("score_fd", score_fd(lineage.with_stream(1), hooks));
        rec.from_result("continuity", continuity(lineage.with_stream(2)));
        rec.from_result("gaussian_kl", gaussian_kl_closed_forms());
        rec.from_result("zo_linear", zo_linear(lineage.with_stream(3)));
        rec.from_result("zo_quadratic", zo_quadratic(lineage.with_stream(4)));
        let (closed, limit) = alpha_checks(lineage.with_stream(5));
        rec.from_result("alpha_closed_form", closed);
        rec.from_result("alpha_limit", limit);
    }
    if matches!(suite, Suite::Calibration | Suite::All) {
        let mut rec = Recorder { suite: "calibration", checks: &mut checks };
        rec.from_result("kl_self_floor", kl_self_floor(lineage.with_stream(6)));
        let (lo, hi) = gaussian_kl_calibration(lineage.with_stream(7));
        rec.from_result("kl_gaussian_low", lo);
        rec.from_result("kl_gaussian_high", hi);
    }
    if matches!(suite, Suite::Unguided | Suite::All) {
        let mut rec = Recorder { suite: "unguided", checks: &mut checks };
        for r in [1.0, 10.0] {
            let (mean, var) = unguided_invariance(seed, r);
            rec.from_result(&format!("unguided_mean_r{r}"), mean);
            rec.from_result(&format!("unguided_var_r{r}"), var);
        }
    }
    ValidationReport { checks }
}

fn eight_family() -> VpMarginalFamily {
    VpMarginalFamily::new(GaussianMixture::eight_gaussian(4.0), BetaSchedule::default())
}

fn uniform_in(s: &mut crate::rng::PhiloxStream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * s.uniform()
}

fn score_fd(lineage: RngLineage, hooks: ValidationHooks) -> Result<(f64, f64, String)> {
    let fam = eight_family();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut s = lineage.stream_for(i, 0, Substream::Diagnostic);
        let t = uniform_in(&mut s, 0.0, 1.0);
        let x = Vec2::new(uniform_in(&mut s, -6.0, 6.0), uniform_in(&mut s, -6.0, 6.0));
        let lp = |p: Vec2| fam.marginal_log_density(t, p);
        let fd = Vec2::new(
            (lp(x + Vec2::new(h, 0.0))? - lp(x - Vec2::new(h, 0.0))?) / (2.0 * h),
            (lp(x + Vec2::new(0.0, h))? - lp(x - Vec2::new(0.0, h))?) / (2.0 * h),
        );
        let mut score = fam.marginal_score(t, x)?;
        if hooks.flip_score_sign {
            score = -score;
        }
        worst = worst.max((score - fd).norm() / score.norm().max(1e-6));
    }
    Ok((worst, 1e-5, "max relative error, 100 points, h=1e-5".into()))
}

fn continuity(lineage: RngLineage) -> Result<(f64, f64, String)> {
    let fam = eight_family();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut used = 0;
    let mut i = 0;
    while used < 100 {
        let mut s = lineage.stream_for(i, 0, Substream::Diagnostic);
        i += 1;
        let t = uniform_in(&mut s, 0.05, 0.95);
        let x = Vec2::new(uniform_in(&mut s, -5.0, 5.0), uniform_in(&mut s, -5.0, 5.0));
        let p = |t: f64, x: Vec2| fam.marginal_log_density(t, x).map(f64::exp);
        let p0 = p(t, x)?;
        if p0 < 1e-8 {
            continue;
        }
        used += 1;
        let flux = |x: Vec2| -> Result<Vec2> { Ok(fam.reverse_velocity_vp(t, x)? * p(t, x)?) };
        let dt = (p(t + h, x)? - p(t - h, x)?) / (2.0 * h);
        let ex = Vec2::new(h, 0.0);
        let ey = Vec2::new(0.0, h);
        let div = (flux(x + ex)?.x - flux(x - ex)?.x + flux(x + ey)?.y - flux(x - ey)?.y) / (2.0 * h);
        worst = worst.max((dt + div).abs() / p0);
    }
    Ok((worst, 1e-3, "max |dp/dt + div(p u)| / p, 100 points".into()))
}

fn gaussian_kl_closed_forms() -> Result<(f64, f64, String)> {
    let cases = [
        (gaussian_kl(&[0.4, -1.0], 1.7, &[0.4, -1.0], 1.7)?, 0.0),
        (gaussian_kl(&[0.0, 0.0], 1.0, &[1.0, 0.0], 1.0)?, 0.5),
        (gaussian_kl(&[0.0], 1.0, &[0.0], 4.0)?, 0.5 * (0.25 - 1.0 + 4f64.ln())),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((worst, 1e-12, "max abs error over 3 closed forms".into()))
}

/// Max over coordinates of |estimate − truth| / SE, with the SE from the
/// per-probe terms of the same draws.
fn zo_z_score(
    f: &(dyn Fn(Vec2) -> f64 + Sync),
    x: Vec2,
    sigma_bar: f64,
    truth: Vec2,
    lineage: RngLineage,
) -> Result<f64> {
    let n = 100_000;
    let cfg = ZoEstimatorConfig { batch_size: n, sigma_bar, normalize: false };
    let est = zo_gradient(f, x, &cfg, &mut lineage.stream_for(0, 0, Substream::ZoProbe))?;
    let mut replay = lineage.stream_for(0, 0, Substream::ZoProbe);
    let (mut s1, mut s2) = (Vec2::ZERO, Vec2::ZERO);
    for _ in 0..n {
        let e = replay.normal2();
        let term = e * (f(x + e * sigma_bar) / sigma_bar);
        s1 += term;
        s2 += Vec2::new(term.x * term.x, term.y * term.y);
    }
    let nf = n as f64;
    let mean = s1 / nf;
    let se = |m: f64, sq: f64| ((sq / nf - m * m) / (nf - 1.0)).sqrt();
    let se = Vec2::new(se(mean.x, s2.x), se(mean.y, s2.y));
    if (mean - est).norm() > 1e-9 * (1.0 + est.norm()) {
        return Err(Error::config("zo estimate differs from its replayed probe mean"));
    }
    Ok(((est.x - truth.x).abs() / se.x).max((est.y - truth.y).abs() / se.y))
}

fn zo_linear(lineage: RngLineage) -> Result<(f64, f64, String)> {
    let a = Vec2::new(1.0, -2.0);
    let z = zo_z_score(&|x: Vec2| a.dot(x), Vec2::new(0.5, 0.25), 0.1, a, lineage)?;
    Ok((z, 3.0, "standard errors from a=(1,-2), N=1e5".into()))
}

fn zo_quadratic(lineage: RngLineage) -> Result<(f64, f64, String)> {
    let x = Vec2::new(1.0, 2.0);
    let z = zo_z_score(&|p: Vec2| 0.5 * p.norm_sq(), x, 0.1, x, lineage)?;
    Ok((z, 3.0, "standard errors from (1,2), N=1e5".into()))
}

fn alpha_checks(lineage: RngLineage) -> (Result<(f64, f64, String)>, Result<(f64, f64, String)>) {
    let n = 1_000_000;
    let q: Vec<f64> = (0..n)
        .map(|i| lineage.stream_for(i, 0, Substream::Diagnostic).normal().powi(2))
        .collect();
    let alpha: f64 = 0.1;
    let exact = -(1.0 - 2.0 * alpha).ln() / (2.0 * alpha);
    let closed = alpha_complexity(&q, alpha).map(|e| {
        ((e.value - exact).abs() / e.std_error, 3.0, format!("standard errors from {exact:.6}"))
    });
    let plain = q.iter().sum::<f64>() / n as f64;
    let limit = alpha_complexity(&q, 1e-4)
        .map(|e| ((e.value - plain).abs(), 1e-3, "alpha=1e-4 vs mean of |v|^2".into()));
    (closed, limit)
}

fn kl_self_floor(lineage: RngLineage) -> Result<(f64, f64, String)> {
    let fam = eight_family();
    let target = fam.guided_target_grid(1.0, None, GridSpec::square(8.0, 256), 0.0)?;
    let pts = target.sample(1_000_000, lineage);
    let kl = kl_grid(&pts, &target, KL_EPS)?;
    Ok((kl.value, 0.05, "n=1e6 drawn from the gridded target".into()))
}

fn gaussian_kl_calibration(lineage: RngLineage) -> (Result<(f64, f64, String)>, Result<(f64, f64, String)>) {
    let kl = (|| -> Result<f64> {
        let shifted = VpMarginalFamily::new(
            GaussianMixture::single(Vec2::new(1.0, 0.0), 1.0)?,
            BetaSchedule::default(),
        );
        let target = shifted.guided_target_grid(1.0, None, GridSpec::square(8.0, 256), 0.0)?;
        let pts: Vec<Vec2> = (0..1_000_000)
            .map(|i| lineage.stream_for(i, 0, Substream::Diagnostic).normal2())
            .collect();
        Ok(kl_grid(&pts, &target, KL_EPS)?.value)
    })();
    match kl {
        Ok(v) => (
            Ok((0.45 - v, 0.0, format!("KL {v:.4} >= 0.45 (true 0.5)"))),
            Ok((v, 0.60, format!("KL {v:.4} <= 0.60 (true 0.5)"))),
        ),
        Err(e) => {
            let msg = e.to_string();
            (Err(e), Err(Error::config(msg)))
        }
    }
}

fn unguided_invariance(seed: u64, r: f64) -> (Result<(f64, f64, String)>, Result<(f64, f64, String)>) {
    let n = 10_000;
    let run = || -> Result<ParticleEnsemble> {
        let fam = VpMarginalFamily::new(GaussianMixture::single(Vec2::new(2.0, 0.0), 1.0)?, BetaSchedule::default());
        let cfg = SamplerConfig { budget_r: r, n_particles: n, seed, ..Default::default() };
        let init = ParticleEnsemble::standard_normal(n, RngLineage::new(seed).with_stream(2))?;
        run_va_sald_vp(&fam, None, &cfg, init, &mut ignore)
    };
    match run() {
        Ok(ens) => {
            let m = ens.mean();
            let v = ens.coordinate_variance();
            let tol = 4.0 / (n as f64).sqrt();
            let mean_dev = (m.x - 2.0).abs().max(m.y.abs());
            let var_dev = (v.x - 1.0).abs().max((v.y - 1.0).abs());
            (
                Ok((mean_dev, tol, format!("mean ({:.4}, {:.4}) vs (2, 0), n={n}", m.x, m.y))),
                Ok((var_dev, 0.05, format!("variance ({:.4}, {:.4}) vs 1", v.x, v.y))),
            )
        }
        Err(e) => {
            let msg = e.to_string();
            (Err(e), Err(Error::config(msg)))
        }
    }
}
