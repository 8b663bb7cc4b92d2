//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are never captured. Set
//! `SALD_ACCEPTANCE=1,5,7` to run a subset.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use sald::guides::{zo_gradient, ModePenaltyGuide, ZoEstimatorConfig};
use sald::harness::run::{check_budget_parity, plan_budget, write_rows};
use sald::harness::{run_experiment, run_sweep, ExperimentSpec, Method, SweepSpec, Task, TaskSetup};
use sald::metrics::{alpha_complexity, gaussian_kl};
use sald::rng::{RngLineage, Substream};
use sald::schedules::BetaSchedule;
use sald::targets::{eight_ring_centers, GaussianMixture, VpMarginalFamily};
use sald::{Result, Vec2};

struct Verdict {
    pass: bool,
    detail: String,
}

/// Collects sub-checks of one criterion.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn require(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if !ok {
            self.failed.push(what.clone());
        }
        self.notes.push(format!("{}{}", if ok { "" } else { "!" }, what));
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn verdict(self) -> Verdict {
        Verdict { pass: self.failed.is_empty(), detail: self.notes.join("; ") }
    }
}

// ---------------------------------------------------------------- oracles

/// Direct (no log-sum-exp) VP mixture density at reverse time `t`.
fn direct_density<'a>(weights: &'a [f64], means: &'a [Vec2], t: f64) -> impl Fn(Vec2) -> f64 + 'a {
    let sched = BetaSchedule::default();
    let tau = 1.0 - t;
    let int_beta = sched.beta_min * tau + 0.5 * (sched.beta_max - sched.beta_min) * tau * tau;
    let a = (-0.5 * int_beta).exp();
    move |x: Vec2| {
        weights
            .iter()
            .zip(means)
            .map(|(w, m)| w * (-(x - *m * a).norm_sq() / 2.0).exp() / (2.0 * PI))
            .sum()
    }
}

fn uniform(lin: &RngLineage, i: u64, lo: f64, hi: f64) -> [f64; 3] {
    let mut s = lin.stream_for(i, 0, Substream::Diagnostic);
    let mut u = || lo + (hi - lo) * s.uniform();
    [u(), u(), u()]
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut c = Checks::default();
    let data = GaussianMixture::eight_gaussian(4.0);
    let fam = VpMarginalFamily::new(data.clone(), BetaSchedule::default());
    let lin = RngLineage::new(11);

    // Score against central differences of the log density.
    let h = 1e-5;
    let mut worst_score: f64 = 0.0;
    for i in 0..100 {
        let [t, x, y] = uniform(&lin, i, 0.0, 1.0);
        let p = Vec2::new(12.0 * x - 6.0, 12.0 * y - 6.0);
        let lp = |q: Vec2| fam.marginal_log_density(t, q).unwrap();
        let fd = Vec2::new(
            (lp(p + Vec2::new(h, 0.0)) - lp(p - Vec2::new(h, 0.0))) / (2.0 * h),
            (lp(p + Vec2::new(0.0, h)) - lp(p - Vec2::new(0.0, h))) / (2.0 * h),
        );
        let s = fam.marginal_score(t, p)?;
        worst_score = worst_score.max((s - fd).norm() / s.norm().max(1e-6));
    }
    c.require(worst_score <= 1e-5, format!("score FD rel err {worst_score:.2e} <= 1e-5"));

    // Log density against a direct sum.
    let direct = direct_density(data.weights(), data.means(), 0.5);
    let x0 = Vec2::new(0.3, -0.7);
    let d = (fam.marginal_log_density(0.5, x0)? - direct(x0).ln()).abs();
    c.require(d <= 1e-12, format!("log density vs direct sum {d:.1e}"));

    // Continuity equation with the reverse velocity.
    let mut worst_cont: f64 = 0.0;
    let (mut used, mut i) = (0, 1000);
    while used < 100 {
        let [t, x, y] = uniform(&lin, i, 0.0, 1.0);
        i += 1;
        let t = 0.05 + 0.9 * t;
        let p = Vec2::new(10.0 * x - 5.0, 10.0 * y - 5.0);
        let dens = |t: f64, q: Vec2| fam.marginal_log_density(t, q).unwrap().exp();
        let p0 = dens(t, p);
        if p0 < 1e-8 {
            continue;
        }
        used += 1;
        let h = 1e-4;
        let flux = |q: Vec2| fam.reverse_velocity_vp(t, q).unwrap() * dens(t, q);
        let dt = (dens(t + h, p) - dens(t - h, p)) / (2.0 * h);
        let div = (flux(p + Vec2::new(h, 0.0)).x - flux(p - Vec2::new(h, 0.0)).x
            + flux(p + Vec2::new(0.0, h)).y
            - flux(p - Vec2::new(0.0, h)).y)
            / (2.0 * h);
        worst_cont = worst_cont.max((dt + div).abs() / p0);
    }
    c.require(worst_cont <= 1e-3, format!("continuity residual {worst_cont:.2e}·p <= 1e-3·p"));

    // Closed-form Gaussian KL.
    let kl_err = [
        (gaussian_kl(&[0.0, 0.0], 1.0, &[0.0, 0.0], 1.0)?, 0.0),
        (gaussian_kl(&[0.0, 0.0], 1.0, &[1.0, 0.0], 1.0)?, 0.5),
        (gaussian_kl(&[0.0], 1.0, &[0.0], 4.0)?, 0.5 * (0.25 - 1.0 + 4f64.ln())),
        (gaussian_kl(&[1.0, 2.0, 3.0], 2.0, &[0.0, 0.0, 0.0], 0.5)?, 0.5 * (3.0 * 4.0 + 14.0 / 0.5 - 3.0 + 3.0 * 0.25f64.ln())),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max);
    c.require(kl_err <= 1e-12, format!("gaussian_kl closed forms {kl_err:.1e}"));

    // Zeroth-order estimator on linear and quadratic rewards.
    let zo_z = |f: &(dyn Fn(Vec2) -> f64 + Sync), x: Vec2, truth: Vec2, stream: u64| -> Result<f64> {
        let n = 100_000;
        let sb = 0.1;
        let cfg = ZoEstimatorConfig { batch_size: n, sigma_bar: sb, normalize: false };
        let key = lin.with_stream(stream);
        let est = zo_gradient(f, x, &cfg, &mut key.stream_for(0, 0, Substream::ZoProbe))?;
        let mut replay = key.stream_for(0, 0, Substream::ZoProbe);
        let terms: Vec<Vec2> = (0..n)
            .map(|_| {
                let e = replay.normal2();
                e * (f(x + e * sb) / sb)
            })
            .collect();
        let nf = n as f64;
        let mean = terms.iter().fold(Vec2::ZERO, |a, &t| a + t) / nf;
        let var = terms.iter().fold(Vec2::ZERO, |a, &t| {
            let d = t - mean;
            a + Vec2::new(d.x * d.x, d.y * d.y)
        }) / (nf - 1.0);
        Ok(((est.x - truth.x).abs() / (var.x / nf).sqrt()).max((est.y - truth.y).abs() / (var.y / nf).sqrt()))
    };
    let a = Vec2::new(1.0, -2.0);
    let z_lin = zo_z(&|x: Vec2| a.dot(x), Vec2::new(0.5, 0.25), a, 1)?;
    let q0 = Vec2::new(1.0, 2.0);
    let z_quad = zo_z(&|x: Vec2| 0.5 * x.norm_sq(), q0, q0, 2)?;
    c.require(z_lin <= 3.0, format!("ZO linear {z_lin:.2} SE"));
    c.require(z_quad <= 3.0, format!("ZO quadratic {z_quad:.2} SE"));

    // α-complexity of v(x) = x under N(0, 1).
    let q: Vec<f64> = (0..1_000_000u64)
        .map(|i| lin.with_stream(3).stream_for(i, 0, Substream::Diagnostic).normal().powi(2))
        .collect();
    let alpha: f64 = 0.1;
    let exact = -(1.0 - 2.0 * alpha).ln() / (2.0 * alpha);
    let est = alpha_complexity(&q, alpha)?;
    let z_alpha = (est.value - exact).abs() / est.std_error;
    c.require(z_alpha <= 3.0, format!("alpha=0.1 {:.4} vs {exact:.4} ({z_alpha:.2} SE)", est.value));
    let plain = q.iter().sum::<f64>() / q.len() as f64;
    let lim = (alpha_complexity(&q, 1e-4)?.value - plain).abs();
    c.require(lim <= 1e-3, format!("alpha->0 limit err {lim:.1e}"));

    let secs = start.elapsed().as_secs_f64();
    c.require(secs < 60.0, format!("runtime {secs:.1}s < 60s"));
    Ok(c.verdict())
}

// ----------------------------------------------------------- experiments

fn criterion_2() -> Result<Verdict> {
    let mut c = Checks::default();
    let n = 100_000;
    let start = Instant::now();
    for r in [1.0, 10.0, 100.0] {
        let spec = ExperimentSpec {
            task: Task::UnguidedSanity,
            method: Method::VaSald,
            budget_r: r,
            n_particles: n,
            seed: 2024,
            ..Default::default()
        };
        let out = run_experiment(&spec)?;
        let [mx, my] = out.summary.terminal_mean;
        let [vx, vy] = out.summary.terminal_variance;
        let tol = 4.0 / (n as f64).sqrt();
        c.require(
            (mx - 2.0).abs() <= tol && my.abs() <= tol,
            format!("r={r}: mean ({mx:.4},{my:.4}) within {tol:.4} of (2,0)"),
        );
        c.require(
            (vx - 1.0).abs() <= 0.05 && (vy - 1.0).abs() <= 0.05,
            format!("var ({vx:.4},{vy:.4}) within 5% of 1"),
        );
    }
    let secs = start.elapsed().as_secs_f64();
    c.note(format!(
        "runtime {secs:.0}s on {} thread(s) (2 min target {})",
        rayon::current_num_threads(),
        if secs < 120.0 { "met" } else { "missed: host-bound, see README" }
    ));
    Ok(c.verdict())
}

struct Paper {
    sald: [f64; 4],
    va: [f64; 4],
    doit: [f64; 4],
}

const RS: [f64; 4] = [1.0, 2.0, 4.0, 10.0];

fn trend_sweep(task: Task, paper: &Paper, drop: f64, c: &mut Checks) -> Result<sald::harness::SweepOutcome> {
    let sweep = SweepSpec {
        base: ExperimentSpec { task, seed: 7, ..Default::default() },
        methods: vec![Method::Sald, Method::VaSald, Method::Doit],
        r_values: RS.to_vec(),
    };
    let out = run_sweep(&sweep, None)?;
    c.require(out.failures() == 0, format!("{} runs ok", out.rows.len()));
    let kl = |m: Method| -> Vec<f64> { RS.iter().map(|&r| out.terminal_kl(m, r).unwrap_or(f64::NAN)).collect() };
    let (s, v, d) = (kl(Method::Sald), kl(Method::VaSald), kl(Method::Doit));
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    c.note(format!("KL sald {} va {} doit {}", fmt(&s), fmt(&v), fmt(&d)));
    c.require(s.windows(2).all(|w| w[1] <= w[0] + 0.05), "SALD non-increasing (+0.05)");
    c.require(s[3] <= s[0] - drop, format!("SALD KL(10) <= KL(1) - {drop}"));
    let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
    c.require(spread <= 0.10, format!("VA-SALD spread {spread:.3} <= 0.10"));
    c.require(
        (0..4).all(|i| d[i] > s[i] && d[i] > v[i]),
        "DOIT above SALD and VA-SALD at every r",
    );
    let off = |mine: &[f64], theirs: &[f64; 4]| mine.iter().zip(theirs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    c.note(format!(
        "max |KL - paper| sald {:.2} va {:.2} doit {:.2} (reported only)",
        off(&s, &paper.sald),
        off(&v, &paper.va),
        off(&d, &paper.doit)
    ));
    Ok(out)
}

fn criterion_3() -> Result<Verdict> {
    let mut c = Checks::default();
    let paper = Paper {
        sald: [0.715, 0.592, 0.525, 0.516],
        va: [0.556, 0.549, 0.546, 0.528],
        doit: [1.267, 1.272, 1.265, 1.257],
    };
    trend_sweep(Task::TwoMoons, &paper, 0.10, &mut c)?;
    Ok(c.verdict())
}

fn criterion_4() -> Result<Verdict> {
    let mut c = Checks::default();
    let paper = Paper {
        sald: [1.547, 1.239, 1.057, 1.005],
        va: [1.015, 1.020, 1.023, 1.014],
        doit: [2.198, 2.191, 2.192, 2.222],
    };
    let out = trend_sweep(Task::EightGaussian, &paper, 0.30, &mut c)?;
    for method in [Method::Sald, Method::VaSald] {
        for r in [1.0, 10.0] {
            let guided = out
                .runs
                .iter()
                .find(|o| o.summary.method == method.name() && o.summary.r == r)
                .map(|o| o.summary.terminal_mean_penalty)
                .unwrap_or(f64::NAN);
            let unguided = run_experiment(&ExperimentSpec {
                task: Task::EightGaussian,
                method,
                budget_r: r,
                guidance_scale: 0.0,
                seed: 7,
                ..Default::default()
            })?
            .summary
            .terminal_mean_penalty;
            c.require(guided < unguided, format!("{method} r={r} penalty {guided:.3} < unguided {unguided:.3}"));
        }
    }
    let spec = ExperimentSpec { task: Task::EightGaussian, ..Default::default() };
    let setup = TaskSetup::build(&spec)?;
    let base = setup.unguided_target()?;
    let penalized = ModePenaltyGuide::left_half(&eight_ring_centers(spec.ring_radius), 1.0, 1.0);
    let near = |g: &sald::targets::GridDensity| penalized.centers().iter().map(|&m| g.mass_within(m, 1.0)).sum::<f64>();
    let (guided_mass, base_mass) = (near(&setup.target), near(&base));
    c.require(guided_mass < base_mass, format!("mass near penalized modes {guided_mass:.4} < {base_mass:.4}"));
    Ok(c.verdict())
}

fn criterion_5() -> Result<Verdict> {
    let mut c = Checks::default();
    for task in [Task::TwoMoons, Task::EightGaussian] {
        let base = ExperimentSpec { task, budget_r: 100.0, ..Default::default() };
        let mut got = Vec::new();
        for method in [Method::Sald, Method::VaSald, Method::Doit] {
            let b = plan_budget(&ExperimentSpec { method, ..base.clone() })?;
            got.push((b.steps, b.particles, b.effective_particles()));
        }
        let want = vec![(100_000, 10_000, 10_000), (100_000, 10_000, 10_000), (100_000, 2500, 10_000)];
        c.require(got == want, format!("{task} r=100 steps/particles/effective {got:?}"));
        let sweep = SweepSpec {
            base: base.clone(),
            methods: vec![Method::Sald, Method::VaSald, Method::Doit],
            r_values: SweepSpec::PAPER_BUDGETS.to_vec(),
        };
        c.require(check_budget_parity(&sweep).is_ok(), format!("{task} parity at every paper budget"));
    }
    // Executed runs report the same accounting as the plan.
    for method in [Method::Sald, Method::VaSald, Method::Doit] {
        let spec = ExperimentSpec {
            task: Task::EightGaussian,
            method,
            budget_r: 2.0,
            n_particles: 400,
            ..Default::default()
        };
        let plan = plan_budget(&spec)?;
        let s = run_experiment(&spec)?.summary;
        c.require(
            s.steps == plan.steps && s.particles == plan.particles && s.effective_particles == plan.effective_particles(),
            format!("{method} r=2 executed {} steps x {} particles", s.steps, s.particles),
        );
    }
    Ok(c.verdict())
}

fn criterion_6() -> Result<Verdict> {
    let mut c = Checks::default();
    let spec = ExperimentSpec {
        task: Task::FlowToy,
        method: Method::VaSaldFlow,
        budget_r: 4.0,
        eta: Some(0.025),
        n_particles: 100_000,
        seed: 6,
        ..Default::default()
    };
    let guided = run_experiment(&spec)?;
    c.require(
        guided.summary.steps == 160 && guided.ensemble.step_index == 160,
        format!("executed {} steps (K=160)", guided.ensemble.step_index),
    );
    let free = run_experiment(&ExperimentSpec { guidance_scale: 0.0, ..spec })?;
    let [mx, my] = free.summary.terminal_mean;
    let [vx, vy] = free.summary.terminal_variance;
    let (tmx, tmy, tv) = (1.5, -1.0, 0.25);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    c.require(
        rel(mx, tmx) <= 0.05 && rel(my, tmy) <= 0.05,
        format!("c=0 mean ({mx:.4},{my:.4}) within 5% of ({tmx},{tmy})"),
    );
    c.require(
        rel(vx, tv) <= 0.05 && rel(vy, tv) <= 0.05,
        format!("c=0 variance ({vx:.4},{vy:.4}) within 5% of {tv}"),
    );
    c.note(format!("guided c=1 terminal KL {:.3}", guided.summary.terminal_kl));
    Ok(c.verdict())
}

fn csv_at(threads: usize, spec: &ExperimentSpec) -> Result<Vec<u8>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| sald::Error::config(e.to_string()))?;
    let out = pool.install(|| run_experiment(spec))?;
    let mut buf = Vec::new();
    write_rows(&out.rows, &mut buf)?;
    serde_json::to_writer(&mut buf, &out.summary)?;
    Ok(buf)
}

fn criterion_7() -> Result<Verdict> {
    let mut c = Checks::default();
    let specs = [
        (Task::TwoMoons, Method::Sald),
        (Task::TwoMoons, Method::VaSald),
        (Task::EightGaussian, Method::Doit),
        (Task::FlowToy, Method::VaSaldFlow),
    ];
    for (task, method) in specs {
        let spec = ExperimentSpec {
            task,
            method,
            budget_r: 2.0,
            n_particles: 3000,
            seed: 99,
            ..Default::default()
        };
        let one = csv_at(1, &spec)?;
        let eight = csv_at(8, &spec)?;
        c.require(one == eight, format!("{task}/{method} {} bytes identical", one.len()));
    }
    Ok(c.verdict())
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("SALD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Result<Verdict>); 7] = [
        (1, "oracle suite", criterion_1),
        (2, "unguided VA-SALD invariance", criterion_2),
        (3, "two-moons sweep trend", criterion_3),
        (4, "eight-Gaussian sweep trend", criterion_4),
        (5, "budget accounting parity", criterion_5),
        (6, "flow-matching toy", criterion_6),
        (7, "thread-count determinism", criterion_7),
    ];
    let mut all_pass = true;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = run().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        all_pass &= verdict.pass;
        println!(
            "criterion {id} [{}] {name} ({:.1}s): {}",
            if verdict.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
