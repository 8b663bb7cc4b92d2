//! Particle samplers.
//!
//! - [`run_sald`]: Euler–Maruyama Langevin on the guided score, slowed by `r`.
//! - [`run_va_sald_vp`]: adds the VP reverse transport velocity `u_t / r`.
//! - [`run_va_sald_flow`]: the flow-matching update with a zeroth-order guide gradient.
//! - [`run_doit`]: reverse VP SDE with a local reward-weighted Doob correction.
//!
//! Noise for particle `i` at step `k` comes from its own counter-based
//! stream, so every sampler is bit-reproducible at any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guides::{zo_gradient, Guide, ZoEstimatorConfig};
use crate::point::Vec2;
use crate::rng::{PhiloxStream, RngLineage, Substream};
use crate::targets::{FlowMarginalFamily, VpMarginalFamily};

/// Stream id of sampler noise within a run lineage.
const SAMPLER_STREAM: u64 = 1;
/// Minimum particles per rayon task.
const PAR_CHUNK: usize = 256;

/// Particle positions, the number of completed steps, and the lineage that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub positions: Vec<Vec2>,
    pub step_index: u64,
    pub lineage: RngLineage,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<Vec2>, lineage: RngLineage) -> Self {
        ParticleEnsemble {
            positions,
            step_index: 0,
            lineage,
        }
    }

    /// `n` i.i.d. draws from `N(0, I)`.
    pub fn standard_normal(n: usize, lineage: RngLineage) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let positions = (0..n)
            .map(|i| lineage.stream_for(i as u64, 0, Substream::Init).normal2())
            .collect();
        Ok(ParticleEnsemble::new(positions, lineage))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mean(&self) -> Vec2 {
        let n = self.positions.len() as f64;
        self.positions.iter().fold(Vec2::ZERO, |a, &p| a + p) / n
    }

    /// Per-coordinate sample variance (divisor `n − 1`).
    pub fn coordinate_variance(&self) -> Vec2 {
        let m = self.mean();
        let n = self.positions.len() as f64;
        let acc = self.positions.iter().fold(Vec2::ZERO, |a, &p| {
            let d = p - m;
            a + Vec2::new(d.x * d.x, d.y * d.y)
        });
        acc / (n - 1.0).max(1.0)
    }
}

/// Shared settings of the slowed samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub budget_r: f64,
    pub n_particles: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Observer cadence in steps; `None` means `max(1, K / 200)`.
    pub metric_every: Option<u64>,
    /// Test hook: replace every diffusion draw ξ by 0.
    pub zero_noise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            eta: 0.001,
            budget_r: 1.0,
            n_particles: 10_000,
            guidance_scale: 1.0,
            seed: 0,
            metric_every: None,
            zero_noise: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.budget_r >= 1.0 && self.budget_r.is_finite()) {
            return Err(Error::config(format!("budget r must be >= 1, got {}", self.budget_r)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if self.metric_every == Some(0) {
            return Err(Error::config("metric cadence must be >= 1"));
        }
        Ok(())
    }

    /// `K = round(r T / η)`.
    pub fn step_count(&self, horizon: f64) -> u64 {
        (self.budget_r * horizon / self.eta).round() as u64
    }

    pub fn cadence(&self, steps: u64) -> u64 {
        self.metric_every.unwrap_or_else(|| default_cadence(steps))
    }

    pub fn noise_lineage(&self) -> RngLineage {
        RngLineage::new(self.seed).with_stream(SAMPLER_STREAM)
    }
}

pub fn default_cadence(steps: u64) -> u64 {
    (steps / 200).max(1)
}

/// Settings of the DOIT baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoitConfig {
    pub n_proposals: usize,
    pub reward_temperature: f64,
    pub guidance_strength: f64,
    pub budget_label: f64,
}

impl Default for DoitConfig {
    fn default() -> Self {
        DoitConfig {
            n_proposals: 4,
            reward_temperature: 1.0,
            guidance_strength: 1.0,
            budget_label: 1.0,
        }
    }
}

impl DoitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_proposals == 0 {
            return Err(Error::config("doit needs at least one proposal"));
        }
        if !(self.reward_temperature > 0.0 && self.reward_temperature.is_finite()) {
            return Err(Error::config("doit reward temperature must be positive"));
        }
        if !(self.guidance_strength >= 0.0 && self.guidance_strength.is_finite()) {
            return Err(Error::config("doit guidance strength must be >= 0"));
        }
        if !(self.budget_label >= 1.0 && self.budget_label.is_finite()) {
            return Err(Error::config("doit budget label must be >= 1"));
        }
        Ok(())
    }

    pub fn effective_particles(&self, n_particles: usize) -> usize {
        n_particles * self.n_proposals
    }
}

/// State handed to observers: after `k` completed steps, at slowed time
/// `s = k η` and target time `t`.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub k: u64,
    pub s: f64,
    pub t: f64,
    pub positions: &'a [Vec2],
}

pub type Observer<'a> = dyn FnMut(&Snapshot<'_>) -> Result<()> + 'a;

/// An observer that ignores every snapshot.
pub fn ignore(_: &Snapshot<'_>) -> Result<()> {
    Ok(())
}

/// Number of reverse transitions and step size of DOIT at budget label `r_b`:
/// `N = ⌈r_b T / η_s⌉`, `η = T / N`.
pub fn doit_step_count(budget_label: f64, horizon: f64, eta_s: f64) -> Result<(u64, f64)> {
    if !(budget_label >= 1.0) {
        return Err(Error::config(format!("budget label must be >= 1, got {budget_label}")));
    }
    if !(eta_s > 0.0 && horizon > 0.0) {
        return Err(Error::config("doit needs positive horizon and step"));
    }
    let raw = budget_label * horizon / eta_s;
    // Ratios like 100 / 0.001 land one ulp away from an integer.
    let nearest = raw.round();
    let n = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    let n = n.max(1.0) as u64;
    Ok((n, horizon / n as f64))
}

#[derive(Clone, Copy)]
struct Particle {
    key: u64,
}

impl Particle {
    #[inline]
    fn stream(self, step: u64, sub: Substream) -> PhiloxStream {
        PhiloxStream::at(self.key, step, sub)
    }
}

struct Plan {
    steps: u64,
    cadence: u64,
    eta: f64,
    time_scale: f64,
}

impl Plan {
    /// Slowed time `s = k η` and target time `t = s / scale`.
    fn clock(&self, k: u64) -> (f64, f64) {
        let s = k as f64 * self.eta;
        (s, s / self.time_scale)
    }
}

/// Runs `steps` parallel particle updates. `context` builds the per-step
/// frozen target once; `update` maps one particle.
fn integrate<C, F, U>(
    mut ens: ParticleEnsemble,
    plan: Plan,
    lineage: RngLineage,
    context: F,
    update: U,
    observer: &mut Observer<'_>,
) -> Result<ParticleEnsemble>
where
    C: Sync,
    F: Fn(u64, f64) -> C,
    U: Fn(&C, Particle, Vec2, u64) -> Result<Vec2> + Sync,
{
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if let Some((i, _)) = ens.positions.iter().enumerate().find(|(_, p)| !p.is_finite()) {
        return Err(Error::NonFinite { step: 0, particle: i });
    }
    ens.lineage = lineage;
    ens.step_index = 0;
    let keys: Vec<u64> = (0..ens.len() as u64).map(|i| lineage.particle_key(i)).collect();
    {
        let (s, t) = plan.clock(0);
        observer(&Snapshot { k: 0, s, t, positions: &ens.positions })?;
    }
    for k in 0..plan.steps {
        let (_, t) = plan.clock(k);
        let ctx = context(k, t);
        let failure = ens
            .positions
            .par_iter_mut()
            .zip(keys.par_iter())
            .enumerate()
            .with_min_len(PAR_CHUNK)
            .filter_map(|(i, (x, &key))| match update(&ctx, Particle { key }, *x, k) {
                Ok(v) if v.is_finite() => {
                    *x = v;
                    None
                }
                Ok(_) => Some((i, Error::NonFinite { step: k, particle: i })),
                Err(e) => Some((i, e.with_context(format!("step {k}, particle {i}")))),
            })
            .min_by_key(|(i, _)| *i);
        if let Some((_, e)) = failure {
            return Err(e);
        }
        ens.step_index = k + 1;
        if ens.step_index % plan.cadence == 0 || ens.step_index == plan.steps {
            let (s, t) = plan.clock(ens.step_index);
            observer(&Snapshot {
                k: ens.step_index,
                s,
                t,
                positions: &ens.positions,
            })?;
        }
    }
    Ok(ens)
}

#[inline]
fn diffusion(cfg: &SamplerConfig, p: Particle, k: u64) -> Vec2 {
    if cfg.zero_noise {
        Vec2::ZERO
    } else {
        p.stream(k, Substream::Diffusion).normal2()
    }
}

#[inline]
fn guide_grad(guide: Option<&dyn Guide>, scale: f64, x: Vec2) -> Vec2 {
    match guide {
        Some(g) if scale != 0.0 => g.grad(x) * scale,
        _ => Vec2::ZERO,
    }
}

/// Discrete SALD on `π_t ∝ p_t e^{−c f}` with `t_k = k η / r`:
/// `X ← X + η (∇log p_{t_k}(X) − c ∇f(X)) + √(2η) ξ`.
pub fn run_sald(
    family: &VpMarginalFamily,
    guide: Option<&dyn Guide>,
    cfg: &SamplerConfig,
    init: ParticleEnsemble,
    observer: &mut Observer<'_>,
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    let steps = cfg.step_count(family.horizon());
    let plan = Plan {
        steps,
        cadence: cfg.cadence(steps),
        eta: cfg.eta,
        time_scale: cfg.budget_r,
    };
    let lineage = cfg.noise_lineage();
    let noise = (2.0 * cfg.eta).sqrt();
    integrate(
        init,
        plan,
        lineage,
        |_, t| family.at_unchecked(t),
        |snap, i, x, k| {
            let drift = snap.score(x) - guide_grad(guide, cfg.guidance_scale, x);
            Ok(x + drift * cfg.eta + diffusion(cfg, i, k) * noise)
        },
        observer,
    )
}

/// VA-SALD on the VP family with `σ_t² = β(T − t)`:
/// `X ← X + η [u_t(X)/r + (σ²/2)(∇log p_t(X) − c ∇f(X))] + σ √η ξ`.
pub fn run_va_sald_vp(
    family: &VpMarginalFamily,
    guide: Option<&dyn Guide>,
    cfg: &SamplerConfig,
    init: ParticleEnsemble,
    observer: &mut Observer<'_>,
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    let steps = cfg.step_count(family.horizon());
    let plan = Plan {
        steps,
        cadence: cfg.cadence(steps),
        eta: cfg.eta,
        time_scale: cfg.budget_r,
    };
    let lineage = cfg.noise_lineage();
    let rate = 1.0 / cfg.budget_r;
    integrate(
        init,
        plan,
        lineage,
        |_, t| family.at_unchecked(t),
        |snap, i, x, k| {
            let score = snap.score(x);
            let transport = (x + score) * (0.5 * snap.beta);
            let guided = score - guide_grad(guide, cfg.guidance_scale, x);
            let drift = transport * rate + guided * (0.5 * snap.beta);
            let noise = (snap.beta * cfg.eta).sqrt();
            Ok(x + drift * cfg.eta + diffusion(cfg, i, k) * noise)
        },
        observer,
    )
}

/// Black-box guide potential queried by the zeroth-order estimator.
pub type Potential<'a> = dyn Fn(Vec2) -> f64 + Sync + 'a;

/// VA-SALD for flow matching, `t_k = k η / r`, `σ_t = (1 − t) σ₀`:
///
/// `X ← (1 − σ²η/(2(1−t))) X − (1/r + tσ²/(2(1−t))) η v(X)
///      − (c σ² η / 2) ĝ(X) + σ √η w`
///
/// where `v` is the flow velocity at forward time `1 − t` and `ĝ` the
/// zeroth-order gradient of `potential` with smoothing `σ̄ = σ √η`.
/// `K = round(r / η)`; the last update uses `t_{K−1} < 1`.
pub fn run_va_sald_flow(
    family: &FlowMarginalFamily,
    potential: Option<&Potential<'_>>,
    cfg: &SamplerConfig,
    zo: &ZoEstimatorConfig,
    sigma0: f64,
    init: ParticleEnsemble,
    observer: &mut Observer<'_>,
) -> Result<ParticleEnsemble> {
    cfg.validate()?;
    zo.validate()?;
    if !(sigma0 >= 0.0 && sigma0.is_finite()) {
        return Err(Error::config(format!("sigma0 must be >= 0, got {sigma0}")));
    }
    let steps = cfg.step_count(1.0);
    let plan = Plan {
        steps,
        cadence: cfg.cadence(steps),
        eta: cfg.eta,
        time_scale: cfg.budget_r,
    };
    let lineage = cfg.noise_lineage();
    let eta = cfg.eta;
    let rate = 1.0 / cfg.budget_r;
    let c = cfg.guidance_scale;
    integrate(
        init,
        plan,
        lineage,
        |_, t| t,
        |&t, i, x, k| {
            if t >= 1.0 {
                return Err(Error::Domain { what: "t", value: t, lo: 0.0, hi: 1.0 });
            }
            let sigma = (1.0 - t) * sigma0;
            let s2 = sigma * sigma;
            let v = family.velocity_unchecked(1.0 - t, x);
            let mut next = x * (1.0 - s2 * eta / (2.0 * (1.0 - t)))
                - v * ((rate + t * s2 / (2.0 * (1.0 - t))) * eta);
            if let Some(f) = potential {
                if c != 0.0 && sigma > 0.0 {
                    let probe_cfg = ZoEstimatorConfig {
                        sigma_bar: sigma * eta.sqrt(),
                        ..*zo
                    };
                    let mut probes = i.stream(k, Substream::ZoProbe);
                    let g = zo_gradient(f, x, &probe_cfg, &mut probes)?;
                    next -= g * (0.5 * c * s2 * eta);
                }
            }
            Ok(next + diffusion(cfg, i, k) * (sigma * eta.sqrt()))
        },
        observer,
    )
}

/// Softmax of `(R_m − max_j R_j) / τ`.
pub fn boltzmann_weights(rewards: &[f64], temperature: f64) -> Vec<f64> {
    let m = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = rewards.iter().map(|r| ((r - m) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// DOIT on the unslowed reverse VP interval with `N = ⌈r_b T / η_s⌉` steps.
///
/// Per particle: `b = (β/2) x + β ∇log p_t(x)`, proposals
/// `x + η b + √(ηβ) z_m`, rewards `R = −c f`, Boltzmann weights `w`,
/// `ĝ = Σ w_m z_m / √(ηβ)`, and
/// `X ← X + η (b + γ β ĝ) + √(ηβ) ξ`.
/// `base.n_particles` is the DOIT particle count; `base.eta` is the SALD step `η_s`.
pub fn run_doit(
    family: &VpMarginalFamily,
    guide: Option<&dyn Guide>,
    doit: &DoitConfig,
    base: &SamplerConfig,
    init: ParticleEnsemble,
    observer: &mut Observer<'_>,
) -> Result<ParticleEnsemble> {
    base.validate()?;
    doit.validate()?;
    let (steps, eta) = doit_step_count(doit.budget_label, family.horizon(), base.eta)?;
    let plan = Plan {
        steps,
        cadence: base.cadence(steps),
        eta,
        time_scale: 1.0,
    };
    let lineage = base.noise_lineage();
    let c = base.guidance_scale;
    let m = doit.n_proposals;
    integrate(
        init,
        plan,
        lineage,
        |_, t| family.at_unchecked(t),
        |snap, i, x, k| {
            let beta = snap.beta;
            let b = x * (0.5 * beta) + snap.score(x) * beta;
            let sd = (eta * beta).sqrt();
            let mean = x + b * eta;
            let mut correction = Vec2::ZERO;
            if sd > 0.0 {
                let mut stream = i.stream(k, Substream::Proposal);
                let mut zs = [Vec2::ZERO; 16];
                let mut heap_zs = Vec::new();
                let zs: &mut [Vec2] = if m <= zs.len() {
                    &mut zs[..m]
                } else {
                    heap_zs.resize(m, Vec2::ZERO);
                    &mut heap_zs
                };
                let mut rewards = Vec::with_capacity(m);
                for z in zs.iter_mut() {
                    *z = stream.normal2();
                    let reward = match guide {
                        Some(g) => -c * g.value(mean + *z * sd),
                        None => 0.0,
                    };
                    rewards.push(reward);
                }
                let w = boltzmann_weights(&rewards, doit.reward_temperature);
                let g_doob = zs.iter().zip(&w).fold(Vec2::ZERO, |a, (&z, &wm)| a + z * wm) / sd;
                correction = g_doob * (doit.guidance_strength * beta);
            }
            Ok(x + (b + correction) * eta + diffusion(base, i, k) * sd)
        },
        observer,
    )
}
