//! Analytic moving targets.
//!
//! The data law is an isotropic Gaussian mixture with a shared component
//! variance. Both the VP forward diffusion and the rectified-flow
//! interpolation keep it a mixture at every time, so densities, scores and
//! transport velocities are all available in closed form.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::guides::Guide;
use crate::point::Vec2;
use crate::rng::{RngLineage, Substream};
use crate::samplers::ParticleEnsemble;
use crate::schedules::BetaSchedule;

/// Isotropic Gaussian mixture in the plane with a shared component variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec2>,
    component_var: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec2>, component_var: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::config(format!(
                "mixture needs matching non-empty weights and means ({} vs {})",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
        }
        if !(component_var > 0.0 && component_var.is_finite()) {
            return Err(Error::config(format!(
                "component variance must be positive, got {component_var}"
            )));
        }
        Ok(GaussianMixture {
            weights,
            means,
            component_var,
        })
    }

    pub fn equal_weights(means: Vec<Vec2>, component_var: f64) -> Result<Self> {
        let k = means.len().max(1);
        GaussianMixture::new(vec![1.0 / k as f64; means.len()], means, component_var)
    }

    pub fn single(mean: Vec2, var: f64) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], var)
    }

    /// Two unit-variance components at `(±offset, 0)`.
    pub fn two_gaussian(offset: f64) -> Self {
        GaussianMixture::equal_weights(
            vec![Vec2::new(-offset, 0.0), Vec2::new(offset, 0.0)],
            1.0,
        )
        .expect("valid two-component mixture")
    }

    /// Eight unit-variance components on a ring of `radius`, starting at angle π/8.
    pub fn eight_gaussian(radius: f64) -> Self {
        GaussianMixture::equal_weights(eight_ring_centers(radius), 1.0)
            .expect("valid eight-component mixture")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec2] {
        &self.means
    }

    pub fn component_var(&self) -> f64 {
        self.component_var
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self) -> Vec2 {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(Vec2::ZERO, |acc, (&w, &m)| acc + m * w)
    }

    /// The mixture itself as a snapshot (no time evolution).
    pub fn snapshot(&self) -> MixtureSnapshot {
        MixtureSnapshot::new(&self.weights, self.means.clone(), self.component_var)
    }

    /// One i.i.d. draw; uses the first uniform for the component and the
    /// following normals for the offset.
    pub fn sample_with(&self, stream: &mut crate::rng::PhiloxStream) -> Vec2 {
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        self.means[j] + stream.normal2() * self.component_var.sqrt()
    }
}

/// Centers `R (cos(π/8 + 2πj/8), sin(π/8 + 2πj/8))`, `j = 0..8`.
pub fn eight_ring_centers(radius: f64) -> Vec<Vec2> {
    let theta0 = PI / 8.0;
    (0..8)
        .map(|j| {
            let th = theta0 + 2.0 * PI * j as f64 / 8.0;
            Vec2::new(radius * th.cos(), radius * th.sin())
        })
        .collect()
}

/// i.i.d. samples from the mixture. Particle `i` draws from its own stream,
/// so the result does not depend on evaluation order.
pub fn sample_data(mixture: &GaussianMixture, n: usize, lineage: RngLineage) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let positions = (0..n)
        .map(|i| {
            let mut s = lineage.stream_for(i as u64, 0, Substream::Data);
            mixture.sample_with(&mut s)
        })
        .collect();
    Ok(ParticleEnsemble::new(positions, lineage))
}

/// A frozen Gaussian mixture with shared isotropic variance, evaluated at
/// one time of a marginal family.
#[derive(Debug, Clone)]
pub struct MixtureSnapshot {
    log_weights: Vec<f64>,
    means: Vec<Vec2>,
    var: f64,
    inv_var: f64,
    log_norm: f64,
}

impl MixtureSnapshot {
    pub fn new(weights: &[f64], means: Vec<Vec2>, var: f64) -> Self {
        MixtureSnapshot {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            means,
            var,
            inv_var: 1.0 / var,
            log_norm: -(2.0 * PI * var).ln(),
        }
    }

    pub fn means(&self) -> &[Vec2] {
        &self.means
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    #[inline]
    fn logit(&self, j: usize, x: Vec2) -> f64 {
        self.log_weights[j] - 0.5 * (x - self.means[j]).norm_sq() * self.inv_var
    }

    #[inline]
    fn max_logit(&self, x: Vec2) -> f64 {
        (0..self.means.len())
            .map(|j| self.logit(j, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[inline]
    pub fn log_density(&self, x: Vec2) -> f64 {
        let m = self.max_logit(x);
        let s: f64 = (0..self.means.len()).map(|j| (self.logit(j, x) - m).exp()).sum();
        self.log_norm + m + s.ln()
    }

    #[inline]
    pub fn density(&self, x: Vec2) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component probabilities ω_j(x), softmax of the component
    /// log-densities after max-subtraction.
    pub fn responsibilities(&self, x: Vec2) -> Vec<f64> {
        let m = self.max_logit(x);
        let mut w: Vec<f64> = (0..self.means.len()).map(|j| (self.logit(j, x) - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }

    /// Responsibility-weighted mean `Σ ω_j m_j`.
    #[inline]
    pub fn posterior_mean(&self, x: Vec2) -> Vec2 {
        if self.means.len() == 1 {
            return self.means[0];
        }
        let m = self.max_logit(x);
        let mut total = 0.0;
        let mut acc = Vec2::ZERO;
        for (j, &mu) in self.means.iter().enumerate() {
            let w = (self.logit(j, x) - m).exp();
            total += w;
            acc += mu * w;
        }
        acc / total
    }

    /// `∇ log p(x) = Σ ω_j (m_j − x) / var`.
    #[inline]
    pub fn score(&self, x: Vec2) -> Vec2 {
        (self.posterior_mean(x) - x) * self.inv_var
    }
}

/// Reverse-indexed VP marginals `p_t = q_{T−t}` of mixture data.
///
/// At reverse time `t` each component has mean `a(T−t) c_j` and variance
/// `a(T−t)² σ² + γ²(T−t)`, which is exactly 1 when `σ² = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VpMarginalFamily {
    pub data: GaussianMixture,
    pub schedule: BetaSchedule,
}

impl VpMarginalFamily {
    pub fn new(data: GaussianMixture, schedule: BetaSchedule) -> Self {
        VpMarginalFamily { data, schedule }
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon
    }

    pub fn at(&self, t: f64) -> Result<VpSnapshot> {
        check_range("t", t, 0.0, self.horizon())?;
        Ok(self.at_unchecked(t))
    }

    /// Snapshot at reverse time `t`, clamped into `[0, T]`.
    pub(crate) fn at_unchecked(&self, t: f64) -> VpSnapshot {
        let t = t.clamp(0.0, self.horizon());
        let tau = self.horizon() - t;
        let c = self.schedule.vp_unchecked(tau);
        let var = c.decay_a * c.decay_a * self.data.component_var() + c.noise_gamma2;
        let means = self.data.means().iter().map(|&m| m * c.decay_a).collect();
        VpSnapshot {
            mixture: MixtureSnapshot::new(self.data.weights(), means, var),
            beta: self.schedule.beta_unchecked(tau),
            decay_a: c.decay_a,
        }
    }

    pub fn marginal_log_density(&self, t: f64, x: Vec2) -> Result<f64> {
        Ok(self.at(t)?.mixture.log_density(x))
    }

    pub fn marginal_score(&self, t: f64, x: Vec2) -> Result<Vec2> {
        Ok(self.at(t)?.mixture.score(x))
    }

    pub fn reverse_velocity_vp(&self, t: f64, x: Vec2) -> Result<Vec2> {
        Ok(self.at(t)?.reverse_velocity(x))
    }

    /// Guided target `∝ p_t · exp(−c f)` on a grid.
    pub fn guided_target_grid(
        &self,
        t: f64,
        guide: Option<&dyn Guide>,
        grid: GridSpec,
        guidance_scale: f64,
    ) -> Result<GridDensity> {
        let snap = self.at(t)?;
        guided_grid(grid, |x| snap.mixture.log_density(x), guide, guidance_scale)
    }
}

/// A VP marginal at one reverse time, with `β(T − t)` attached.
#[derive(Debug, Clone)]
pub struct VpSnapshot {
    pub mixture: MixtureSnapshot,
    pub beta: f64,
    pub decay_a: f64,
}

impl VpSnapshot {
    #[inline]
    pub fn score(&self, x: Vec2) -> Vec2 {
        self.mixture.score(x)
    }

    /// `u_t(x) = ½ β(T−t) (x + ∇ log p_t(x))`.
    #[inline]
    pub fn reverse_velocity(&self, x: Vec2) -> Vec2 {
        (x + self.mixture.score(x)) * (0.5 * self.beta)
    }
}

/// Rectified-flow interpolation `x_τ = (1−τ) x_data + τ σ_s ε`.
///
/// Forward time `τ` runs from data (`τ = 0`) to the Gaussian source
/// (`τ = 1`); the marginal at `τ` has component means `(1−τ) c_j` and
/// variance `(1−τ)² σ² + τ² σ_s²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMarginalFamily {
    pub data: GaussianMixture,
    pub source_std: f64,
}

impl FlowMarginalFamily {
    pub fn new(data: GaussianMixture, source_std: f64) -> Result<Self> {
        if !(source_std > 0.0 && source_std.is_finite()) {
            return Err(Error::config(format!("source std must be positive, got {source_std}")));
        }
        Ok(FlowMarginalFamily { data, source_std })
    }

    pub fn at(&self, tau: f64) -> Result<MixtureSnapshot> {
        check_range("tau", tau, 0.0, 1.0)?;
        Ok(self.at_unchecked(tau))
    }

    pub(crate) fn at_unchecked(&self, tau: f64) -> MixtureSnapshot {
        let keep = 1.0 - tau;
        let var = keep * keep * self.data.component_var()
            + tau * tau * self.source_std * self.source_std;
        let means = self.data.means().iter().map(|&m| m * keep).collect();
        MixtureSnapshot::new(self.data.weights(), means, var)
    }

    pub fn score(&self, tau: f64, x: Vec2) -> Result<Vec2> {
        Ok(self.at(tau)?.score(x))
    }

    /// Marginal velocity `E[σ_s ε − x_data | x_τ = x]` in closed form.
    ///
    /// Finite on the closed interval `[0, 1]`; this is the field the flow
    /// sampler evaluates.
    pub fn velocity(&self, tau: f64, x: Vec2) -> Result<Vec2> {
        check_range("tau", tau, 0.0, 1.0)?;
        Ok(self.velocity_unchecked(tau, x))
    }

    #[inline]
    pub(crate) fn velocity_unchecked(&self, tau: f64, x: Vec2) -> Vec2 {
        let keep = 1.0 - tau;
        let dvar = self.data.component_var();
        let s2 = self.source_std * self.source_std;
        let v = keep * keep * dvar + tau * tau * s2;
        let gain = (tau * s2 - keep * dvar) / v;
        let snap = self.at_unchecked(tau);
        // Per component: E[σ_s ε − x_data | x, j] = gain (x − (1−τ)c_j) − c_j.
        let w = snap.responsibilities(x);
        w.iter()
            .zip(self.data.means())
            .fold(Vec2::ZERO, |acc, (&wj, &c)| acc + ((x - c * keep) * gain - c) * wj)
    }

    /// The same velocity recovered from the score,
    /// `v = −(x + τ σ_s² ∇log p_τ(x)) / (1 − τ)`; singular at both endpoints.
    pub fn velocity_via_score(&self, tau: f64, x: Vec2) -> Result<Vec2> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain {
                what: "tau",
                value: tau,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let score = self.at_unchecked(tau).score(x);
        let s2 = self.source_std * self.source_std;
        Ok(-(x + score * (tau * s2)) / (1.0 - tau))
    }

    /// Guided target `∝ p_τ · exp(−c f)` on a grid (τ = 0 is the data law).
    pub fn guided_target_grid(
        &self,
        tau: f64,
        guide: Option<&dyn Guide>,
        grid: GridSpec,
        guidance_scale: f64,
    ) -> Result<GridDensity> {
        let snap = self.at(tau)?;
        guided_grid(grid, |x| snap.log_density(x), guide, guidance_scale)
    }
}

/// A regular grid of cells over a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::config("grid needs at least one cell per axis"));
        }
        if !(x_range.1 > x_range.0 && y_range.1 > y_range.0) {
            return Err(Error::config(format!(
                "grid ranges must be increasing, got {x_range:?} x {y_range:?}"
            )));
        }
        Ok(GridSpec {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            nx,
            ny,
        })
    }

    /// `[−half, half]²` with `n × n` cells.
    pub fn square(half: f64, n: usize) -> Self {
        GridSpec::new((-half, half), (-half, half), n, n).expect("valid square grid")
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.x_min + (ix as f64 + 0.5) * self.dx(),
            self.y_min + (iy as f64 + 0.5) * self.dy(),
        )
    }

    /// Row-major cell index of `p`; points outside map to the nearest boundary cell.
    #[inline]
    pub fn cell_of(&self, p: Vec2) -> usize {
        let fx = ((p.x - self.x_min) / self.dx()).floor();
        let fy = ((p.y - self.y_min) / self.dy()).floor();
        let ix = if fx.is_nan() { 0.0 } else { fx.clamp(0.0, (self.nx - 1) as f64) } as usize;
        let iy = if fy.is_nan() { 0.0 } else { fy.clamp(0.0, (self.ny - 1) as f64) } as usize;
        iy * self.nx + ix
    }
}

/// A normalized piecewise-constant density on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub spec: GridSpec,
    /// Density per cell, row-major (`iy * nx + ix`).
    pub values: Vec<f64>,
    pub cell_area: f64,
}

impl GridDensity {
    /// Normalizes non-negative cell weights so that `Σ values · area = 1`.
    pub fn from_weights(spec: GridSpec, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != spec.len() {
            return Err(Error::config("weight count does not match the grid"));
        }
        let area = spec.cell_area();
        let total: f64 = weights.iter().sum::<f64>() * area;
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::config(format!("grid weights have invalid total mass {total}")));
        }
        let values = weights.into_iter().map(|w| w / total).collect();
        Ok(GridDensity {
            spec,
            values,
            cell_area: area,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area
    }

    /// Probability mass of each cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        self.values.iter().map(|v| v * self.cell_area).collect()
    }

    /// Mass of cells whose center lies within `radius` of `center`.
    pub fn mass_within(&self, center: Vec2, radius: f64) -> f64 {
        let mut m = 0.0;
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                if (self.spec.center(ix, iy) - center).norm() <= radius {
                    m += self.values[iy * self.spec.nx + ix];
                }
            }
        }
        m * self.cell_area
    }

    /// Expectation of `g` under the piecewise-constant density, with `sub × sub`
    /// midpoint sub-cells per grid cell.
    pub fn expect(&self, sub: usize, g: impl Fn(Vec2) -> f64) -> f64 {
        let (dx, dy) = (self.spec.dx(), self.spec.dy());
        let sub = sub.max(1);
        let mut total = 0.0;
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                let mass = self.values[iy * self.spec.nx + ix] * self.cell_area;
                if mass == 0.0 {
                    continue;
                }
                let x0 = self.spec.x_min + ix as f64 * dx;
                let y0 = self.spec.y_min + iy as f64 * dy;
                let mut acc = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let p = Vec2::new(
                            x0 + (a as f64 + 0.5) * dx / sub as f64,
                            y0 + (b as f64 + 0.5) * dy / sub as f64,
                        );
                        acc += g(p);
                    }
                }
                total += mass * acc / (sub * sub) as f64;
            }
        }
        total
    }

    /// Draws `n` points: a cell by inverse CDF, then uniformly inside it.
    pub fn sample(&self, n: usize, lineage: RngLineage) -> Vec<Vec2> {
        let mut cdf = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        for v in &self.values {
            acc += v * self.cell_area;
            cdf.push(acc);
        }
        let total = acc;
        let (dx, dy) = (self.spec.dx(), self.spec.dy());
        (0..n)
            .map(|i| {
                let mut s = lineage.stream_for(i as u64, 0, Substream::Diagnostic);
                let u = s.uniform() * total;
                let k = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                let (ix, iy) = (k % self.spec.nx, k / self.spec.nx);
                Vec2::new(
                    self.spec.x_min + (ix as f64 + s.uniform()) * dx,
                    self.spec.y_min + (iy as f64 + s.uniform()) * dy,
                )
            })
            .collect()
    }

    /// Writes `x,y,density` rows at cell centers.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,density")?;
        for iy in 0..self.spec.ny {
            for ix in 0..self.spec.nx {
                let c = self.spec.center(ix, iy);
                writeln!(w, "{},{},{:e}", c.x, c.y, self.values[iy * self.spec.nx + ix])?;
            }
        }
        Ok(())
    }
}

/// Cell values `∝ exp(log p(center) − c f(center))`, normalized by the Riemann sum.
pub fn guided_grid(
    grid: GridSpec,
    log_density: impl Fn(Vec2) -> f64,
    guide: Option<&dyn Guide>,
    guidance_scale: f64,
) -> Result<GridDensity> {
    let mut logs = Vec::with_capacity(grid.len());
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let c = grid.center(ix, iy);
            let tilt = match guide {
                Some(g) if guidance_scale != 0.0 => {
                    let f = g.value(c);
                    if !f.is_finite() {
                        return Err(Error::NonFiniteGuide { ix, iy });
                    }
                    guidance_scale * f
                }
                _ => 0.0,
            };
            logs.push(log_density(c) - tilt);
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = logs.into_iter().map(|l| (l - m).exp()).collect();
    GridDensity::from_weights(grid, weights)
}
