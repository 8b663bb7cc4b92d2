//! Diagnostics: grid KL to the guided terminal target, the mean guide
//! penalty, α-complexity of a field along a path, and the variance of the
//! guide residual `g_t = ∇f^⊤ u_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guides::Guide;
use crate::point::Vec2;
use crate::rng::RngLineage;
use crate::targets::{GridDensity, GridSpec, VpMarginalFamily};

/// Default Laplace smoothing of the KL histogram.
pub const KL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub value: f64,
    pub n_particles: usize,
    pub grid: GridSpec,
    pub smoothing_eps: f64,
}

/// Histogram KL `Σ ĥ log(ĥ / π̂)` on the target's grid.
///
/// Particles outside the grid count in the nearest boundary cell. Both the
/// histogram and the target cell masses get `eps` added per cell and are
/// renormalized, so the value is a KL between two strictly positive
/// distributions and never negative.
pub fn kl_grid(positions: &[Vec2], target: &GridDensity, eps: f64) -> Result<KlEstimate> {
    if positions.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(eps > 0.0) {
        return Err(Error::config(format!("kl smoothing eps must be positive, got {eps}")));
    }
    let spec = target.spec;
    let mut counts = vec![0u32; spec.len()];
    for &p in positions {
        counts[spec.cell_of(p)] += 1;
    }
    let n = positions.len() as f64;
    let cells = spec.len() as f64;
    let h_total = 1.0 + eps * cells;
    let p_total = target.total_mass() + eps * cells;
    let mut kl = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let h = (c as f64 / n + eps) / h_total;
        let p = (target.values[k] * target.cell_area + eps) / p_total;
        kl += h * (h / p).ln();
    }
    Ok(KlEstimate {
        value: kl.max(0.0),
        n_particles: positions.len(),
        grid: spec,
        smoothing_eps: eps,
    })
}

/// Closed-form `KL(N(m₁, v₁ I) ‖ N(m₂, v₂ I))` in dimension `m₁.len()`.
pub fn gaussian_kl(mean1: &[f64], var1: f64, mean2: &[f64], var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::config(format!("variances must be positive, got {var1}, {var2}")));
    }
    if mean1.len() != mean2.len() {
        return Err(Error::config("gaussian_kl: mean dimensions differ"));
    }
    let d = mean1.len() as f64;
    let dist2: f64 = mean1.iter().zip(mean2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (d * var1 / var2 + dist2 / var2 - d + d * (var2 / var1).ln()))
}

/// Average of the unscaled guide value over the ensemble; 0 without a guide.
pub fn mean_penalty(positions: &[Vec2], guide: Option<&dyn Guide>) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let Some(g) = guide else { return Ok(0.0) };
    Ok(positions.iter().map(|&p| g.value(p)).sum::<f64>() / positions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub alpha: f64,
    pub value: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

/// `(1/α) log mean exp(α q_i)` over squared field norms `q_i = ‖v(x_i)‖²`.
///
/// Evaluated with max-subtraction; the standard error is the delta-method
/// error of the log-mean-exp.
pub fn alpha_complexity(sq_norms: &[f64], alpha: f64) -> Result<ComplexityEstimate> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be positive, got {alpha}")));
    }
    if sq_norms.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if let Some(q) = sq_norms.iter().find(|q| !q.is_finite()) {
        return Err(Error::config(format!("non-finite field norm {q}")));
    }
    let n = sq_norms.len() as f64;
    let qmax = sq_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for &q in sq_norms {
        let w = (alpha * (q - qmax)).exp();
        s1 += w;
        s2 += w * w;
    }
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(ComplexityEstimate {
        alpha,
        value: qmax + mean.ln() / alpha,
        n_samples: sq_norms.len(),
        std_error: (var / n).sqrt() / (mean * alpha),
    })
}

/// [`alpha_complexity`] of a vector field evaluated on samples.
pub fn alpha_complexity_of(
    samples: &[Vec2],
    field: impl Fn(Vec2) -> Vec2,
    alpha: f64,
) -> Result<ComplexityEstimate> {
    let q: Vec<f64> = samples.iter().map(|&x| field(x).norm_sq()).collect();
    alpha_complexity(&q, alpha)
}

/// Trapezoid rule on sorted nodes.
pub fn trapezoid(ts: &[f64], ys: &[f64]) -> f64 {
    ts.windows(2)
        .zip(ys.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum()
}

/// `n` uniformly spaced nodes on `[0, T]`.
pub fn uniform_nodes(horizon: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect()
}

/// Default node count of [`path_complexity`].
pub const PATH_NODES: usize = 21;

/// Where the path samples `π_t ∝ p_t e^{−c f}` come from.
#[derive(Clone, Copy)]
pub struct GuidedPath<'a> {
    pub family: &'a VpMarginalFamily,
    pub guide: Option<&'a dyn Guide>,
    pub guidance_scale: f64,
    pub grid: GridSpec,
}

impl GuidedPath<'_> {
    /// `n` draws from the gridded `π_t`.
    pub fn sample(&self, t: f64, n: usize, lineage: RngLineage) -> Result<Vec<Vec2>> {
        let target = self.family.guided_target_grid(t, self.guide, self.grid, self.guidance_scale)?;
        Ok(target.sample(n, lineage))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathComplexity {
    pub value: f64,
    pub nodes: Vec<f64>,
    pub node_values: Vec<ComplexityEstimate>,
}

/// `∫₀^T 𝔈_α(π_t, v_t) dt` by the trapezoid rule over `t_grid`.
pub fn path_complexity(
    path: &GuidedPath<'_>,
    field: impl Fn(f64, Vec2) -> Vec2,
    alpha: f64,
    t_grid: &[f64],
    samples_per_node: usize,
    lineage: RngLineage,
) -> Result<PathComplexity> {
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::config("t_grid must be strictly increasing"));
    }
    let mut node_values = Vec::with_capacity(t_grid.len());
    for (i, &t) in t_grid.iter().enumerate() {
        let xs = path.sample(t, samples_per_node, lineage.with_stream(lineage.stream ^ (i as u64 + 1)))?;
        node_values.push(alpha_complexity_of(&xs, |x| field(t, x), alpha)?);
    }
    let ys: Vec<f64> = node_values.iter().map(|e| e.value).collect();
    Ok(PathComplexity {
        value: trapezoid(t_grid, &ys),
        nodes: t_grid.to_vec(),
        node_values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualVariance {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

/// Monte Carlo `Var_{π_t}[g_t]` of the residual `g_t(x) = c ∇f(x)^⊤ u_t(x)`
/// for a static guide (`∂_t f = 0`), sampled from the gridded `π_t`.
pub fn residual_variance(
    path: &GuidedPath<'_>,
    velocity: impl Fn(f64, Vec2) -> Vec2,
    t: f64,
    n_samples: usize,
    lineage: RngLineage,
) -> Result<ResidualVariance> {
    if n_samples < 2 {
        return Err(Error::config("residual variance needs at least two samples"));
    }
    let xs = path.sample(t, n_samples, lineage)?;
    let g: Vec<f64> = match path.guide {
        Some(guide) => xs
            .iter()
            .map(|&x| path.guidance_scale * guide.grad(x).dot(velocity(t, x)))
            .collect(),
        None => vec![0.0; xs.len()],
    };
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let m2 = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = g.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    Ok(ResidualVariance {
        t,
        mean,
        variance,
        n_samples,
        std_error: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    })
}
