//! Guide potentials `f` and their gradients.
//!
//! A guide tilts the pretrained marginals, `π ∝ p · exp(−c f)`. The
//! two-moons guide averages distances to a reference cloud and is expensive,
//! so samplers query a [`BilinearGuideCache`] built on a node grid. The
//! zeroth-order estimator only needs black-box evaluations of `f`.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Vec2;
use crate::rng::{PhiloxStream, RngLineage, Substream};

/// A potential with a gradient. Implementations are immutable and shareable.
pub trait Guide: Send + Sync {
    fn value(&self, x: Vec2) -> f64;
    fn grad(&self, x: Vec2) -> Vec2;
}

impl<G: Guide + ?Sized> Guide for &G {
    fn value(&self, x: Vec2) -> f64 {
        (**self).value(x)
    }
    fn grad(&self, x: Vec2) -> Vec2 {
        (**self).grad(x)
    }
}

impl<G: Guide + ?Sized> Guide for Box<G> {
    fn value(&self, x: Vec2) -> f64 {
        (**self).value(x)
    }
    fn grad(&self, x: Vec2) -> Vec2 {
        (**self).grad(x)
    }
}

/// `f(x) = (1 / (λ N)) Σ_j ‖x − y_j‖`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointCloudGuide {
    points: Vec<Vec2>,
    lambda: f64,
}

impl PointCloudGuide {
    pub fn new(points: Vec<Vec2>, lambda: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("point-cloud guide needs at least one reference point"));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(PointCloudGuide { points, lambda })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    fn scale(&self) -> f64 {
        1.0 / (self.lambda * self.points.len() as f64)
    }

    /// Reads a reference cloud from two-column CSV (`x,y`); a non-numeric
    /// first line is treated as a header.
    pub fn read_cloud_csv<R: BufRead>(reader: R) -> Result<Vec<Vec2>> {
        let mut pts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let parsed = match (cols.next(), cols.next()) {
                (Some(a), Some(b)) => a.parse::<f64>().and_then(|x| b.parse::<f64>().map(|y| (x, y))),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "expected two columns".into(),
                    })
                }
            };
            match parsed {
                Ok((x, y)) => pts.push(Vec2::new(x, y)),
                Err(_) if i == 0 => continue,
                Err(e) => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: e.to_string(),
                    })
                }
            }
        }
        Ok(pts)
    }

    pub fn write_cloud_csv<W: Write>(points: &[Vec2], mut w: W) -> Result<()> {
        writeln!(w, "x,y")?;
        for p in points {
            writeln!(w, "{},{}", p.x, p.y)?;
        }
        Ok(())
    }
}

impl Guide for PointCloudGuide {
    fn value(&self, x: Vec2) -> f64 {
        self.points.iter().map(|&y| (x - y).norm()).sum::<f64>() * self.scale()
    }

    fn grad(&self, x: Vec2) -> Vec2 {
        let mut acc = Vec2::ZERO;
        for &y in &self.points {
            let d = x - y;
            let n = d.norm();
            // zero-distance terms contribute the zero subgradient
            if n > 0.0 {
                acc += d / n;
            }
        }
        acc * self.scale()
    }
}

/// Parameters of the reference two-moons cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsParams {
    pub n_points: usize,
    pub jitter: f64,
    pub scale: f64,
}

impl Default for TwoMoonsParams {
    fn default() -> Self {
        TwoMoonsParams {
            n_points: 2000,
            jitter: 0.05,
            scale: 2.0,
        }
    }
}

/// Interleaved half circles (outer `(cos θ, sin θ)`, inner
/// `(1 − cos θ, 0.5 − sin θ)`, θ evenly spaced on `[0, π]`) with Gaussian
/// jitter, centered at the origin and scaled.
pub fn two_moons_cloud(params: TwoMoonsParams, lineage: RngLineage) -> Vec<Vec2> {
    let n_out = params.n_points / 2;
    let n_in = params.n_points - n_out;
    let arc = |k: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            std::f64::consts::PI * k as f64 / (n - 1) as f64
        }
    };
    let center = Vec2::new(0.5, 0.25);
    let raw = (0..n_out)
        .map(|k| {
            let th = arc(k, n_out);
            Vec2::new(th.cos(), th.sin())
        })
        .chain((0..n_in).map(|k| {
            let th = arc(k, n_in);
            Vec2::new(1.0 - th.cos(), 0.5 - th.sin())
        }));
    raw.enumerate()
        .map(|(i, p)| {
            let mut s = lineage.stream_for(i as u64, 0, Substream::Data);
            (p + s.normal2() * params.jitter - center) * params.scale
        })
        .collect()
}

/// `f(x) = λ Σ_{j∈P} exp(−‖x − c_j‖² / (2 ℓ²))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModePenaltyGuide {
    centers: Vec<Vec2>,
    lambda: f64,
    length_scale: f64,
}

impl ModePenaltyGuide {
    pub fn new(centers: Vec<Vec2>, lambda: f64, length_scale: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::config(format!("length scale must be positive, got {length_scale}")));
        }
        Ok(ModePenaltyGuide {
            centers,
            lambda,
            length_scale,
        })
    }

    /// Penalizes the centers with negative first coordinate.
    pub fn left_half(centers: &[Vec2], lambda: f64, length_scale: f64) -> Self {
        let left = centers.iter().copied().filter(|c| c.x < 0.0).collect();
        ModePenaltyGuide::new(left, lambda, length_scale).expect("positive parameters")
    }

    pub fn centers(&self) -> &[Vec2] {
        &self.centers
    }

    #[inline]
    fn bump(&self, d: Vec2) -> f64 {
        (-0.5 * d.norm_sq() / (self.length_scale * self.length_scale)).exp()
    }
}

impl Guide for ModePenaltyGuide {
    fn value(&self, x: Vec2) -> f64 {
        self.lambda * self.centers.iter().map(|&c| self.bump(x - c)).sum::<f64>()
    }

    fn grad(&self, x: Vec2) -> Vec2 {
        let mut acc = Vec2::ZERO;
        for &c in &self.centers {
            let d = x - c;
            acc += d * self.bump(d);
        }
        acc * (-self.lambda / (self.length_scale * self.length_scale))
    }
}

/// `f(x) = (w/2) ‖x − center‖²`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadraticGuide {
    pub center: Vec2,
    pub weight: f64,
}

impl QuadraticGuide {
    pub fn new(center: Vec2, weight: f64) -> Self {
        QuadraticGuide { center, weight }
    }
}

impl Guide for QuadraticGuide {
    fn value(&self, x: Vec2) -> f64 {
        0.5 * self.weight * (x - self.center).norm_sq()
    }

    fn grad(&self, x: Vec2) -> Vec2 {
        (x - self.center) * self.weight
    }
}

/// Nodes of a cache grid: `nx × ny` points spanning the closed rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl NodeGrid {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::config(format!("cache grid needs >= 2 nodes per axis, got {nx}x{ny}")));
        }
        if !(x_range.1 > x_range.0 && y_range.1 > y_range.0) {
            return Err(Error::config("cache grid ranges must be increasing"));
        }
        Ok(NodeGrid {
            x_min: x_range.0,
            x_max: x_range.1,
            y_min: y_range.0,
            y_max: y_range.1,
            nx,
            ny,
        })
    }

    pub fn square(half: f64, n: usize) -> Result<Self> {
        NodeGrid::new((-half, half), (-half, half), n, n)
    }

    pub fn hx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn hy(&self) -> f64 {
        (self.y_max - self.y_min) / (self.ny - 1) as f64
    }

    pub fn node(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(
            self.x_min + ix as f64 * self.hx(),
            self.y_min + iy as f64 * self.hy(),
        )
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.hx().hypot(self.hy())
    }
}

/// Guide values and gradients tabulated on nodes, bilinearly interpolated.
///
/// Queries outside the rectangle are clamped onto its boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BilinearGuideCache {
    grid: NodeGrid,
    f_values: Vec<f64>,
    grad_values: Vec<Vec2>,
}

impl BilinearGuideCache {
    pub fn build(guide: &dyn Guide, grid: NodeGrid) -> Result<Self> {
        if grid.nx < 2 || grid.ny < 2 {
            return Err(Error::config("cache grid needs >= 2 nodes per axis"));
        }
        let nodes: Vec<(f64, Vec2)> = (0..grid.nx * grid.ny)
            .into_par_iter()
            .map(|k| {
                let p = grid.node(k % grid.nx, k / grid.nx);
                (guide.value(p), guide.grad(p))
            })
            .collect();
        let (f_values, grad_values) = nodes.into_iter().unzip();
        Ok(BilinearGuideCache {
            grid,
            f_values,
            grad_values,
        })
    }

    pub fn grid(&self) -> NodeGrid {
        self.grid
    }

    /// Cell index and local coordinates of a (clamped) query.
    #[inline]
    fn locate(&self, x: Vec2) -> (usize, f64, f64) {
        let g = &self.grid;
        let fx = ((x.x.clamp(g.x_min, g.x_max) - g.x_min) / g.hx()).max(0.0);
        let fy = ((x.y.clamp(g.y_min, g.y_max) - g.y_min) / g.hy()).max(0.0);
        let ix = (fx.floor() as usize).min(g.nx - 2);
        let iy = (fy.floor() as usize).min(g.ny - 2);
        (iy * g.nx + ix, fx - ix as f64, fy - iy as f64)
    }

    #[inline]
    fn blend<T>(&self, data: &[T], k: usize, u: f64, v: f64) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let nx = self.grid.nx;
        data[k] * ((1.0 - u) * (1.0 - v))
            + data[k + 1] * (u * (1.0 - v))
            + data[k + nx] * ((1.0 - u) * v)
            + data[k + nx + 1] * (u * v)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,f,grad_x,grad_y")?;
        for iy in 0..self.grid.ny {
            for ix in 0..self.grid.nx {
                let k = iy * self.grid.nx + ix;
                let p = self.grid.node(ix, iy);
                let g = self.grad_values[k];
                writeln!(w, "{},{},{:e},{:e},{:e}", p.x, p.y, self.f_values[k], g.x, g.y)?;
            }
        }
        Ok(())
    }
}

impl Guide for BilinearGuideCache {
    #[inline]
    fn value(&self, x: Vec2) -> f64 {
        let (k, u, v) = self.locate(x);
        self.blend(&self.f_values, k, u, v)
    }

    #[inline]
    fn grad(&self, x: Vec2) -> Vec2 {
        let (k, u, v) = self.locate(x);
        self.blend(&self.grad_values, k, u, v)
    }
}

/// Settings of the zeroth-order gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoEstimatorConfig {
    pub batch_size: usize,
    pub sigma_bar: f64,
    pub normalize: bool,
}

impl ZoEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("zo batch size must be >= 1"));
        }
        if self.normalize && self.batch_size < 2 {
            return Err(Error::config("group normalization needs batch size >= 2"));
        }
        if !(self.sigma_bar >= 0.0 && self.sigma_bar.is_finite()) {
            return Err(Error::config(format!("smoothing sigma must be >= 0, got {}", self.sigma_bar)));
        }
        Ok(())
    }
}

/// Floor on the batch std used by group normalization.
pub const ZO_STD_FLOOR: f64 = 1e-12;

/// `(1 / (N σ̄)) Σ_i f(x + σ̄ ε_i) ε_i` with ε_i drawn from `stream`.
///
/// With `normalize`, each reward is replaced by `(f_i − μ̂) / max(σ̂, 1e−12)`
/// using the batch mean and (population) standard deviation.
pub fn zo_gradient(
    f: &(dyn Fn(Vec2) -> f64 + Sync),
    x: Vec2,
    cfg: &ZoEstimatorConfig,
    stream: &mut PhiloxStream,
) -> Result<Vec2> {
    cfg.validate()?;
    if !(cfg.sigma_bar > 0.0) {
        return Err(Error::config("zo gradient needs sigma_bar > 0"));
    }
    let n = cfg.batch_size;
    let mut eps = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for i in 0..n {
        let e = stream.normal2();
        let r = f(x + e * cfg.sigma_bar);
        if !r.is_finite() {
            return Err(Error::NonFiniteReward { probe: i, value: r });
        }
        eps.push(e);
        rewards.push(r);
    }
    if cfg.normalize {
        let mean = rewards.iter().sum::<f64>() / n as f64;
        let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(ZO_STD_FLOOR);
        rewards.iter_mut().for_each(|r| *r = (*r - mean) / sd);
    }
    let acc = eps
        .iter()
        .zip(&rewards)
        .fold(Vec2::ZERO, |acc, (&e, &r)| acc + e * r);
    Ok(acc / (n as f64 * cfg.sigma_bar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(g: &dyn Guide, x: Vec2, h: f64) -> Vec2 {
        let ex = Vec2::new(h, 0.0);
        let ey = Vec2::new(0.0, h);
        Vec2::new(
            (g.value(x + ex) - g.value(x - ex)) / (2.0 * h),
            (g.value(x + ey) - g.value(x - ey)) / (2.0 * h),
        )
    }

    #[test]
    fn point_cloud_single_reference() {
        let g = PointCloudGuide::new(vec![Vec2::ZERO], 1.0).unwrap();
        assert!((g.value(Vec2::new(3.0, 4.0)) - 5.0).abs() < 1e-15);
        let d = g.grad(Vec2::new(3.0, 4.0));
        assert!((d.x - 0.6).abs() < 1e-15 && (d.y - 0.8).abs() < 1e-15);
        assert_eq!(g.grad(Vec2::ZERO), Vec2::ZERO);
        assert!(PointCloudGuide::new(vec![], 1.0).is_err());
        assert!(PointCloudGuide::new(vec![Vec2::ZERO], 0.0).is_err());
    }

    #[test]
    fn mode_penalty_values() {
        let c = Vec2::new(1.0, -2.0);
        let g = ModePenaltyGuide::new(vec![c], 1.0, 0.7).unwrap();
        assert!((g.value(c) - 1.0).abs() < 1e-15);
        assert_eq!(g.grad(c), Vec2::ZERO);
        let lam = 2.5;
        let g = ModePenaltyGuide::new(vec![c], lam, 0.7).unwrap();
        let x = c + Vec2::new(0.0, 0.7);
        assert!((g.value(x) - lam * (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lin = RngLineage::new(11);
        let cloud = PointCloudGuide::new(two_moons_cloud(TwoMoonsParams { n_points: 200, ..Default::default() }, lin), 1.0).unwrap();
        let centers = crate::targets::eight_ring_centers(4.0);
        let penalty = ModePenaltyGuide::left_half(&centers, 1.0, 1.0);
        let quad = QuadraticGuide::new(Vec2::new(0.5, -1.0), 3.0);
        let guides: [&dyn Guide; 3] = [&cloud, &penalty, &quad];
        for (gi, g) in guides.iter().enumerate() {
            for i in 0..100u64 {
                let mut s = lin.with_stream(99).stream_for(i, gi as u64, Substream::Diagnostic);
                let x = Vec2::new(-6.0 + 12.0 * s.uniform(), -6.0 + 12.0 * s.uniform());
                let exact = g.grad(x);
                let fd = fd_grad(*g, x, 1e-6);
                let rel = (exact - fd).norm() / exact.norm().max(1e-3);
                assert!(rel <= 1e-4, "guide {gi} at {x:?}: {exact:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn cache_is_exact_at_nodes_and_for_bilinear_functions() {
        struct Bilinear;
        impl Guide for Bilinear {
            fn value(&self, x: Vec2) -> f64 {
                1.5 * x.x - 0.25 * x.y + 0.1 * x.x * x.y + 2.0
            }
            fn grad(&self, x: Vec2) -> Vec2 {
                Vec2::new(1.5 + 0.1 * x.y, -0.25 + 0.1 * x.x)
            }
        }
        let grid = NodeGrid::square(3.0, 7).unwrap();
        let cache = BilinearGuideCache::build(&Bilinear, grid).unwrap();
        for iy in 0..7 {
            for ix in 0..7 {
                let p = grid.node(ix, iy);
                assert!((cache.value(p) - Bilinear.value(p)).abs() < 1e-13);
            }
        }
        let lin = RngLineage::new(5);
        for i in 0..500 {
            let mut s = lin.stream_for(i, 0, Substream::Diagnostic);
            let x = Vec2::new(-3.0 + 6.0 * s.uniform(), -3.0 + 6.0 * s.uniform());
            assert!((cache.value(x) - Bilinear.value(x)).abs() < 1e-12);
            // the gradient field is itself bilinear
            assert!((cache.grad(x) - Bilinear.grad(x)).norm() < 1e-12);
        }
        // outside: clamped onto the boundary
        let far = cache.value(Vec2::new(10.0, 0.0));
        assert!((far - Bilinear.value(Vec2::new(3.0, 0.0))).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cache_grid_rejected() {
        assert!(NodeGrid::square(1.0, 1).is_err());
        assert!(NodeGrid::new((0.0, 1.0), (0.0, 1.0), 5, 1).is_err());
    }

    #[test]
    fn cache_error_halves_with_cell_size() {
        let centers = crate::targets::eight_ring_centers(4.0);
        let g = ModePenaltyGuide::left_half(&centers, 1.0, 1.0);
        let err = |n: usize| {
            let cache = BilinearGuideCache::build(&g, NodeGrid::square(8.0, n).unwrap()).unwrap();
            let lin = RngLineage::new(8);
            (0..2000)
                .map(|i| {
                    let mut s = lin.stream_for(i, 0, Substream::Diagnostic);
                    let x = Vec2::new(-7.9 + 15.8 * s.uniform(), -7.9 + 15.8 * s.uniform());
                    (cache.value(x) - g.value(x)).abs()
                })
                .fold(0.0, f64::max)
        };
        let coarse = err(33);
        let fine = err(65);
        assert!(fine <= 0.5 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn cloud_csv_round_trip() {
        let pts = vec![Vec2::new(1.0, -2.5), Vec2::new(0.125, 3.0)];
        let mut buf = Vec::new();
        PointCloudGuide::write_cloud_csv(&pts, &mut buf).unwrap();
        let back = PointCloudGuide::read_cloud_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, pts);
        let bad = PointCloudGuide::read_cloud_csv(std::io::Cursor::new("x,y\n1,2\n3\n"));
        assert!(bad.is_err());
    }

    #[test]
    fn two_moons_extent() {
        let pts = two_moons_cloud(TwoMoonsParams::default(), RngLineage::new(0));
        assert_eq!(pts.len(), 2000);
        let mean = pts.iter().fold(Vec2::ZERO, |a, &p| a + p) / pts.len() as f64;
        assert!(mean.norm() < 0.5);
        assert!(pts.iter().all(|p| p.x.abs() < 3.5 && p.y.abs() < 2.0));
    }

    #[test]
    fn zo_constant_reward_normalized_is_zero() {
        let cfg = ZoEstimatorConfig {
            batch_size: 32,
            sigma_bar: 0.3,
            normalize: true,
        };
        let mut s = RngLineage::new(1).stream_for(0, 0, Substream::ZoProbe);
        let g = zo_gradient(&|_| 1.0, Vec2::new(1.0, 1.0), &cfg, &mut s).unwrap();
        assert_eq!(g, Vec2::ZERO);
    }

    #[test]
    fn zo_rejects_bad_config_and_rewards() {
        let mut s = RngLineage::new(1).stream_for(0, 0, Substream::ZoProbe);
        let cfg = ZoEstimatorConfig {
            batch_size: 1,
            sigma_bar: 0.3,
            normalize: true,
        };
        assert!(zo_gradient(&|_| 1.0, Vec2::ZERO, &cfg, &mut s).is_err());
        let cfg = ZoEstimatorConfig { batch_size: 4, normalize: false, ..cfg };
        let err = zo_gradient(&|x| if x.x > 0.0 { f64::INFINITY } else { 0.0 }, Vec2::ZERO, &cfg, &mut s);
        assert!(matches!(err, Err(Error::NonFiniteReward { .. })));
        let cfg = ZoEstimatorConfig { sigma_bar: 0.0, ..cfg };
        assert!(zo_gradient(&|_| 1.0, Vec2::ZERO, &cfg, &mut s).is_err());
    }
}
