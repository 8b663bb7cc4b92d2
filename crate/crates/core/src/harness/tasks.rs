//! Benchmark task construction: data family, guide and terminal target.

use crate::error::Result;
use crate::guides::{
    two_moons_cloud, BilinearGuideCache, Guide, ModePenaltyGuide, NodeGrid, PointCloudGuide,
    QuadraticGuide, TwoMoonsParams,
};
use crate::point::Vec2;
use crate::rng::RngLineage;
use crate::schedules::BetaSchedule;
use crate::targets::{
    eight_ring_centers, FlowMarginalFamily, GaussianMixture, GridDensity, GridSpec,
    VpMarginalFamily,
};

use super::config::{ExperimentSpec, Task};

/// Data law of the flow toy task.
pub const FLOW_TOY_MEAN: Vec2 = Vec2 { x: 1.5, y: -1.0 };
pub const FLOW_TOY_VAR: f64 = 0.25;
/// Mean of the unguided sanity data.
pub const SANITY_MEAN: Vec2 = Vec2 { x: 2.0, y: 0.0 };
/// Lineage of the reference two-moons cloud; fixed so every run of the
/// task sees the same guide whatever its seed.
const CLOUD_LINEAGE: RngLineage = RngLineage { seed: 0x4D4F_4F4E, stream: 0 };

#[derive(Debug, Clone)]
pub enum Family {
    Vp(VpMarginalFamily),
    Flow(FlowMarginalFamily),
}

/// Everything a run needs besides the sampler settings. Building the
/// two-moons cache is the expensive part, so sweeps build this once.
pub struct TaskSetup {
    pub task: Task,
    pub family: Family,
    /// The guide the samplers see (the bilinear cache for two-moons).
    pub guide: Option<Box<dyn Guide>>,
    pub grid: GridSpec,
    /// Guided terminal target `∝ p_T e^{−c f}` on `grid`.
    pub target: GridDensity,
    pub guidance_scale: f64,
}

impl TaskSetup {
    pub fn build(spec: &ExperimentSpec) -> Result<Self> {
        let grid = GridSpec::square(spec.grid_half_width, spec.grid_cells);
        let schedule = BetaSchedule::new(spec.beta_min, spec.beta_max, spec.horizon)?;
        let (family, guide): (Family, Option<Box<dyn Guide>>) = match spec.task {
            Task::TwoMoons => {
                let cloud = two_moons_cloud(
                    TwoMoonsParams {
                        n_points: spec.moons_points,
                        jitter: spec.moons_jitter,
                        scale: spec.moons_scale,
                    },
                    CLOUD_LINEAGE,
                );
                let exact = PointCloudGuide::new(cloud, spec.moons_lambda)?;
                let nodes = NodeGrid::square(spec.grid_half_width, spec.cache_nodes)?;
                let cache = BilinearGuideCache::build(&exact, nodes)?;
                let data = GaussianMixture::two_gaussian(spec.two_gaussian_offset);
                (Family::Vp(VpMarginalFamily::new(data, schedule)), Some(Box::new(cache)))
            }
            Task::EightGaussian => {
                let data = GaussianMixture::eight_gaussian(spec.ring_radius);
                let centers = eight_ring_centers(spec.ring_radius);
                let guide = ModePenaltyGuide::left_half(&centers, spec.penalty_lambda, spec.penalty_length);
                (Family::Vp(VpMarginalFamily::new(data, schedule)), Some(Box::new(guide)))
            }
            Task::UnguidedSanity => {
                let data = GaussianMixture::single(SANITY_MEAN, 1.0)?;
                (Family::Vp(VpMarginalFamily::new(data, schedule)), None)
            }
            Task::FlowToy => {
                let data = GaussianMixture::single(FLOW_TOY_MEAN, FLOW_TOY_VAR)?;
                let guide = QuadraticGuide::new(Vec2::ZERO, 1.0);
                (Family::Flow(FlowMarginalFamily::new(data, 1.0)?), Some(Box::new(guide)))
            }
        };
        let c = spec.guidance_scale;
        let target = match &family {
            Family::Vp(f) => f.guided_target_grid(f.horizon(), guide.as_deref(), grid, c)?,
            Family::Flow(f) => f.guided_target_grid(0.0, guide.as_deref(), grid, c)?,
        };
        Ok(TaskSetup {
            task: spec.task,
            family,
            guide,
            grid,
            target,
            guidance_scale: c,
        })
    }

    pub fn guide(&self) -> Option<&dyn Guide> {
        self.guide.as_deref()
    }

    /// Cheap compatibility check before reusing a setup for `spec`; task
    /// parameters beyond these are assumed shared.
    pub fn matches(&self, spec: &ExperimentSpec) -> bool {
        self.task == spec.task
            && self.guidance_scale == spec.guidance_scale
            && self.grid == GridSpec::square(spec.grid_half_width, spec.grid_cells)
    }

    /// The guided target at the start of the path, `t = 0`.
    pub fn initial_target(&self) -> Result<GridDensity> {
        match &self.family {
            Family::Vp(f) => f.guided_target_grid(0.0, self.guide(), self.grid, self.guidance_scale),
            Family::Flow(f) => f.guided_target_grid(1.0, self.guide(), self.grid, self.guidance_scale),
        }
    }

    /// The unguided terminal law `p_T` on the same grid.
    pub fn unguided_target(&self) -> Result<GridDensity> {
        match &self.family {
            Family::Vp(f) => f.guided_target_grid(f.horizon(), None, self.grid, 0.0),
            Family::Flow(f) => f.guided_target_grid(0.0, None, self.grid, 0.0),
        }
    }
}
