//! Running experiments and sweeps, and writing their CSV/JSON outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guides::ZoEstimatorConfig;
use crate::metrics::{kl_grid, mean_penalty};
use crate::point::Vec2;
use crate::rng::{derive_run_seed, RngLineage};
use crate::samplers::{
    doit_step_count, run_doit, run_sald, run_va_sald_flow, run_va_sald_vp, DoitConfig,
    ParticleEnsemble, SamplerConfig, Snapshot,
};

use super::config::{ExperimentSpec, Method, SweepSpec};
use super::tasks::{Family, TaskSetup};

/// Stream of the initial ensemble, distinct from the sampler noise stream.
const INIT_STREAM: u64 = 2;

/// One metric evaluation along a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub method: String,
    pub r: f64,
    pub k: u64,
    pub s: f64,
    pub t: f64,
    pub kl: f64,
    pub mean_penalty: f64,
    pub wall_ms: u64,
}

pub const ROW_HEADER: &str = "task,method,r,k,s,t,kl,mean_penalty,wall_ms";

impl ResultRow {
    /// Floats use Rust's shortest round-trip formatting.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.task, self.method, self.r, self.k, self.s, self.t, self.kl, self.mean_penalty, self.wall_ms
        )
    }
}

/// Step and particle accounting of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub steps: u64,
    pub particles: usize,
    pub proposals: usize,
}

impl Budget {
    pub fn effective_particles(&self) -> usize {
        self.particles * self.proposals
    }

    /// `steps × particles × proposals`.
    pub fn particle_steps(&self) -> u128 {
        u128::from(self.steps) * self.effective_particles() as u128
    }
}

/// Resolved step count and particle counts of `spec` without running it.
pub fn plan_budget(spec: &ExperimentSpec) -> Result<Budget> {
    spec.validate()?;
    let particles = spec.method_particles();
    let budget = match spec.method {
        Method::Doit => Budget {
            steps: doit_step_count(spec.budget_r, spec.horizon, spec.eta())?.0,
            particles,
            proposals: spec.doit_proposals,
        },
        Method::VaSaldFlow => Budget {
            steps: sampler_config(spec).step_count(1.0),
            particles,
            proposals: 1,
        },
        Method::Sald | Method::VaSald => Budget {
            steps: sampler_config(spec).step_count(spec.horizon),
            particles,
            proposals: 1,
        },
    };
    if budget.steps == 0 {
        return Err(Error::config(format!("eta: {} gives zero steps at r={}", spec.eta(), spec.budget_r)));
    }
    Ok(budget)
}

/// Terminal statistics and resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub method: String,
    pub r: f64,
    pub seed: u64,
    pub steps: u64,
    pub particles: usize,
    pub effective_particles: usize,
    pub terminal_kl: f64,
    pub terminal_mean_penalty: f64,
    pub terminal_mean: [f64; 2],
    pub terminal_variance: [f64; 2],
    /// Zero unless `record_timing` is set.
    pub wall_ms: u64,
    pub config: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: RunSummary,
    pub ensemble: ParticleEnsemble,
}

fn sampler_config(spec: &ExperimentSpec) -> SamplerConfig {
    SamplerConfig {
        eta: spec.eta(),
        budget_r: spec.budget_r,
        n_particles: spec.method_particles(),
        guidance_scale: spec.guidance_scale,
        seed: spec.seed,
        metric_every: spec.metric_every,
        zero_noise: false,
    }
}

/// Builds the task and runs `spec`, writing outputs if `spec.output` is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    spec.validate()?;
    let setup = TaskSetup::build(spec).map_err(|e| e.with_context(format!("building task {}", spec.task)))?;
    let outcome = run_experiment_with(spec, &setup)?;
    if let Some(path) = &spec.output {
        write_outputs(path, &outcome)?;
    }
    Ok(outcome)
}

/// Runs `spec` on a prebuilt task. Does not write files.
pub fn run_experiment_with(spec: &ExperimentSpec, setup: &TaskSetup) -> Result<RunOutcome> {
    spec.validate()?;
    if !setup.matches(spec) {
        return Err(Error::config(format!("task setup does not match spec for task {}", spec.task)));
    }
    let label = format!("{} {} r={} seed={}", spec.task, spec.method, spec.budget_r, spec.seed);
    run_inner(spec, setup).map_err(|e| e.with_context(label))
}

fn run_inner(spec: &ExperimentSpec, setup: &TaskSetup) -> Result<RunOutcome> {
    let cfg = sampler_config(spec);
    let budget = plan_budget(spec)?;
    let init_lineage = RngLineage::new(spec.seed).with_stream(INIT_STREAM);
    let mut init = ParticleEnsemble::standard_normal(budget.particles, init_lineage)?;
    if let Family::Flow(f) = &setup.family {
        init.positions.iter_mut().for_each(|p| *p = *p * f.source_std);
    }
    let guide = setup.guide();
    let start = Instant::now();
    let elapsed = |timing: bool| if timing { start.elapsed().as_millis() as u64 } else { 0 };
    let mut rows = Vec::new();
    let mut trajectory = match &spec.trajectory_output {
        Some(p) => {
            let mut w = BufWriter::new(create(p)?);
            writeln!(w, "k,particle,x,y")?;
            Some(w)
        }
        None => None,
    };
    let mut observer = |snap: &Snapshot<'_>| -> Result<()> {
        let kl = kl_grid(snap.positions, &setup.target, spec.kl_eps)?;
        rows.push(ResultRow {
            task: spec.task.to_string(),
            method: spec.method.to_string(),
            r: spec.budget_r,
            k: snap.k,
            s: snap.s,
            t: snap.t,
            kl: kl.value,
            mean_penalty: mean_penalty(snap.positions, guide)?,
            wall_ms: elapsed(spec.record_timing),
        });
        if let Some(w) = trajectory.as_mut() {
            for (i, p) in snap.positions.iter().enumerate() {
                writeln!(w, "{},{},{},{}", snap.k, i, p.x, p.y)?;
            }
        }
        Ok(())
    };
    let ensemble = match (&setup.family, spec.method) {
        (Family::Vp(f), Method::Sald) => run_sald(f, guide, &cfg, init, &mut observer)?,
        (Family::Vp(f), Method::VaSald) => run_va_sald_vp(f, guide, &cfg, init, &mut observer)?,
        (Family::Vp(f), Method::Doit) => {
            let doit = DoitConfig {
                n_proposals: spec.doit_proposals,
                reward_temperature: spec.doit_temperature,
                guidance_strength: spec.doit_strength,
                budget_label: spec.budget_r,
            };
            run_doit(f, guide, &doit, &cfg, init, &mut observer)?
        }
        (Family::Flow(f), Method::VaSaldFlow) => {
            let zo = ZoEstimatorConfig {
                batch_size: spec.zo_batch,
                sigma_bar: 0.0,
                normalize: spec.zo_normalize,
            };
            let potential = guide.map(|g| move |x: Vec2| g.value(x));
            let potential_ref = potential.as_ref().map(|p| p as &(dyn Fn(Vec2) -> f64 + Sync));
            run_va_sald_flow(f, potential_ref, &cfg, &zo, spec.flow_sigma0, init, &mut observer)?
        }
        (_, m) => return Err(Error::config(format!("method {m} cannot run task {}", spec.task))),
    };
    if let Some(mut w) = trajectory {
        w.flush()?;
    }
    if ensemble.step_index != budget.steps {
        return Err(Error::BudgetParity {
            r: spec.budget_r,
            detail: format!("planned {} steps, executed {}", budget.steps, ensemble.step_index),
        });
    }
    let last = rows.last().ok_or(Error::EmptyEnsemble)?;
    let mean = ensemble.mean();
    let var = ensemble.coordinate_variance();
    let summary = RunSummary {
        task: spec.task.to_string(),
        method: spec.method.to_string(),
        r: spec.budget_r,
        seed: spec.seed,
        steps: budget.steps,
        particles: budget.particles,
        effective_particles: budget.effective_particles(),
        terminal_kl: last.kl,
        terminal_mean_penalty: last.mean_penalty,
        terminal_mean: [mean.x, mean.y],
        terminal_variance: [var.x, var.y],
        wall_ms: elapsed(spec.record_timing),
        config: spec.resolved(),
    };
    Ok(RunOutcome { rows, summary, ensemble })
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).map_err(|e| Error::from(e).with_context(format!("creating {}", path.display())))
}

pub fn write_rows<W: Write>(rows: &[ResultRow], mut w: W) -> Result<()> {
    writeln!(w, "{ROW_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.csv_line())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `path` (rows as CSV) and `path` with extension `.json` (summary).
pub fn write_outputs(path: &Path, outcome: &RunOutcome) -> Result<()> {
    write_rows(&outcome.rows, BufWriter::new(create(path)?))?;
    let json_path = path.with_extension("json");
    let mut w = BufWriter::new(create(&json_path)?);
    serde_json::to_writer_pretty(&mut w, &outcome.summary)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// One `(method, r)` entry of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: String,
    pub method: String,
    pub r: f64,
    pub seed: u64,
    pub steps: u64,
    pub particles: usize,
    pub effective_particles: usize,
    pub terminal_kl: Option<f64>,
    pub terminal_mean_penalty: Option<f64>,
    pub error: Option<String>,
}

pub const SWEEP_HEADER: &str =
    "task,method,r,seed,steps,particles,effective_particles,terminal_kl,terminal_mean_penalty,status";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let status = match &self.error {
            None => "ok".to_string(),
            Some(e) => format!("\"error: {}\"", e.replace('"', "'")),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.method,
            self.r,
            self.seed,
            self.steps,
            self.particles,
            self.effective_particles,
            opt(self.terminal_kl),
            opt(self.terminal_mean_penalty),
            status
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Full results of the runs that succeeded, in table order.
    pub runs: Vec<RunOutcome>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn terminal_kl(&self, method: Method, r: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|row| row.method == method.name() && row.r == r)
            .and_then(|row| row.terminal_kl)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SWEEP_HEADER}")?;
        for row in &self.rows {
            writeln!(w, "{}", row.csv_line())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Spec of one sweep entry: the base spec with `method`, `r` and the
/// derived seed `hash(base_seed, r)`.
pub fn sweep_entry(sweep: &SweepSpec, method: Method, r: f64) -> ExperimentSpec {
    ExperimentSpec {
        method,
        budget_r: r,
        seed: derive_run_seed(sweep.base.seed, r),
        output: None,
        trajectory_output: None,
        ..sweep.base.clone()
    }
}

/// Errors unless every method at every `r` spends the same
/// `steps × particles × proposals`.
pub fn check_budget_parity(sweep: &SweepSpec) -> Result<()> {
    for &r in &sweep.r_values {
        let budgets = sweep
            .methods
            .iter()
            .map(|&m| plan_budget(&sweep_entry(sweep, m, r)).map(|b| (m, b)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(((m0, b0), (m1, b1))) = budgets
            .iter()
            .zip(budgets.iter().skip(1))
            .find(|((_, a), (_, b))| a.particle_steps() != b.particle_steps())
        {
            return Err(Error::BudgetParity {
                r,
                detail: format!(
                    "{m0}: {} steps x {} particles x {} proposals, {m1}: {} x {} x {}",
                    b0.steps, b0.particles, b0.proposals, b1.steps, b1.particles, b1.proposals
                ),
            });
        }
    }
    Ok(())
}

/// Runs every `(method, r)` of the sweep. Parity is checked first and is a
/// hard error; individual run failures are recorded in their row.
///
/// With `output_dir`, each run's CSV/JSON is written as
/// `<task>_<method>_r<r>.csv` and the table as `sweep.csv`.
pub fn run_sweep(sweep: &SweepSpec, output_dir: Option<&Path>) -> Result<SweepOutcome> {
    sweep.validate()?;
    check_budget_parity(sweep)?;
    let setup = TaskSetup::build(&sweep.base)
        .map_err(|e| e.with_context(format!("building task {}", sweep.base.task)))?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &method in &sweep.methods {
        for &r in &sweep.r_values {
            let spec = sweep_entry(sweep, method, r);
            let budget = plan_budget(&spec)?;
            let mut row = SweepRow {
                task: spec.task.to_string(),
                method: method.to_string(),
                r,
                seed: spec.seed,
                steps: budget.steps,
                particles: budget.particles,
                effective_particles: budget.effective_particles(),
                terminal_kl: None,
                terminal_mean_penalty: None,
                error: None,
            };
            match run_experiment_with(&spec, &setup) {
                Ok(outcome) => {
                    row.terminal_kl = Some(outcome.summary.terminal_kl);
                    row.terminal_mean_penalty = Some(outcome.summary.terminal_mean_penalty);
                    if let Some(dir) = output_dir {
                        write_outputs(&run_path(dir, &spec), &outcome)?;
                    }
                    runs.push(outcome);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    let outcome = SweepOutcome { rows, runs };
    if let Some(dir) = output_dir {
        outcome.write_csv(BufWriter::new(create(&dir.join("sweep.csv"))?))?;
    }
    Ok(outcome)
}

fn run_path(dir: &Path, spec: &ExperimentSpec) -> PathBuf {
    dir.join(format!("{}_{}_r{}.csv", spec.task, spec.method, spec.budget_r))
}
