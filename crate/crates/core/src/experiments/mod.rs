//! Scenario runners that turn the core claims into reproducible reports:
//! training consistency against the exact optimum, the clip-distinction
//! experiment, the negative-weight instability demo, and the in-batch
//! normalizer quality study.
//!
//! Every scenario is deterministic per seed set: rerunning with the same spec
//! produces byte-identical tables. Cells fan out over a rayon worker pool;
//! results are collected in grid order, so scheduling never affects output.
//! File layout per scenario: `<scenario>/<grid-cell>/<seed>.records` for raw
//! per-run records plus `<scenario>/summary.csv` and `summary.txt`.

pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::losses::{inbatch_partition_for_prompt, var_loss, wsft_loss, ZMode};
use crate::oracle::exact_partition;
use crate::policy::TabularPolicy;
use crate::reward::{synth_rewards, RewardKind, RewardTable};
use crate::space::{make_space, sample_batch, uniform_response_matrix, Batch, RefKind, TaskSpace};
use crate::trainer::{
    train, BatchMode, LossSpec, Optimizer, OptimizerKind, ResponseSampling, TrainConfig,
    TrainData,
};
use crate::losses::RlolParams;
use crate::{Error, Result, RngSeed};

/// Instance family a scenario runs over; concrete instances are derived from
/// per-cell seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub ref_kind: RefKind,
    pub reward: RewardKind,
    pub lambda: f64,
}

impl InstanceSpec {
    /// The desk-scale default: 3 prompts, 8 responses, Dirichlet reference,
    /// unit-variance Gaussian rewards, lambda 1.
    pub fn desk_default() -> InstanceSpec {
        InstanceSpec {
            n_prompts: 3,
            n_responses: 8,
            ref_kind: RefKind::RandomDirichlet,
            reward: RewardKind::IidGaussian { sigma: 1.0 },
            lambda: 1.0,
        }
    }

    pub fn build(&self, seed: RngSeed) -> Result<(TaskSpace, RewardTable)> {
        let space = make_space(
            self.n_prompts,
            self.n_responses,
            self.ref_kind,
            seed.derive("space", &[]),
        )?;
        let rewards = synth_rewards(&space, self.reward, seed.derive("rewards", &[]))?
            .with_temperature(self.lambda)?;
        Ok((space, rewards))
    }
}

/// One grid cell: a label plus per-seed metric vectors (seeds x metrics).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub seeds: Vec<u64>,
    pub values: Vec<Vec<f64>>,
}

impl SweepCell {
    pub fn mean(&self, metric: usize) -> f64 {
        self.values.iter().map(|row| row[metric]).sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self, metric: usize) -> f64 {
        let mean = self.mean(metric);
        let var = self
            .values
            .iter()
            .map(|row| (row[metric] - mean).powi(2))
            .sum::<f64>()
            / self.values.len() as f64;
        var.sqrt()
    }

    /// Root mean square of a metric column (used for ratio deviations).
    pub fn rms(&self, metric: usize) -> f64 {
        let ms = self
            .values
            .iter()
            .map(|row| row[metric] * row[metric])
            .sum::<f64>()
            / self.values.len() as f64;
        ms.sqrt()
    }
}

/// Grid of cells sharing one metric schema; every cell aggregates the same
/// number of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub scenario: String,
    /// Free-form note echoed at the top of reports.
    pub header_note: String,
    pub metrics: Vec<String>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    fn validate(&self) -> Result<()> {
        let seed_count = self.cells.first().map(|c| c.seeds.len()).unwrap_or(0);
        for cell in &self.cells {
            if cell.seeds.len() != seed_count || cell.values.len() != seed_count {
                return Err(Error::InvalidArgument(format!(
                    "cell {} aggregates {} seeds, expected {seed_count}",
                    cell.label,
                    cell.seeds.len()
                )));
            }
            if cell.values.iter().any(|row| row.len() != self.metrics.len()) {
                return Err(Error::InvalidArgument(format!(
                    "cell {} has a row with the wrong metric count",
                    cell.label
                )));
            }
        }
        Ok(())
    }

    pub fn cell(&self, label: &str) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m == name)
    }

    /// Per-seed rows followed by `mean`/`std` aggregate rows per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "cell,seed,{}", self.metrics.join(","));
        for cell in &self.cells {
            for (seed, row) in cell.seeds.iter().zip(&cell.values) {
                let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{},{seed},{}", cell.label, vals.join(","));
            }
        }
        for cell in &self.cells {
            for (agg, f) in [
                ("mean", SweepCell::mean as fn(&SweepCell, usize) -> f64),
                ("std", SweepCell::std as fn(&SweepCell, usize) -> f64),
            ] {
                let vals: Vec<String> = (0..self.metrics.len())
                    .map(|m| format!("{}", f(cell, m)))
                    .collect();
                let _ = writeln!(out, "{},{agg},{}", cell.label, vals.join(","));
            }
        }
        out
    }

    pub fn to_summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# scenario: {}", self.scenario);
        if !self.header_note.is_empty() {
            for line in self.header_note.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        let _ = writeln!(out, "# seeds per cell: {}", self.cells.first().map(|c| c.seeds.len()).unwrap_or(0));
        for cell in &self.cells {
            let _ = writeln!(out, "cell {}", cell.label);
            for (m, name) in self.metrics.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "  {name}: mean {} std {}",
                    fmt_sig(cell.mean(m)),
                    fmt_sig(cell.std(m))
                );
            }
        }
        out
    }
}

fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e-3 && v.abs() < 1e6 {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

/// Consistency scenario: train the variational losses across seeds and report
/// how close the final policies land to the exact optimum.
#[derive(Debug, Clone)]
pub struct ConsistencySpec {
    pub instance: InstanceSpec,
    pub root_seed: RngSeed,
    pub n_seeds: usize,
    /// Batch sizes for the in-batch cells; the exact cell trains on full
    /// enumeration.
    pub batch_sizes: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Batch mode for the in-batch cells. `None` means seeded uniform
    /// sampling at the cell's batch size; fixed-point checks use
    /// `PromptCycle`, where the batch normalizer is exact.
    pub inbatch_mode: Option<BatchMode>,
    /// When set, per-run records are written under
    /// `<out_dir>/consistency/<cell>/<seed>.records`.
    pub out_dir: Option<PathBuf>,
}

impl ConsistencySpec {
    pub fn desk_default(root_seed: RngSeed) -> ConsistencySpec {
        ConsistencySpec {
            instance: InstanceSpec::desk_default(),
            root_seed,
            n_seeds: 20,
            batch_sizes: vec![2, 4, 8, 16],
            steps: 2000,
            lr: 0.05,
            optimizer: OptimizerKind::default_adam(),
            inbatch_mode: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ConsistencyCell {
    Exact,
    InBatch { batch_size: usize },
}

impl ConsistencyCell {
    fn label(&self) -> String {
        match self {
            ConsistencyCell::Exact => "var-exact".to_string(),
            ConsistencyCell::InBatch { batch_size } => format!("var-inbatch-b{batch_size}"),
        }
    }
}

pub const CONSISTENCY_METRICS: [&str; 3] = ["final_kl_opt_policy", "max_kl_over_evals", "final_objective_gap"];

pub fn run_consistency(spec: &ConsistencySpec) -> Result<SweepResult> {
    if spec.n_seeds == 0 {
        return Err(Error::InvalidArgument("seeds list must be nonempty".into()));
    }
    let mut grid: Vec<ConsistencyCell> = vec![ConsistencyCell::Exact];
    grid.extend(
        spec.batch_sizes
            .iter()
            .map(|&b| ConsistencyCell::InBatch { batch_size: b }),
    );
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| (0..spec.n_seeds as u64).map(move |s| (c, s)))
        .collect();
    // (cell index, seed, metric values, serialized run records)
    type CellOutcome = (usize, u64, Vec<f64>, String);
    let outcomes: Vec<Result<CellOutcome>> = jobs
        .par_iter()
        .map(|&(cell_idx, seed)| {
            let cell = grid[cell_idx];
            let instance_seed = spec.root_seed.derive("instance", &[seed]);
            let (space, rewards) = spec.instance.build(instance_seed)?;
            let mut cfg = TrainConfig::new(
                match cell {
                    ConsistencyCell::Exact => LossSpec::VarExact,
                    ConsistencyCell::InBatch { .. } => LossSpec::VarInBatch,
                },
                spec.root_seed.derive("train", &[seed]),
            );
            cfg.steps = spec.steps;
            cfg.lr = spec.lr;
            cfg.optimizer = spec.optimizer;
            cfg.eval_every = (spec.steps / 20).max(1);
            if let ConsistencyCell::InBatch { batch_size } = cell {
                cfg.batch_size = batch_size;
                cfg.batch_mode = spec.inbatch_mode.unwrap_or(BatchMode::Sampled {
                    sampling: ResponseSampling::Uniform,
                });
            }
            let report = train(&space, &rewards, &cfg, &TrainData::default())?;
            let final_rec = report.final_record();
            let max_kl = report
                .records
                .iter()
                .map(|r| r.kl_opt_policy)
                .fold(f64::NEG_INFINITY, f64::max);
            let gap = report.j_star - final_rec.objective;
            let records_text = report.to_records_text(None);
            Ok((
                cell_idx,
                seed,
                vec![final_rec.kl_opt_policy, max_kl, gap],
                records_text,
            ))
        })
        .collect();

    let mut cells: Vec<SweepCell> = grid
        .iter()
        .map(|c| SweepCell {
            label: c.label(),
            seeds: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    for outcome in outcomes {
        let (cell_idx, seed, values, records_text) = outcome?;
        if let Some(dir) = &spec.out_dir {
            let cell_dir = dir.join("consistency").join(grid[cell_idx].label());
            std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
            let path = cell_dir.join(format!("{seed}.records"));
            std::fs::write(&path, records_text).map_err(|e| Error::io(&path, e))?;
        }
        cells[cell_idx].seeds.push(seed);
        cells[cell_idx].values.push(values);
    }

    let result = SweepResult {
        scenario: "consistency".to_string(),
        header_note: format!(
            "final distance to the exact optimum per mode; instance {}x{}, steps {}, lr {}",
            spec.instance.n_prompts, spec.instance.n_responses, spec.steps, spec.lr
        ),
        metrics: CONSISTENCY_METRICS.iter().map(|s| s.to_string()).collect(),
        cells,
    };
    result.validate()?;
    Ok(result)
}

/// Outcome of one method in the clip-distinction experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: String,
    pub target: (f64, f64),
    pub achieved: (f64, f64),
    pub abs_error: f64,
    pub converged: bool,
}

/// Two-method comparison on a one-prompt, two-response instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipDistinctionReport {
    pub rewards: (f64, f64),
    pub rows: Vec<MethodOutcome>,
    pub tolerance: f64,
    pub pass: bool,
}

impl ClipDistinctionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,target_y0,target_y1,achieved_y0,achieved_y1,abs_error,converged\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method, r.target.0, r.target.1, r.achieved.0, r.achieved.1, r.abs_error,
                r.converged
            );
        }
        out
    }

    pub fn to_summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# scenario: clip-distinction");
        let _ = writeln!(
            out,
            "# rewards ({}, {}): the clipped loss converges to reward shares, the variational loss to exponential-gap shares",
            self.rewards.0, self.rewards.1
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}: achieved ({:.6}, {:.6}) target ({:.6}, {:.6}) abs error {:.2e} converged {}",
                r.method, r.achieved.0, r.achieved.1, r.target.0, r.target.1, r.abs_error,
                r.converged
            );
        }
        let _ = writeln!(out, "pass {} (tolerance {})", self.pass, self.tolerance);
        out
    }
}

/// Clip-distinction on arbitrary two-response rewards. Targets are computed
/// from the rewards: reward shares for the clipped loss, softmax of the
/// reward gap for the variational loss.
pub fn clip_distinction_with_rewards(r0: f64, r1: f64, tolerance: f64) -> Result<ClipDistinctionReport> {
    let space = make_space(1, 2, RefKind::Uniform, RngSeed(0))?;
    let rewards = RewardTable::new(ndarray::array![[r0, r1]], 1.0)?;

    // Clipped loss, trained at the reproduction settings (tiny clip radius
    // and beta approximating their limits).
    let params = RlolParams {
        epsilon: 1e-3,
        beta: 1e-6,
        baseline: crate::losses::RlolBaseline::None,
    };
    let mut rlol_cfg = TrainConfig::new(LossSpec::Rlol(params), RngSeed(0));
    rlol_cfg.optimizer = OptimizerKind::Gd;
    rlol_cfg.lr = 2e-3;
    rlol_cfg.steps = 6000;
    rlol_cfg.eval_every = 1000;
    let rlol_report = train(&space, &rewards, &rlol_cfg, &TrainData::default())?;
    let rlol_dist = rlol_report.final_policy.as_distribution(0);
    let rlol_target = (r0 / (r0 + r1), r1 / (r0 + r1));

    let mut var_cfg = TrainConfig::new(LossSpec::VarExact, RngSeed(0));
    var_cfg.optimizer = OptimizerKind::Gd;
    var_cfg.lr = 1.0;
    var_cfg.steps = 6000;
    var_cfg.eval_every = 1000;
    let var_report = train(&space, &rewards, &var_cfg, &TrainData::default())?;
    let var_dist = var_report.final_policy.as_distribution(0);
    let gap = r0 - r1;
    let var_target = (
        gap.exp() / (gap.exp() + 1.0),
        1.0 / (gap.exp() + 1.0),
    );

    let rows = vec![
        MethodOutcome {
            method: "rlol".to_string(),
            target: rlol_target,
            achieved: (rlol_dist[0], rlol_dist[1]),
            abs_error: (rlol_dist[0] - rlol_target.0)
                .abs()
                .max((rlol_dist[1] - rlol_target.1).abs()),
            converged: rlol_report.final_record().grad_norm < 1e-5,
        },
        MethodOutcome {
            method: "var".to_string(),
            target: var_target,
            achieved: (var_dist[0], var_dist[1]),
            abs_error: (var_dist[0] - var_target.0)
                .abs()
                .max((var_dist[1] - var_target.1).abs()),
            converged: var_report.final_record().grad_norm < 1e-5,
        },
    ];
    let pass = rows.iter().all(|r| r.abs_error <= tolerance && r.converged);
    Ok(ClipDistinctionReport {
        rewards: (r0, r1),
        rows,
        tolerance,
        pass,
    })
}

/// The canonical near-tied instance: rewards (100, 99), targets
/// (0.502513, 0.497487) for the clipped loss and (0.731059, 0.268941) for the
/// variational loss, tolerance 1e-3.
pub fn run_clip_distinction() -> Result<ClipDistinctionReport> {
    clip_distinction_with_rewards(100.0, 99.0, 1e-3)
}

/// One trajectory point of the negative-weight demo.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegWeightPoint {
    pub step: usize,
    pub loss: f64,
    /// `pi_theta(y0|x0)`, the probability being driven to zero.
    pub prob_y0: f64,
}

/// Report of the unboundedness demo: one negative weight sends weighted SFT
/// through every floor while the variational loss on the same instance stays
/// nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct NegWeightReport {
    pub wsft_trajectory: Vec<NegWeightPoint>,
    pub var_trajectory: Vec<(usize, f64)>,
    pub wsft_final_loss: f64,
    pub wsft_final_prob: f64,
    pub var_min_loss: f64,
    pub crossed_1e2_step: Option<usize>,
    pub crossed_1e4_step: Option<usize>,
    pub pass: bool,
}

impl NegWeightReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("series,step,loss,prob_y0\n");
        for p in &self.wsft_trajectory {
            let _ = writeln!(out, "wsft-negative,{},{},{}", p.step, p.loss, p.prob_y0);
        }
        for &(step, loss) in &self.var_trajectory {
            let _ = writeln!(out, "var-inbatch,{step},{loss},");
        }
        out
    }

    pub fn to_summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# scenario: negative-weight-demo");
        let _ = writeln!(
            out,
            "# one weight of -1 makes weighted SFT unbounded below; positive variational weights keep the loss nonnegative"
        );
        let _ = writeln!(out, "wsft final loss {}", self.wsft_final_loss);
        let _ = writeln!(out, "wsft final prob_y0 {:e}", self.wsft_final_prob);
        let _ = writeln!(
            out,
            "loss crossed -1e2 at step {:?}, -1e4 at step {:?}",
            self.crossed_1e2_step, self.crossed_1e4_step
        );
        let _ = writeln!(out, "var min loss {}", self.var_min_loss);
        let _ = writeln!(out, "pass {}", self.pass);
        out
    }
}

/// Run the unboundedness demo on a one-prompt, four-response instance with
/// weights `(+1, +1, +1, -1)`.
pub fn run_negative_weight_demo() -> Result<NegWeightReport> {
    let space = make_space(1, 4, RefKind::Uniform, RngSeed(0))?;
    let rewards = synth_rewards(&space, RewardKind::Constant { value: 0.0 }, RngSeed(0))?;
    let batch = Batch::new(vec![(0, 1), (0, 2), (0, 3), (0, 0)], &space)?;
    let weights = [1.0, 1.0, 1.0, -1.0];

    let steps = 50_000;
    let record_every = 1_000;
    let mut policy = TabularPolicy::init_from_reference(&space);
    let mut optimizer = Optimizer::new(OptimizerKind::default_adam(), policy.logits().dim());
    let mut wsft_trajectory = Vec::new();
    let mut crossed_1e2_step = None;
    let mut crossed_1e4_step = None;
    let mut last = (0.0, 0.0);
    for step in 0..steps {
        let eval = wsft_loss(&policy, &batch, &weights)?;
        if step % record_every == 0 {
            wsft_trajectory.push(NegWeightPoint {
                step,
                loss: eval.value,
                prob_y0: policy.as_distribution(0)[0],
            });
        }
        if eval.value < -1e2 && crossed_1e2_step.is_none() {
            crossed_1e2_step = Some(step);
        }
        if eval.value < -1e4 && crossed_1e4_step.is_none() {
            crossed_1e4_step = Some(step);
        }
        last = (eval.value, policy.as_distribution(0)[0]);
        optimizer.apply(policy.logits_mut(), &eval.grad, 1.0);
    }
    wsft_trajectory.push(NegWeightPoint {
        step: steps,
        loss: last.0,
        prob_y0: last.1,
    });

    // Same instance under the in-batch variational loss: strictly positive
    // weights, loss floored at zero.
    let mut policy = TabularPolicy::init_from_reference(&space);
    let mut optimizer = Optimizer::new(OptimizerKind::default_adam(), policy.logits().dim());
    let mut var_trajectory = Vec::new();
    let mut var_min_loss = f64::INFINITY;
    for step in 0..steps {
        let eval = var_loss(&policy, &space, &rewards, &batch, ZMode::InBatch)?;
        var_min_loss = var_min_loss.min(eval.value);
        if step % record_every == 0 {
            var_trajectory.push((step, eval.value));
        }
        optimizer.apply(policy.logits_mut(), &eval.grad, 0.1);
    }

    let wsft_final_loss = last.0;
    let wsft_final_prob = last.1;
    let pass = wsft_final_loss < -1e4 && wsft_final_prob < 1e-8 && var_min_loss >= 0.0;
    Ok(NegWeightReport {
        wsft_trajectory,
        var_trajectory,
        wsft_final_loss,
        wsft_final_prob,
        var_min_loss,
        crossed_1e2_step,
        crossed_1e4_step,
        pass,
    })
}

/// Normalizer-quality study specification.
#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub instance: InstanceSpec,
    pub instance_seed: RngSeed,
    pub root_seed: RngSeed,
    pub batch_sizes: Vec<usize>,
    pub n_seeds: usize,
}

impl EstimatorSpec {
    /// Sixteen responses so the largest batch size in the default grid sits
    /// at the enumeration scale where the batch sum is calibrated.
    pub fn desk_default(root_seed: RngSeed) -> EstimatorSpec {
        EstimatorSpec {
            instance: InstanceSpec {
                n_prompts: 3,
                n_responses: 16,
                ref_kind: RefKind::RandomDirichlet,
                reward: RewardKind::IidGaussian { sigma: 1.0 },
                lambda: 1.0,
            },
            instance_seed: root_seed.derive("estimator-instance", &[]),
            root_seed,
            batch_sizes: vec![2, 4, 8, 16],
            n_seeds: 200,
        }
    }
}

pub const ESTIMATOR_METRICS: [&str; 3] = ["ratio_mean", "ratio_worst_abs_dev", "ratio_dev"];

/// Monte-Carlo distribution of `Zhat(x)/Z(x)` per batch size and
/// response-sampling mode. `ratio_dev` holds the per-seed root mean square of
/// `ratio - 1` over prompts, so a cell's RMSE is the RMS of that column.
pub fn run_estimator_study(spec: &EstimatorSpec) -> Result<SweepResult> {
    if spec.n_seeds == 0 {
        return Err(Error::InvalidArgument("seeds list must be nonempty".into()));
    }
    let (space, rewards) = spec.instance.build(spec.instance_seed)?;
    let exact: Vec<f64> = (0..space.n_prompts())
        .map(|x| exact_partition(&space, &rewards, x))
        .collect();
    let modes = [
        ("uniform", uniform_response_matrix(&space)),
        ("ref", space.ref_policy().clone()),
    ];

    let mut cells = Vec::new();
    for &b in &spec.batch_sizes {
        for (mode_name, matrix) in &modes {
            let rows: Vec<Vec<f64>> = (0..spec.n_seeds as u64)
                .into_par_iter()
                .map(|seed| {
                    let stream = format!("estimator-batch-{mode_name}");
                    let batch_seed = spec.root_seed.derive(&stream, &[b as u64, seed]);
                    let batch = sample_batch(&space, matrix, b, batch_seed)?;
                    let mut ratios = Vec::with_capacity(space.n_prompts());
                    for (x, &z) in exact.iter().enumerate() {
                        let z_hat = inbatch_partition_for_prompt(&space, &rewards, &batch, x)?;
                        ratios.push(z_hat / z);
                    }
                    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
                    let worst = ratios
                        .iter()
                        .map(|r| (r - 1.0).abs())
                        .fold(0.0f64, f64::max);
                    let dev = (ratios.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>()
                        / ratios.len() as f64)
                        .sqrt();
                    Ok(vec![mean, worst, dev])
                })
                .collect::<Result<_>>()?;
            cells.push(SweepCell {
                label: format!("b{b}-{mode_name}"),
                seeds: (0..spec.n_seeds as u64).collect(),
                values: rows,
            });
        }
    }

    let result = SweepResult {
        scenario: "estimator-study".to_string(),
        header_note: format!(
            "batch-sum normalizer quality: distribution of Zhat(x)/Z(x) per batch size and \
             response-sampling mode; reports (a) estimator deviation vs B and (b) its spread, \
             the mechanisms behind batch-size robustness of the in-batch objective; \
             instance {}x{}, {} seeds",
            spec.instance.n_prompts, spec.instance.n_responses, spec.n_seeds
        ),
        metrics: ESTIMATOR_METRICS.iter().map(|s| s.to_string()).collect(),
        cells,
    };
    result.validate()?;
    Ok(result)
}

/// Root-mean-square deviation of `Zhat/Z` from 1 for one cell of an estimator
/// sweep.
pub fn estimator_rmse(result: &SweepResult, cell_label: &str) -> Option<f64> {
    let idx = result.metric_index("ratio_dev")?;
    result.cell(cell_label).map(|c| c.rms(idx))
}

/// What to write besides the tables.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmitOptions {
    pub plots: bool,
}

/// Any scenario outcome, for uniform report emission.
#[derive(Debug, Clone)]
pub enum ScenarioResult {
    Sweep(SweepResult),
    Clip(ClipDistinctionReport),
    NegWeight(NegWeightReport),
}

impl ScenarioResult {
    pub fn scenario_name(&self) -> &str {
        match self {
            ScenarioResult::Sweep(s) => &s.scenario,
            ScenarioResult::Clip(_) => "clip-distinction",
            ScenarioResult::NegWeight(_) => "negative-weight-demo",
        }
    }
}

/// Write `summary.csv`, `summary.txt`, and optional SVG plots under
/// `<out_dir>/<scenario>/`. Returns the created file paths. Byte-identical
/// across reruns of the same result.
pub fn emit_outputs(
    result: &ScenarioResult,
    out_dir: &Path,
    opts: &EmitOptions,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(result.scenario_name());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::new();
    let write = |name: &str, content: String| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };

    match result {
        ScenarioResult::Sweep(sweep) => {
            sweep.validate()?;
            written.push(write("summary.csv", sweep.to_csv())?);
            written.push(write("summary.txt", sweep.to_summary_text())?);
            if opts.plots {
                for (m, name) in sweep.metrics.iter().enumerate() {
                    let series = vec![plot::Series {
                        name: format!("mean {name}"),
                        points: sweep
                            .cells
                            .iter()
                            .enumerate()
                            .map(|(i, c)| (i as f64, c.mean(m)))
                            .collect(),
                    }];
                    let svg = plot::line_chart(
                        &format!("{}: {name}", sweep.scenario),
                        "cell index",
                        name,
                        &series,
                    );
                    written.push(write(&format!("{name}.svg"), svg)?);
                }
            }
        }
        ScenarioResult::Clip(report) => {
            written.push(write("summary.csv", report.to_csv())?);
            written.push(write("summary.txt", report.to_summary_text())?);
        }
        ScenarioResult::NegWeight(report) => {
            written.push(write("summary.csv", report.to_csv())?);
            written.push(write("summary.txt", report.to_summary_text())?);
            if opts.plots {
                let series = vec![
                    plot::Series {
                        name: "wsft-negative".into(),
                        points: report
                            .wsft_trajectory
                            .iter()
                            .map(|p| (p.step as f64, p.loss))
                            .collect(),
                    },
                    plot::Series {
                        name: "var-inbatch".into(),
                        points: report
                            .var_trajectory
                            .iter()
                            .map(|&(s, l)| (s as f64, l))
                            .collect(),
                    },
                ];
                let svg = plot::line_chart("negative-weight demo", "step", "loss", &series);
                written.push(write("loss.svg", svg)?);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_exact_mode_converges_across_seeds() {
        let mut spec = ConsistencySpec::desk_default(RngSeed(7));
        spec.n_seeds = 10;
        spec.batch_sizes = vec![];
        let result = run_consistency(&spec).unwrap();
        let cell = result.cell("var-exact").unwrap();
        let m = result.metric_index("final_kl_opt_policy").unwrap();
        for (seed, row) in cell.seeds.iter().zip(&cell.values) {
            assert!(row[m] < 1e-4, "seed {seed} final KL {}", row[m]);
        }
    }

    #[test]
    fn consistency_inbatch_improves_with_batch_size() {
        let mut spec = ConsistencySpec::desk_default(RngSeed(11));
        spec.n_seeds = 20;
        spec.batch_sizes = vec![2, 16];
        spec.steps = 1500;
        let result = run_consistency(&spec).unwrap();
        let m = result.metric_index("final_kl_opt_policy").unwrap();
        let small = result.cell("var-inbatch-b2").unwrap().mean(m);
        let large = result.cell("var-inbatch-b16").unwrap().mean(m);
        assert!(
            large <= small,
            "mean final KL at B=16 ({large}) above B=2 ({small})"
        );
    }

    #[test]
    fn consistency_constant_rewards_stay_at_the_fixed_point() {
        let mut spec = ConsistencySpec::desk_default(RngSeed(3));
        spec.instance.reward = RewardKind::Constant { value: 2.0 };
        spec.n_seeds = 5;
        spec.batch_sizes = vec![4];
        spec.steps = 400;
        // Gradient descent preserves the exact fixed point, and enumerating
        // batches keep the in-batch normalizer exact (sampled small batches
        // carry an O(1/B) self-normalization bias that shifts it).
        spec.optimizer = OptimizerKind::Gd;
        spec.inbatch_mode = Some(BatchMode::PromptCycle);
        let result = run_consistency(&spec).unwrap();
        let m = result.metric_index("max_kl_over_evals").unwrap();
        for cell in &result.cells {
            for row in &cell.values {
                assert!(row[m] < 1e-6, "cell {} max KL {}", cell.label, row[m]);
            }
        }
    }

    #[test]
    fn clip_distinction_reproduces_both_targets() {
        let report = run_clip_distinction().unwrap();
        assert!(report.pass, "{}", report.to_summary_text());
        let rlol = &report.rows[0];
        assert!((rlol.achieved.0 - 0.502513).abs() < 1e-3);
        let var = &report.rows[1];
        assert!((var.achieved.0 - 0.731059).abs() < 1e-3);
    }

    #[test]
    fn clip_distinction_tied_rewards_split_evenly() {
        let report = clip_distinction_with_rewards(100.0, 100.0, 1e-3).unwrap();
        for row in &report.rows {
            assert!((row.achieved.0 - 0.5).abs() < 1e-3, "{}", row.method);
            assert!((row.achieved.1 - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn negative_weight_demo_passes() {
        let report = run_negative_weight_demo().unwrap();
        assert!(report.pass, "{}", report.to_summary_text());
        assert!(report.wsft_final_loss < -1e4);
        assert!(report.wsft_final_prob < 1e-8);
        assert!(report.var_min_loss >= 0.0);
        assert!(report.crossed_1e2_step.is_some());
        assert!(report.crossed_1e4_step.unwrap() > report.crossed_1e2_step.unwrap());
    }

    #[test]
    fn estimator_rmse_improves_with_batch_size() {
        let mut spec = EstimatorSpec::desk_default(RngSeed(5));
        spec.n_seeds = 100;
        spec.batch_sizes = vec![2, 16];
        let result = run_estimator_study(&spec).unwrap();
        let rmse_2 = estimator_rmse(&result, "b2-uniform").unwrap();
        let rmse_16 = estimator_rmse(&result, "b16-uniform").unwrap();
        assert!(rmse_16 < rmse_2, "RMSE b16 {rmse_16} vs b2 {rmse_2}");
        // Mean ratios are reported per mode, no target asserted.
        let m = result.metric_index("ratio_mean").unwrap();
        for cell in &result.cells {
            assert!(cell.mean(m).is_finite());
        }
    }

    #[test]
    fn sweep_csv_aggregates_match_recomputation() {
        let mut spec = EstimatorSpec::desk_default(RngSeed(9));
        spec.n_seeds = 10;
        spec.batch_sizes = vec![4];
        let result = run_estimator_study(&spec).unwrap();
        let csv = result.to_csv();
        // Recompute the mean rows from the per-seed rows in the CSV itself.
        let mut per_seed: Vec<Vec<f64>> = Vec::new();
        let mut mean_row: Option<Vec<f64>> = None;
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[0] == "b4-uniform" && fields[1] == "mean" {
                mean_row = Some(fields[2..].iter().map(|f| f.parse().unwrap()).collect());
            } else if fields[0] == "b4-uniform" && fields[1] != "std" {
                per_seed.push(fields[2..].iter().map(|f| f.parse().unwrap()).collect());
            }
        }
        let mean_row = mean_row.expect("mean row present");
        for (m, &reported) in mean_row.iter().enumerate() {
            let recomputed: f64 =
                per_seed.iter().map(|r| r[m]).sum::<f64>() / per_seed.len() as f64;
            assert!((reported - recomputed).abs() < 1e-12);
        }
    }

    #[test]
    fn emit_outputs_writes_tables_and_optional_plots() {
        let dir = tempfile::tempdir().unwrap();
        let report = clip_distinction_with_rewards(2.0, 1.0, 1e-2).unwrap();
        let files = emit_outputs(
            &ScenarioResult::Clip(report.clone()),
            dir.path(),
            &EmitOptions { plots: false },
        )
        .unwrap();
        assert_eq!(files.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("clip-distinction/summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3, "header plus two method rows");

        let mut spec = EstimatorSpec::desk_default(RngSeed(2));
        spec.n_seeds = 5;
        spec.batch_sizes = vec![2];
        let sweep = run_estimator_study(&spec).unwrap();
        let files = emit_outputs(
            &ScenarioResult::Sweep(sweep.clone()),
            dir.path(),
            &EmitOptions { plots: true },
        )
        .unwrap();
        assert!(files.iter().any(|f| f.extension().unwrap() == "svg"));
        let files_no_plots = emit_outputs(
            &ScenarioResult::Sweep(sweep),
            dir.path(),
            &EmitOptions { plots: false },
        )
        .unwrap();
        assert!(files_no_plots.iter().all(|f| f.extension().unwrap() != "svg"));
    }

    #[test]
    fn scenario_outputs_are_byte_identical_across_reruns() {
        let mut spec = EstimatorSpec::desk_default(RngSeed(42));
        spec.n_seeds = 8;
        spec.batch_sizes = vec![2, 8];
        let a = run_estimator_study(&spec).unwrap();
        let b = run_estimator_study(&spec).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_summary_text(), b.to_summary_text());
    }

    #[test]
    fn consistency_writes_per_cell_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ConsistencySpec::desk_default(RngSeed(1));
        spec.n_seeds = 2;
        spec.batch_sizes = vec![2];
        spec.steps = 50;
        spec.out_dir = Some(dir.path().to_path_buf());
        run_consistency(&spec).unwrap();
        for cell in ["var-exact", "var-inbatch-b2"] {
            for seed in 0..2 {
                let path = dir
                    .path()
                    .join("consistency")
                    .join(cell)
                    .join(format!("{seed}.records"));
                let text = std::fs::read_to_string(&path).unwrap();
                assert!(text.starts_with("# run records v1\n"), "{path:?}");
            }
        }
    }
}
