//! Seeded optimization loop over a tabular policy for any loss in the zoo,
//! with convergence tracked against the exact optimal policy.
//!
//! A run is fully determined by `(space, rewards, TrainConfig, TrainData)`:
//! batches for step `k` are drawn from the seed stream `derive("batch", [k])`,
//! so trajectories are reproducible and any step's batch can be regenerated
//! independently. Metric sequences in the report are bit-identical across
//! reruns; wall-clock fields are explicitly excluded from that contract.
//!
//! Records are serialized as versioned comma-separated lines (one per eval
//! point) followed by a `# summary` line; see [`RunReport::to_records_text`].

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;

use crate::losses::{
    dpo_loss, rlol_loss, var_loss, wsft_loss, LossEval, RlolParams, ZMode,
};
use crate::oracle::{optimal_policy, rlhf_objective_probs, OptimalPolicy};
use crate::policy::TabularPolicy;
use crate::reward::RewardTable;
use crate::space::{sample_batch, uniform_response_matrix, Batch, PreferenceTriple, TaskSpace};
use crate::{Error, Result, RngSeed};

/// Which loss drives the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Variational weights with the batch-estimated normalizer.
    VarInBatch,
    /// Variational weights with the exact normalizer.
    VarExact,
    /// Preference-pair contrastive loss; requires triples in [`TrainData`].
    Dpo { beta: f64 },
    /// Clipped reward-weighted likelihood.
    Rlol(RlolParams),
    /// Fixed batch and caller-supplied weights from [`TrainData`].
    WsftCustom,
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::VarInBatch => "var-inbatch",
            LossSpec::VarExact => "var-exact",
            LossSpec::Dpo { .. } => "dpo",
            LossSpec::Rlol(_) => "rlol",
            LossSpec::WsftCustom => "wsft-custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Gd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn default_adam() -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Response distribution used when sampling batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResponseSampling {
    /// Uniform over the response set (the operative assumption of the
    /// in-batch normalizer).
    #[default]
    Uniform,
    /// Draw responses from `pi_ref`.
    Reference,
}

/// How the per-step batch is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Fresh seeded draw each step: prompts uniform, responses per `sampling`.
    Sampled { sampling: ResponseSampling },
    /// Every (prompt, response) cell once per step; deterministic.
    FullEnumeration,
    /// Step `k` enumerates all responses of prompt `k mod n_prompts`.
    PromptCycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolicyInit {
    /// `theta = log pi_ref`; the starting distribution is the reference.
    #[default]
    Reference,
    /// All-zero logits (uniform distribution).
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: RngSeed,
    pub eval_every: usize,
    pub batch_mode: BatchMode,
    pub init: PolicyInit,
    /// Permit non-finite or runaway losses instead of aborting; such runs are
    /// flagged in the report and stop once the loss reaches
    /// [`DIVERGENCE_LOSS_CAP`].
    pub divergence_demo: bool,
    /// Early stop once `KL(pi* || pi_theta)` at an eval point drops below
    /// this threshold.
    pub stop_kl: Option<f64>,
}

/// Divergence demos stop at this loss (or at the step budget).
pub const DIVERGENCE_LOSS_CAP: f64 = -1e6;

impl TrainConfig {
    /// Defaults: Adam(0.9, 0.999, 1e-8), lr 0.1, 2000 steps, batch size 8,
    /// eval every 100 steps, reference init. The batch mode default depends
    /// on the loss: the in-batch estimator needs sampled batches, while the
    /// exact and clipped losses default to full enumeration (their
    /// deterministic regime).
    pub fn new(loss: LossSpec, seed: RngSeed) -> TrainConfig {
        let batch_mode = match loss {
            LossSpec::VarInBatch => BatchMode::Sampled {
                sampling: ResponseSampling::Uniform,
            },
            _ => BatchMode::FullEnumeration,
        };
        TrainConfig {
            loss,
            optimizer: OptimizerKind::default_adam(),
            lr: 0.1,
            steps: 2000,
            batch_size: 8,
            seed,
            eval_every: 100,
            batch_mode,
            init: PolicyInit::Reference,
            divergence_demo: false,
            stop_kl: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss-specific inputs that live outside the config.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainData<'a> {
    /// Preference triples for the contrastive loss.
    pub triples: &'a [PreferenceTriple],
    /// Fixed batch for `wsft-custom`.
    pub custom_batch: Option<&'a Batch>,
    /// Weights aligned with `custom_batch`.
    pub custom_weights: Option<&'a [f64]>,
}

/// One eval point. `wall_ms` is informational and excluded from determinism
/// guarantees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub loss: f64,
    /// `KL(pi* || pi_theta)`, the primary convergence metric.
    pub kl_opt_policy: f64,
    /// `KL(pi_theta || pi*)`.
    pub kl_policy_opt: f64,
    /// The KL-regularized expected-reward objective at `pi_theta`.
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<EvalRecord>,
    pub final_policy: TabularPolicy,
    pub diverged: bool,
    pub steps_run: usize,
    /// Objective value at the exact optimum, for gap computations.
    pub j_star: f64,
}

impl RunReport {
    pub fn final_record(&self) -> &EvalRecord {
        self.records.last().expect("reports have at least one record")
    }

    /// Versioned line-delimited serialization: a header, one CSV row per eval
    /// point, and a `# summary` record. `checkpoint` names the saved final
    /// policy, when there is one.
    pub fn to_records_text(&self, checkpoint: Option<&str>) -> String {
        let mut out = String::from("# run records v1\n");
        out.push_str("step,loss,kl_opt_policy,kl_policy_opt,objective,grad_norm,wall_ms\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.loss, r.kl_opt_policy, r.kl_policy_opt, r.objective, r.grad_norm,
                r.wall_ms
            );
        }
        let final_rec = self.final_record();
        let _ = writeln!(
            out,
            "# summary steps_run={} diverged={} final_loss={} final_kl_opt_policy={} final_objective={} j_star={} checkpoint={}",
            self.steps_run,
            self.diverged,
            final_rec.loss,
            final_rec.kl_opt_policy,
            final_rec.objective,
            self.j_star,
            checkpoint.unwrap_or("-"),
        );
        out
    }

    pub fn write_records(&self, path: &std::path::Path, checkpoint: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_records_text(checkpoint)).map_err(|e| Error::io(path, e))
    }
}

/// Oracle-relative metrics of a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub kl_opt_policy: f64,
    pub kl_policy_opt: f64,
    pub objective: f64,
    /// `J(pi*) - J(pi_theta)`; nonnegative because `pi*` is the maximizer.
    pub objective_gap: f64,
}

/// Evaluate a policy against the exact optimum of `(space, rewards)`.
pub fn evaluate(
    space: &TaskSpace,
    rewards: &RewardTable,
    policy: &TabularPolicy,
) -> Result<EvalMetrics> {
    let opt = optimal_policy(space, rewards);
    let j_star = rlhf_objective_probs(space, opt.probs(), rewards)?;
    Ok(metrics_against(space, rewards, &opt, j_star, policy))
}

fn metrics_against(
    space: &TaskSpace,
    rewards: &RewardTable,
    opt: &OptimalPolicy,
    j_star: f64,
    policy: &TabularPolicy,
) -> EvalMetrics {
    let n = space.n_prompts() as f64;
    let lambda = rewards.temperature();
    let mut kl_opt_policy = 0.0;
    let mut kl_policy_opt = 0.0;
    let mut objective = 0.0;
    for x in 0..space.n_prompts() {
        let log_theta = policy.log_prob_row(x);
        let theta = log_theta.mapv(f64::exp);
        let star = opt.row(x);
        // Log-domain sums stay finite even when the policy's probabilities
        // underflow (they show up as +inf KL, not NaN).
        for y in 0..space.n_responses() {
            let s = star[y];
            if s > 0.0 {
                kl_opt_policy += s * (s.ln() - log_theta[y]);
            }
            let p = theta[y];
            if p > 0.0 {
                kl_policy_opt += p * (log_theta[y] - s.ln());
                objective += p * rewards.get(x, y)
                    - lambda * p * (log_theta[y] - space.log_ref(x, y));
            }
        }
    }
    EvalMetrics {
        kl_opt_policy: kl_opt_policy / n,
        kl_policy_opt: kl_policy_opt / n,
        objective: objective / n,
        objective_gap: j_star - objective / n,
    }
}

/// Reusable optimizer state for callers that run their own loops (scenario
/// code with nonstandard trajectories). [`train`] uses it internally.
pub struct Optimizer {
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shape: (usize, usize)) -> Optimizer {
        Optimizer {
            state: OptimizerState::new(kind, shape),
        }
    }

    pub fn apply(&mut self, logits: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        self.state.apply(logits, grad, lr);
    }
}

enum OptimizerState {
    Gd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        m: Array2<f64>,
        v: Array2<f64>,
        t: u64,
    },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, shape: (usize, usize)) -> OptimizerState {
        match kind {
            OptimizerKind::Gd => OptimizerState::Gd,
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => OptimizerState::Adam {
                beta1,
                beta2,
                epsilon,
                m: Array2::zeros(shape),
                v: Array2::zeros(shape),
                t: 0,
            },
        }
    }

    fn apply(&mut self, logits: &mut Array2<f64>, grad: &Array2<f64>, lr: f64) {
        match self {
            OptimizerState::Gd => logits.zip_mut_with(grad, |t, g| *t -= lr * g),
            OptimizerState::Adam {
                beta1,
                beta2,
                epsilon,
                m,
                v,
                t,
            } => {
                *t += 1;
                let b1 = *beta1;
                let b2 = *beta2;
                m.zip_mut_with(grad, |m, g| *m = b1 * *m + (1.0 - b1) * g);
                v.zip_mut_with(grad, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
                let c1 = 1.0 - b1.powi(*t as i32);
                let c2 = 1.0 - b2.powi(*t as i32);
                for ((t_ref, &m_val), &v_val) in
                    logits.iter_mut().zip(m.iter()).zip(v.iter())
                {
                    let m_hat = m_val / c1;
                    let v_hat = v_val / c2;
                    *t_ref -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                }
            }
        }
    }
}

enum BatchProvider {
    Fixed(Batch),
    Sampled {
        response_matrix: Array2<f64>,
        batch_size: usize,
        seed: RngSeed,
    },
    Cycle,
    /// DPO evaluates over its triples; no batch is formed.
    None,
}

impl BatchProvider {
    fn get(&self, space: &TaskSpace, step: usize) -> Result<Option<Batch>> {
        match self {
            BatchProvider::Fixed(b) => Ok(Some(b.clone())),
            BatchProvider::Sampled {
                response_matrix,
                batch_size,
                seed,
            } => Ok(Some(sample_batch(
                space,
                response_matrix,
                *batch_size,
                seed.derive("batch", &[step as u64]),
            )?)),
            BatchProvider::Cycle => Ok(Some(Batch::enumerate_prompt(
                space,
                step % space.n_prompts(),
            )?)),
            BatchProvider::None => Ok(None),
        }
    }
}

/// Run the optimization loop. Deterministic given the config seed.
pub fn train(
    space: &TaskSpace,
    rewards: &RewardTable,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.loss {
        LossSpec::Dpo { beta } => {
            if data.triples.is_empty() {
                return Err(Error::InvalidArgument(
                    "dpo training needs nonempty preference triples".into(),
                ));
            }
            if !(beta > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "dpo beta must be positive, got {beta}"
                )));
            }
            for t in data.triples {
                t.validate(space)?;
            }
        }
        LossSpec::WsftCustom => {
            let batch = data.custom_batch.ok_or_else(|| {
                Error::InvalidArgument("wsft-custom training needs a fixed batch".into())
            })?;
            let weights = data.custom_weights.ok_or_else(|| {
                Error::InvalidArgument("wsft-custom training needs weights".into())
            })?;
            if weights.len() != batch.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for a batch of {}",
                    weights.len(),
                    batch.len()
                )));
            }
        }
        _ => {}
    }

    let opt = optimal_policy(space, rewards);
    let j_star = rlhf_objective_probs(space, opt.probs(), rewards)?;
    let mut policy = match cfg.init {
        PolicyInit::Reference => TabularPolicy::init_from_reference(space),
        PolicyInit::Zero => TabularPolicy::init_zero(space),
    };
    // The contrastive and clipped losses anchor their ratios to the
    // policy's initialization distribution (equal to pi_ref under the
    // default init).
    let anchor_probs = policy.prob_matrix();

    let provider = match cfg.loss {
        LossSpec::Dpo { .. } => BatchProvider::None,
        LossSpec::WsftCustom => BatchProvider::Fixed(
            data.custom_batch.expect("validated above").clone(),
        ),
        _ => match cfg.batch_mode {
            BatchMode::FullEnumeration => BatchProvider::Fixed(Batch::full_enumeration(space)),
            BatchMode::PromptCycle => BatchProvider::Cycle,
            BatchMode::Sampled { sampling } => BatchProvider::Sampled {
                response_matrix: match sampling {
                    ResponseSampling::Uniform => uniform_response_matrix(space),
                    ResponseSampling::Reference => space.ref_policy().clone(),
                },
                batch_size: cfg.batch_size,
                seed: cfg.seed,
            },
        },
    };

    let eval_loss = |policy: &TabularPolicy, batch: Option<&Batch>| -> Result<LossEval> {
        match cfg.loss {
            LossSpec::VarInBatch => {
                var_loss(policy, space, rewards, batch.expect("batch"), ZMode::InBatch)
            }
            LossSpec::VarExact => {
                var_loss(policy, space, rewards, batch.expect("batch"), ZMode::Exact)
            }
            LossSpec::Dpo { beta } => dpo_loss(policy, &anchor_probs, data.triples, beta),
            LossSpec::Rlol(params) => rlol_loss(
                policy,
                &anchor_probs,
                space,
                rewards,
                batch.expect("batch"),
                &params,
            ),
            LossSpec::WsftCustom => wsft_loss(
                policy,
                batch.expect("batch"),
                data.custom_weights.expect("validated above"),
            ),
        }
    };

    let start = Instant::now();
    let mut records: Vec<EvalRecord> = Vec::new();
    let push_record =
        |records: &mut Vec<EvalRecord>, step: usize, loss: f64, grad_norm: f64, policy: &TabularPolicy| {
            let m = metrics_against(space, rewards, &opt, j_star, policy);
            records.push(EvalRecord {
                step,
                loss,
                kl_opt_policy: m.kl_opt_policy,
                kl_policy_opt: m.kl_policy_opt,
                objective: m.objective,
                grad_norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        };

    let mut optimizer = OptimizerState::new(cfg.optimizer, policy.logits().dim());
    let mut diverged = false;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let batch = provider.get(space, step)?;
        let eval = eval_loss(&policy, batch.as_ref())?;
        if !eval.is_finite() {
            if cfg.divergence_demo {
                diverged = true;
                break;
            }
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss {}, lr {}); \
                 set divergence_demo to study runaway losses",
                eval.value, cfg.lr
            )));
        }
        if step % cfg.eval_every == 0 {
            push_record(&mut records, step, eval.value, eval.grad_norm(), &policy);
            if let Some(threshold) = cfg.stop_kl {
                let reached = records
                    .last()
                    .is_some_and(|r| r.kl_opt_policy < threshold);
                if reached {
                    steps_run = step;
                    break;
                }
            }
        }
        if cfg.divergence_demo && eval.value <= DIVERGENCE_LOSS_CAP {
            diverged = true;
            steps_run = step;
            break;
        }
        optimizer.apply(policy.logits_mut(), &eval.grad, cfg.lr);
        steps_run = step + 1;
    }

    if records.last().map(|r| r.step) != Some(steps_run) {
        let batch = provider.get(space, steps_run)?;
        let eval = eval_loss(&policy, batch.as_ref());
        let (value, norm) = match eval {
            Ok(e) => (e.value, e.grad_norm()),
            // Only reachable in flagged divergence demos.
            Err(_) => (f64::NAN, f64::NAN),
        };
        push_record(&mut records, steps_run, value, norm, &policy);
    }

    Ok(RunReport {
        records,
        final_policy: policy,
        diverged,
        steps_run,
        j_star,
    })
}
