//! The loss zoo with analytic gradients.
//!
//! Every loss returns a [`LossEval`]: a scalar value plus the full gradient
//! matrix with respect to the policy logits. The shared building block is
//! weighted SFT,
//!
//! ```text
//! L = -(1/B) sum_i w_i log pi_theta(y_i|x_i)
//! ```
//!
//! whose gradient (weights held constant) is
//!
//! ```text
//! dL/dtheta[x][y'] = (1/B) sum_{i: x_i = x} w_i (pi_theta(y'|x) - [y' = y_i]).
//! ```
//!
//! The variational losses plug in weights
//! `w_i = pi_ref(y_i|x_i) exp(r(x_i,y_i)/lambda) / Z(x_i)` with `Z` either
//! exact or estimated from the batch itself; those weights never depend on
//! `theta`, so there is no stop-gradient ambiguity. The clipped
//! reward-weighted loss does contain `theta` inside its importance ratio, and
//! that coefficient is frozen at the current iterate before each update; the
//! finite-difference checker freezes it the same way.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::oracle::{log_partition, optimal_policy};
use crate::policy::{log_sum_exp, TabularPolicy};
use crate::reward::{log_sigmoid, sigmoid, RewardTable};
use crate::space::{Batch, PreferenceTriple, TaskSpace};
use crate::{Error, Result, RngSeed};

/// Where the per-pair normalizers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMode {
    /// `Z(x_i)` estimated from the batch's own responses.
    InBatch,
    /// `Z(x_i)` summed exactly over the whole response set.
    Exact,
}

impl std::fmt::Display for ZMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ZMode::InBatch => write!(f, "in-batch"),
            ZMode::Exact => write!(f, "exact"),
        }
    }
}

/// A batch together with its variational weights and normalizers.
///
/// In-batch weights lie in `(0, 1]` because each pair's own term appears in
/// its normalizer sum; exact weights equal `pi*(y_i|x_i)`. Weights are
/// mathematically positive in both modes (they can underflow to zero only
/// past `exp(-745)`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    pub batch: Batch,
    pub weights: Vec<f64>,
    pub z_estimates: Vec<f64>,
    pub z_mode: ZMode,
}

/// Loss value plus gradient with respect to the policy logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl LossEval {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// `log Zhat(x_i) = log sum_{j=1..B} pi_ref(y_j|x_i) exp(r(x_i,y_j)/lambda)`,
/// accumulated in the log domain. Duplicates count with multiplicity.
pub fn log_inbatch_partition(
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    i: usize,
) -> Result<f64> {
    if i >= batch.len() {
        return Err(Error::OutOfBounds(format!(
            "pair index {i} >= batch length {}",
            batch.len()
        )));
    }
    let x = batch.pairs[i].0;
    Ok(log_inbatch_partition_for_prompt(space, rewards, batch, x))
}

fn log_inbatch_partition_for_prompt(
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    x: usize,
) -> f64 {
    let lambda = rewards.temperature();
    let terms: Array1<f64> = batch
        .pairs
        .iter()
        .map(|&(_, yj)| space.log_ref(x, yj) + rewards.get(x, yj) / lambda)
        .collect();
    log_sum_exp(terms.view())
}

/// `Zhat(x_i)` itself.
pub fn inbatch_partition(
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    i: usize,
) -> Result<f64> {
    Ok(log_inbatch_partition(space, rewards, batch, i)?.exp())
}

/// `Zhat(x)` for an arbitrary prompt against this batch's responses, whether
/// or not the prompt occurs in the batch.
pub fn inbatch_partition_for_prompt(
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    x: usize,
) -> Result<f64> {
    space.check_pair(x, 0)?;
    Ok(log_inbatch_partition_for_prompt(space, rewards, batch, x).exp())
}

/// Compute the variational weights
/// `w_i = pi_ref(y_i|x_i) exp(r(x_i,y_i)/lambda) / Z(x_i)` for a batch, with
/// `Z` per `z_mode`. All weights are strictly positive.
pub fn var_weights(
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    z_mode: ZMode,
) -> Result<WeightedBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    let lambda = rewards.temperature();
    // log Z per distinct prompt, computed once.
    let mut log_z_cache: Vec<Option<f64>> = vec![None; space.n_prompts()];
    let mut log_z_for = |x: usize| -> f64 {
        if let Some(v) = log_z_cache[x] {
            return v;
        }
        let v = match z_mode {
            ZMode::InBatch => log_inbatch_partition_for_prompt(space, rewards, batch, x),
            ZMode::Exact => log_partition(space, rewards, x),
        };
        log_z_cache[x] = Some(v);
        v
    };
    let mut weights = Vec::with_capacity(batch.len());
    let mut z_estimates = Vec::with_capacity(batch.len());
    for &(x, y) in &batch.pairs {
        let log_z = log_z_for(x);
        let log_w = space.log_ref(x, y) + rewards.get(x, y) / lambda - log_z;
        weights.push(log_w.exp());
        z_estimates.push(log_z.exp());
    }
    Ok(WeightedBatch {
        batch: batch.clone(),
        weights,
        z_estimates,
        z_mode,
    })
}

/// Weighted SFT: `-(1/B) sum_i w_i log pi_theta(y_i|x_i)`, weights constant.
pub fn wsft_loss(policy: &TabularPolicy, batch: &Batch, weights: &[f64]) -> Result<LossEval> {
    if weights.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    let n_prompts = policy.n_prompts();
    let n_responses = policy.n_responses();
    let inv_b = 1.0 / batch.len() as f64;

    // Per-prompt weight totals and per-cell weight counts.
    let mut row_total = vec![0.0f64; n_prompts];
    let mut cell_total = Array2::<f64>::zeros((n_prompts, n_responses));
    let mut touched = vec![false; n_prompts];
    for (&(x, y), &w) in batch.pairs.iter().zip(weights) {
        row_total[x] += w;
        cell_total[[x, y]] += w;
        touched[x] = true;
    }

    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n_prompts, n_responses));
    for x in 0..n_prompts {
        if !touched[x] {
            continue;
        }
        let log_row = policy.log_prob_row(x);
        let prob_row = log_row.mapv(f64::exp);
        for y in 0..n_responses {
            value -= cell_total[[x, y]] * log_row[y];
            grad[[x, y]] = inv_b * (row_total[x] * prob_row[y] - cell_total[[x, y]]);
        }
    }
    Ok(LossEval {
        value: value * inv_b,
        grad,
    })
}

/// Variational loss: weighted SFT with the weights from [`var_weights`].
pub fn var_loss(
    policy: &TabularPolicy,
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    z_mode: ZMode,
) -> Result<LossEval> {
    let weighted = var_weights(space, rewards, batch, z_mode)?;
    wsft_loss(policy, batch, &weighted.weights)
}

/// Preference-pair contrastive loss: mean over triples of
/// `-log sigma(beta * (log-ratio(chosen) - log-ratio(rejected)))` where each
/// log-ratio is `log pi_theta - log ref`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    ref_probs: &Array2<f64>,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<LossEval> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument(
            "preference triples must be nonempty".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if ref_probs.dim() != policy.logits().dim() {
        return Err(Error::InvalidArgument(format!(
            "reference shape {:?} does not match policy {:?}",
            ref_probs.dim(),
            policy.logits().dim()
        )));
    }
    let inv_n = 1.0 / triples.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros(policy.logits().dim());
    for t in triples {
        let lw = policy.log_prob(t.prompt, t.chosen) - ref_probs[[t.prompt, t.chosen]].ln();
        let ll = policy.log_prob(t.prompt, t.rejected) - ref_probs[[t.prompt, t.rejected]].ln();
        let a = beta * (lw - ll);
        value -= log_sigmoid(a);
        // d(-log sigma(a))/da = sigma(a) - 1; da/dtheta has only the two
        // indicator terms because the row softmax parts cancel.
        let g = (sigmoid(a) - 1.0) * beta * inv_n;
        grad[[t.prompt, t.chosen]] += g;
        grad[[t.prompt, t.rejected]] -= g;
    }
    Ok(LossEval {
        value: value * inv_n,
        grad,
    })
}

/// Baseline subtracted from the reward inside the clipped loss coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RlolBaseline {
    /// Use the raw reward.
    #[default]
    None,
    /// Advantage form: subtract `V(x) = E_{y ~ pi_ref}[r(x, y)]`.
    RefMean,
}

/// Parameters of the clipped reward-weighted likelihood loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlolParams {
    /// Clip radius for the importance ratio, in `(0, 1)`.
    pub epsilon: f64,
    /// Plain log-likelihood coefficient subtracted from the reward term.
    pub beta: f64,
    pub baseline: RlolBaseline,
}

impl Default for RlolParams {
    fn default() -> Self {
        RlolParams {
            epsilon: 0.2,
            beta: 0.0,
            baseline: RlolBaseline::None,
        }
    }
}

/// The frozen per-pair coefficients
/// `c_i = rtilde(x_i,y_i) * clip(pi_theta(y_i|x_i)/ref(y_i|x_i), 1-eps, 1+eps) - beta`
/// evaluated at the given policy iterate.
pub fn rlol_coefficients(
    policy: &TabularPolicy,
    ref_probs: &Array2<f64>,
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    params: &RlolParams,
) -> Result<Vec<f64>> {
    if !(params.epsilon > 0.0 && params.epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "clip epsilon must lie in (0, 1), got {}",
            params.epsilon
        )));
    }
    if params.beta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "beta must be nonnegative, got {}",
            params.beta
        )));
    }
    if ref_probs.dim() != (space.n_prompts(), space.n_responses()) {
        return Err(Error::InvalidArgument(format!(
            "reference shape {:?} does not match space",
            ref_probs.dim()
        )));
    }
    let baseline: Vec<f64> = match params.baseline {
        RlolBaseline::None => vec![0.0; space.n_prompts()],
        RlolBaseline::RefMean => (0..space.n_prompts())
            .map(|x| {
                space
                    .ref_row(x)
                    .iter()
                    .zip(rewards.values().row(x).iter())
                    .map(|(&p, &r)| p * r)
                    .sum()
            })
            .collect(),
    };
    let mut coeffs = Vec::with_capacity(batch.len());
    for &(x, y) in &batch.pairs {
        let ratio = (policy.log_prob(x, y) - ref_probs[[x, y]].ln()).exp();
        let clipped = ratio.clamp(1.0 - params.epsilon, 1.0 + params.epsilon);
        coeffs.push((rewards.get(x, y) - baseline[x]) * clipped - params.beta);
    }
    Ok(coeffs)
}

/// Clipped reward-weighted likelihood:
/// `-(1/B) sum_i c_i log pi_theta(y_i|x_i)` with `c_i` from
/// [`rlol_coefficients`], treated as constant during the gradient.
pub fn rlol_loss(
    policy: &TabularPolicy,
    ref_probs: &Array2<f64>,
    space: &TaskSpace,
    rewards: &RewardTable,
    batch: &Batch,
    params: &RlolParams,
) -> Result<LossEval> {
    let coeffs = rlol_coefficients(policy, ref_probs, space, rewards, batch, params)?;
    wsft_loss(policy, batch, &coeffs)
}

/// Finite-difference gradient check configuration.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of sampled logit coordinates (with replacement).
    pub n_coords: usize,
    pub seed: RngSeed,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            n_coords: 200,
            seed: RngSeed(0),
        }
    }
}

/// One checked coordinate.
#[derive(Debug, Clone, Copy)]
pub struct CoordCheck {
    pub x: usize,
    pub y: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of a finite-difference sweep. `worst` holds the largest-error
/// coordinates, biggest first.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "checked {} coordinates, max relative error {:.3e}",
            self.checked, self.max_rel_error
        )?;
        for c in &self.worst {
            writeln!(
                f,
                "  ({}, {}): analytic {:+.9e} numeric {:+.9e} rel {:.3e}",
                c.x, c.y, c.analytic, c.numeric, c.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compare the analytic gradient of `loss_fn` at `policy` against central
/// finite differences on randomly sampled coordinates.
///
/// The relative error uses `|num - ana| / max(1, |num|, |ana|)` so near-zero
/// gradient entries are judged on the absolute scale.
pub fn grad_check<F>(
    loss_fn: F,
    policy: &TabularPolicy,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&TabularPolicy) -> Result<LossEval>,
{
    let base = loss_fn(policy)?;
    if !base.is_finite() {
        return Err(Error::Numerical(
            "loss is not finite at the check point".into(),
        ));
    }
    let mut rng = cfg.seed.derive("grad-check", &[]).rng();
    let mut checks = Vec::with_capacity(cfg.n_coords);
    for _ in 0..cfg.n_coords {
        let x = rng.random_range(0..policy.n_prompts());
        let y = rng.random_range(0..policy.n_responses());
        let mut plus = policy.clone();
        plus.logits_mut()[[x, y]] += cfg.step;
        let mut minus = policy.clone();
        minus.logits_mut()[[x, y]] -= cfg.step;
        let numeric = (loss_fn(&plus)?.value - loss_fn(&minus)?.value) / (2.0 * cfg.step);
        let analytic = base.grad[[x, y]];
        let rel_error = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0);
        checks.push(CoordCheck {
            x,
            y,
            analytic,
            numeric,
            rel_error,
        });
    }
    checks.sort_by(|a, b| b.rel_error.partial_cmp(&a.rel_error).unwrap());
    let max_rel_error = checks.first().map(|c| c.rel_error).unwrap_or(0.0);
    let checked = checks.len();
    checks.truncate(8);
    Ok(GradCheckReport {
        max_rel_error,
        checked,
        worst: checks,
    })
}

/// Weights for a batch at the true optimum, used by tests and scenarios.
pub fn exact_weights(space: &TaskSpace, rewards: &RewardTable, batch: &Batch) -> Vec<f64> {
    let opt = optimal_policy(space, rewards);
    batch.pairs.iter().map(|&(x, y)| opt.prob(x, y)).collect()
}
