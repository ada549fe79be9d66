//! Exact quantities on finite spaces: partition functions, the closed-form
//! optimal policy, KL divergences, the KL-regularized expected-reward
//! objective, and brute-force simplex minimizers.
//!
//! The optimal policy of
//!
//! ```text
//! J(pi) = E_x[ E_{y~pi}[r(x,y)] - lambda * KL(pi(.|x) || pi_ref(.|x)) ]
//! ```
//!
//! is `pi*(y|x) = pi_ref(y|x) exp(r(x,y)/lambda) / Z(x)` with
//! `Z(x) = sum_y pi_ref(y|x) exp(r(x,y)/lambda)`. Everything here is computed
//! in the log domain with max-subtracted accumulation, so rewards in the
//! hundreds (where naive exponentiation overflows) are exact.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};

use crate::policy::{log_sum_exp, TabularPolicy};
use crate::reward::RewardTable;
use crate::space::TaskSpace;
use crate::{Error, Result};

/// Closed-form maximizer of the KL-regularized objective, with its per-prompt
/// normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPolicy {
    probs: Array2<f64>,
    partition: Vec<f64>,
    log_partition: Vec<f64>,
}

impl OptimalPolicy {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[[x, y]]
    }

    pub fn row(&self, x: usize) -> ArrayView1<'_, f64> {
        self.probs.row(x)
    }

    /// `Z(x)`. May overflow to infinity for extreme reward/temperature
    /// combinations; prefer [`Self::log_partition`] in arithmetic.
    pub fn partition(&self, x: usize) -> f64 {
        self.partition[x]
    }

    pub fn log_partition(&self, x: usize) -> f64 {
        self.log_partition[x]
    }

    /// The optimal policy as a logit table (`log pi*`), e.g. for evaluating
    /// policy-typed functions at the optimum.
    pub fn as_policy(&self) -> TabularPolicy {
        TabularPolicy::from_logits(self.probs.mapv(f64::ln))
    }
}

/// `log Z(x) = log sum_y pi_ref(y|x) exp(r(x,y)/lambda)`, max-subtracted.
pub fn log_partition(space: &TaskSpace, rewards: &RewardTable, x: usize) -> f64 {
    let lambda = rewards.temperature();
    let terms: Array1<f64> = space
        .log_ref_row(x)
        .iter()
        .zip(rewards.values().row(x).iter())
        .map(|(&lp, &r)| lp + r / lambda)
        .collect();
    log_sum_exp(terms.view())
}

/// `Z(x)` itself. Exact up to floating error for moderate `r/lambda`; the
/// log-domain form never overflows internally.
pub fn exact_partition(space: &TaskSpace, rewards: &RewardTable, x: usize) -> f64 {
    log_partition(space, rewards, x).exp()
}

/// Evaluate `pi*` on the whole space.
pub fn optimal_policy(space: &TaskSpace, rewards: &RewardTable) -> OptimalPolicy {
    let lambda = rewards.temperature();
    let n = space.n_prompts();
    let mut probs = Array2::zeros((n, space.n_responses()));
    let mut partition = Vec::with_capacity(n);
    let mut log_part = Vec::with_capacity(n);
    for x in 0..n {
        let terms: Array1<f64> = space
            .log_ref_row(x)
            .iter()
            .zip(rewards.values().row(x).iter())
            .map(|(&lp, &r)| lp + r / lambda)
            .collect();
        let log_z = log_sum_exp(terms.view());
        probs.row_mut(x).assign(&terms.mapv(|t| (t - log_z).exp()));
        partition.push(log_z.exp());
        log_part.push(log_z);
    }
    OptimalPolicy {
        probs,
        partition,
        log_partition: log_part,
    }
}

/// `KL(p || q) = sum_i p_i log(p_i / q_i)` in nats, with `0 log(0/q) = 0`.
/// Rejects support violations (`q_i = 0 < p_i`) naming the offending index.
pub fn kl(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "kl length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kl support violation at index {i}: p={pi}, q={qi}"
            )));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Mean over prompts (uniform prompt marginal) of row-wise `KL(p || q)`.
pub fn policy_kl(p: &Array2<f64>, q: &Array2<f64>) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::InvalidArgument(format!(
            "policy kl shape mismatch: {:?} vs {:?}",
            p.dim(),
            q.dim()
        )));
    }
    let mut total = 0.0;
    for (pr, qr) in p.rows().into_iter().zip(q.rows()) {
        total += kl(pr, qr)?;
    }
    Ok(total / p.nrows() as f64)
}

/// The KL-regularized expected-reward objective for an arbitrary probability
/// matrix: mean over prompts of
/// `sum_y p(y|x) r(x,y) - lambda * KL(p(.|x) || pi_ref(.|x))`.
pub fn rlhf_objective_probs(
    space: &TaskSpace,
    probs: &Array2<f64>,
    rewards: &RewardTable,
) -> Result<f64> {
    if probs.dim() != (space.n_prompts(), space.n_responses()) {
        return Err(Error::InvalidArgument(format!(
            "probability matrix shape {:?} does not match space",
            probs.dim()
        )));
    }
    let lambda = rewards.temperature();
    let mut total = 0.0;
    for x in 0..space.n_prompts() {
        let row = probs.row(x);
        let expected_reward: f64 = row
            .iter()
            .zip(rewards.values().row(x).iter())
            .map(|(&p, &r)| p * r)
            .sum();
        total += expected_reward - lambda * kl(row, space.ref_row(x))?;
    }
    Ok(total / space.n_prompts() as f64)
}

/// [`rlhf_objective_probs`] evaluated at a softmax policy.
pub fn rlhf_objective(
    space: &TaskSpace,
    policy: &TabularPolicy,
    rewards: &RewardTable,
) -> Result<f64> {
    rlhf_objective_probs(space, &policy.prob_matrix(), rewards)
}

/// Exact minimizer over the probability simplex of `-sum_y w_y log p_y` for
/// nonnegative weights: `p = w / sum(w)` (stationarity of the Lagrangian).
pub fn simplex_minimizer_weighted_sft(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("weights must be nonempty".into()));
    }
    if let Some((i, &w)) = weights.iter().enumerate().find(|(_, &w)| w < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight {i} is negative ({w}); the simplex minimizer needs nonnegative weights"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "weights must not be all zero".into(),
        ));
    }
    Ok(weights.iter().map(|&w| w / total).collect())
}

/// Text report of the exact quantities for one instance: `Z(x)`, `pi*`, the
/// objective value at the optimum, and per-prompt KL between `pi*` and
/// `pi_ref` in both directions.
pub fn format_oracle_dump(space: &TaskSpace, rewards: &RewardTable) -> Result<String> {
    let opt = optimal_policy(space, rewards);
    let j_star = rlhf_objective_probs(space, opt.probs(), rewards)?;
    let mut out = String::from("# oracle dump v1\n");
    let _ = writeln!(out, "prompts {}", space.n_prompts());
    let _ = writeln!(out, "responses {}", space.n_responses());
    let _ = writeln!(out, "lambda {}", rewards.temperature());
    let _ = writeln!(out, "j_star {j_star}");
    for x in 0..space.n_prompts() {
        let _ = writeln!(out, "prompt {x}");
        let _ = writeln!(out, "z {}", opt.partition(x));
        let _ = writeln!(out, "log_z {}", opt.log_partition(x));
        let fmt_row = |row: ArrayView1<'_, f64>| {
            row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "pi_star {}", fmt_row(opt.row(x)));
        let _ = writeln!(out, "pi_ref {}", fmt_row(space.ref_row(x)));
        let _ = writeln!(out, "kl_star_ref {}", kl(opt.row(x), space.ref_row(x))?);
        let _ = writeln!(out, "kl_ref_star {}", kl(space.ref_row(x), opt.row(x))?);
    }
    Ok(out)
}
