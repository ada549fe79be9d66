//! Reward tables `r(x, y)`: synthetic generation and Bradley-Terry fitting
//! from preference triples.
//!
//! The pairwise preference likelihood is `sigma(r(x, y_w) - r(x, y_l))`, so
//! fitting can only identify reward *differences*; an explicit L2 term pins
//! the remaining gauge freedom. The table also carries the temperature
//! `lambda` used by every `exp(r/lambda)` downstream.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::policy::parse_matrix_with_fields;
use crate::space::{PreferenceTriple, TaskSpace};
use crate::{Error, Result, RngSeed};

/// Reward matrix plus the temperature that scales it in exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    values: Array2<f64>,
    temperature: f64,
}

impl RewardTable {
    pub fn new(values: Array2<f64>, temperature: f64) -> Result<RewardTable> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if let Some(((x, y), &v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reward at ({x}, {y}) is {v}, must be finite"
            )));
        }
        Ok(RewardTable {
            values,
            temperature,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[[x, y]]
    }

    /// Temperature `lambda` in `exp(r/lambda)`.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<RewardTable> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// `max_y r(x, y) / lambda`, the per-prompt gauge shift that keeps every
    /// `exp(r/lambda)` bounded by 1 inside normalized quantities.
    pub fn gauge(&self, x: usize) -> f64 {
        self.values
            .row(x)
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            / self.temperature
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RewardTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# reward table v1\n");
        let _ = writeln!(out, "shape {} {}", self.values.nrows(), self.values.ncols());
        let _ = writeln!(out, "lambda {}", self.temperature);
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<RewardTable> {
        let (values, fields) = parse_matrix_with_fields(text, "reward table v1", &["lambda"])?;
        RewardTable::new(values, fields[0])
    }
}

/// Synthetic reward families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardKind {
    /// Independent draws from `N(0, sigma^2)`.
    IidGaussian { sigma: f64 },
    /// One designated best response per prompt at `gap`, zero elsewhere.
    PlantedBest { gap: f64 },
    /// Every entry equal to `value`.
    Constant { value: f64 },
}

/// Generate a reward table; deterministic given `seed`. Temperature defaults
/// to 1 and can be overridden with [`RewardTable::with_temperature`].
pub fn synth_rewards(space: &TaskSpace, kind: RewardKind, seed: RngSeed) -> Result<RewardTable> {
    let shape = (space.n_prompts(), space.n_responses());
    let values = match kind {
        RewardKind::Constant { value } => Array2::from_elem(shape, value),
        RewardKind::PlantedBest { gap } => {
            if gap < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "planted-best gap must be nonnegative, got {gap}"
                )));
            }
            let mut rng = seed.derive("planted-best", &[]).rng();
            let mut values = Array2::zeros(shape);
            for x in 0..shape.0 {
                let best = rng.random_range(0..shape.1);
                values[[x, best]] = gap;
            }
            values
        }
        RewardKind::IidGaussian { sigma } => {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gaussian sigma must be positive, got {sigma}"
                )));
            }
            let mut rng = seed.derive("iid-gaussian", &[]).rng();
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::InvalidArgument(format!("bad gaussian: {e}")))?;
            let mut values = Array2::zeros(shape);
            values.mapv_inplace(|_| normal.sample(&mut rng));
            values
        }
    };
    RewardTable::new(values, 1.0)
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(x)` without overflow on either tail.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Mean pairwise preference loss: `-log sigma(r(x,y_w) - r(x,y_l))` averaged
/// over the triples.
pub fn bt_loss(rewards: &RewardTable, data: &[PreferenceTriple]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "preference data must be nonempty".into(),
        ));
    }
    let mut total = 0.0;
    for t in data {
        let diff = rewards.get(t.prompt, t.chosen) - rewards.get(t.prompt, t.rejected);
        total -= log_sigmoid(diff);
    }
    Ok(total / data.len() as f64)
}

/// Fit a reward table to preference triples by full-batch gradient descent on
/// `bt_loss + l2 * ||r||^2`, starting from the all-zero table.
///
/// The best iterate by total objective is returned, so the result never has a
/// higher `bt_loss` than the zero table. Fitting is deterministic; the seed is
/// accepted for interface uniformity with the other generators and is
/// currently unused.
pub fn bt_fit(
    space: &TaskSpace,
    data: &[PreferenceTriple],
    l2: f64,
    steps: usize,
    lr: f64,
    _seed: RngSeed,
) -> Result<RewardTable> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "preference data must be nonempty".into(),
        ));
    }
    if l2 < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "l2 must be nonnegative, got {l2}"
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lr must be positive, got {lr}"
        )));
    }
    for t in data {
        t.validate(space)?;
    }

    let shape = (space.n_prompts(), space.n_responses());
    let mut values = Array2::<f64>::zeros(shape);
    let objective = |v: &Array2<f64>| -> Result<f64> {
        let table = RewardTable {
            values: v.clone(),
            temperature: 1.0,
        };
        let penalty: f64 = v.iter().map(|r| r * r).sum::<f64>() * l2;
        Ok(bt_loss(&table, data)? + penalty)
    };

    let mut best = values.clone();
    let mut best_obj = objective(&values)?;
    let inv_n = 1.0 / data.len() as f64;
    for step in 0..steps {
        let mut grad = values.mapv(|r| 2.0 * l2 * r);
        for t in data {
            let diff = values[[t.prompt, t.chosen]] - values[[t.prompt, t.rejected]];
            // d(-log sigma(diff))/d diff = sigma(diff) - 1
            let g = (sigmoid(diff) - 1.0) * inv_n;
            grad[[t.prompt, t.chosen]] += g;
            grad[[t.prompt, t.rejected]] -= g;
        }
        values.zip_mut_with(&grad, |v, g| *v -= lr * g);
        let obj = objective(&values)?;
        if !obj.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite fit objective {obj} at step {step} (lr {lr})"
            )));
        }
        if obj < best_obj {
            best_obj = obj;
            best.assign(&values);
        }
    }
    RewardTable::new(best, 1.0)
}
