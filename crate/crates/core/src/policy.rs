//! Tabular softmax policy: a logit matrix `theta[x][y]` defines
//! `pi_theta(y|x) = softmax(theta[x])[y]`.
//!
//! Log-probabilities are computed with max-subtraction so rows stay normalized
//! even at logit magnitudes in the hundreds. Responses are atomic outcomes;
//! there is no sequence factorization.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::space::TaskSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Array2<f64>,
}

impl TabularPolicy {
    pub fn from_logits(logits: Array2<f64>) -> TabularPolicy {
        TabularPolicy { logits }
    }

    /// Start at the reference: `theta = log pi_ref`, so the initial
    /// distribution equals `pi_ref` exactly.
    pub fn init_from_reference(space: &TaskSpace) -> TabularPolicy {
        TabularPolicy {
            logits: space.ref_policy().mapv(f64::ln),
        }
    }

    /// All-zero logits: the uniform distribution, exposed for ablations.
    pub fn init_zero(space: &TaskSpace) -> TabularPolicy {
        TabularPolicy {
            logits: Array2::zeros((space.n_prompts(), space.n_responses())),
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array2<f64> {
        &mut self.logits
    }

    /// `log pi_theta(y|x)` via max-subtracted log-softmax.
    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        let row = self.logits.row(x);
        self.logits[[x, y]] - log_sum_exp(row)
    }

    /// Whole log-softmax row for prompt `x`.
    pub fn log_prob_row(&self, x: usize) -> Array1<f64> {
        let row = self.logits.row(x);
        let lse = log_sum_exp(row);
        row.mapv(|v| v - lse)
    }

    /// Probability vector over responses for prompt `x`; sums to 1 within
    /// 1e-12.
    pub fn as_distribution(&self, x: usize) -> Array1<f64> {
        self.log_prob_row(x).mapv(f64::exp)
    }

    /// Full probability matrix, one row per prompt.
    pub fn prob_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.logits.dim());
        for x in 0..self.n_prompts() {
            out.row_mut(x).assign(&self.as_distribution(x));
        }
        out
    }

    /// Write a checkpoint: shape header plus one row of logits per line.
    /// Values use the shortest round-trip decimal form, so load followed by
    /// save reproduces the file byte for byte.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TabularPolicy> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_text(&text)
    }

    pub fn to_checkpoint_text(&self) -> String {
        let mut out = String::from("# policy checkpoint v1\n");
        let _ = writeln!(out, "shape {} {}", self.n_prompts(), self.n_responses());
        for row in self.logits.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_checkpoint_text(text: &str) -> Result<TabularPolicy> {
        let logits = parse_matrix_body(text, "policy checkpoint v1")?;
        Ok(TabularPolicy { logits })
    }
}

/// Parse the shared `# <tag>\nshape R C\n<rows...>` matrix layout. Extra
/// `key value` lines before the rows are returned to the caller via the
/// closure-free two-pass form used by the reward table.
pub(crate) fn parse_matrix_body(text: &str, tag: &str) -> Result<Array2<f64>> {
    let (matrix, _extras) = parse_matrix_with_fields(text, tag, &[])?;
    Ok(matrix)
}

pub(crate) fn parse_matrix_with_fields(
    text: &str,
    tag: &str,
    field_names: &[&str],
) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or_default();
    if header != format!("# {tag}") {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `# {tag}`, got `{header}`"),
        });
    }
    let mut shape: Option<(usize, usize)> = None;
    let mut fields = vec![f64::NAN; field_names.len()];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let first = parts.next().unwrap_or_default();
        if shape.is_none() {
            if first != "shape" {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected `shape R C`, got `{raw}`"),
                });
            }
            let dims: Vec<usize> = parts
                .map(|p| {
                    p.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad shape component `{p}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if dims.len() != 2 || dims[0] == 0 || dims[1] == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "shape needs two positive dimensions".into(),
                });
            }
            shape = Some((dims[0], dims[1]));
            continue;
        }
        if let Some(pos) = field_names.iter().position(|&n| n == first) {
            let value = parts.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("field `{first}` is missing its value"),
            })?;
            fields[pos] = value.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("field `{first}` value `{value}` is not a number"),
            })?;
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|p| {
                p.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad matrix entry `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let (r, c) = shape.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing shape line".into(),
    })?;
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Parse {
            line: 1,
            message: format!("matrix body does not match shape {r} {c}"),
        });
    }
    for (i, &name) in field_names.iter().enumerate() {
        if fields[i].is_nan() {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing field `{name}`"),
            });
        }
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((r, c), flat)
        .expect("shape checked above");
    Ok((matrix, fields))
}

/// Max-subtracted log-sum-exp over a row.
pub(crate) fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{make_space, RefKind};
    use crate::RngSeed;
    use ndarray::array;

    #[test]
    fn uniform_log_prob() {
        let p = TabularPolicy::from_logits(Array2::zeros((1, 4)));
        assert!((p.log_prob(0, 2) - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_logit_softmax() {
        let p = TabularPolicy::from_logits(array![[3.0f64.ln(), 0.0]]);
        assert!((p.log_prob(0, 0) - (3.0f64 / 4.0).ln()).abs() < 1e-15);
        let d = p.as_distribution(0);
        assert!((d[0] - 0.75).abs() < 1e-15);
        assert!((d[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nine_to_one_distribution() {
        let p = TabularPolicy::from_logits(array![[0.0, 9.0f64.ln()]]);
        let d = p.as_distribution(0);
        assert!((d[0] - 0.1).abs() < 1e-15);
        assert!((d[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn saturated_row() {
        // 1 - 1e-20 is not representable below 1.0 in f64; the saturated
        // probability rounds to exactly 1.
        let p = TabularPolicy::from_logits(array![[50.0, 0.0, 0.0, 0.0]]);
        assert!(p.as_distribution(0)[0] >= 1.0 - 1e-20);
    }

    #[test]
    fn row_shift_leaves_log_probs_unchanged() {
        let logits = array![[0.3, -1.2, 2.0, 0.0]];
        let base = TabularPolicy::from_logits(logits.clone());
        let shifted = TabularPolicy::from_logits(logits.mapv(|v| v + 17.5));
        for y in 0..4 {
            assert!((base.log_prob(0, y) - shifted.log_prob(0, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn init_from_reference_matches_ref_exactly() {
        let s = make_space(3, 5, RefKind::RandomDirichlet, RngSeed(21)).unwrap();
        let p = TabularPolicy::init_from_reference(&s);
        for x in 0..3 {
            let d = p.as_distribution(x);
            for y in 0..5 {
                assert!((d[y] - s.ref_prob(x, y)).abs() < 1e-12);
            }
        }
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        let p = TabularPolicy::init_from_reference(&s);
        let row = p.logits().row(0);
        assert!(row.iter().all(|&v| v == row[0]));
    }

    #[test]
    fn rows_stay_normalized_at_large_logits() {
        let p = TabularPolicy::from_logits(array![
            [1000.0, -1000.0, 500.0, 0.0],
            [-1000.0, -999.0, -998.0, -997.0]
        ]);
        for x in 0..2 {
            let sum: f64 = p.as_distribution(x).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {x} sum {sum}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let p = TabularPolicy::from_logits(array![
            [0.1, -2.5e-8, 3.333333333333333],
            [1e300, -1e-300, 0.0]
        ]);
        let text = p.to_checkpoint_text();
        let q = TabularPolicy::from_checkpoint_text(&text).unwrap();
        assert_eq!(p.logits(), q.logits());
        assert_eq!(q.to_checkpoint_text(), text);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let p = TabularPolicy::from_logits(array![[0.25, -1.75], [2.0, 4.0]]);
        p.save(&path).unwrap();
        let q = TabularPolicy::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_malformed_text() {
        assert!(TabularPolicy::from_checkpoint_text("garbage").is_err());
        assert!(
            TabularPolicy::from_checkpoint_text("# policy checkpoint v1\nshape 2 2\n1 2\n").is_err()
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]

        #[test]
        fn shift_invariance_holds_for_random_rows(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..12),
            shift in -100.0f64..100.0,
        ) {
            let n = logits.len();
            let base = TabularPolicy::from_logits(
                Array2::from_shape_vec((1, n), logits.clone()).unwrap(),
            );
            let shifted = TabularPolicy::from_logits(
                Array2::from_shape_vec((1, n), logits.iter().map(|v| v + shift).collect())
                    .unwrap(),
            );
            let a = base.as_distribution(0);
            let b = shifted.as_distribution(0);
            for y in 0..n {
                proptest::prop_assert!((a[y] - b[y]).abs() < 1e-12);
            }
        }

        #[test]
        fn rows_normalize_up_to_kilologit_scale(
            logits in proptest::collection::vec(-1000.0f64..1000.0, 2..12),
        ) {
            let n = logits.len();
            let p = TabularPolicy::from_logits(Array2::from_shape_vec((1, n), logits).unwrap());
            let sum: f64 = p.as_distribution(0).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
