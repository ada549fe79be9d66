//! Finite prompt/response universes, reference policies, preference datasets,
//! and deterministic sampling.
//!
//! A [`TaskSpace`] is the universe everything else is defined over: `n_prompts`
//! prompt indices, `n_responses` response indices per prompt, and a strictly
//! positive reference policy `pi_ref(y|x)` stored row per prompt. Prompts are
//! always drawn uniformly; response draws come from whatever distribution the
//! caller supplies.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::{Error, Result, RngSeed};

/// Smallest admissible reference probability. Dirichlet rows are floored here
/// and renormalized so importance ratios and `log pi_ref` stay finite.
pub const REF_FLOOR: f64 = 1e-8;

/// How the reference policy rows are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    /// `pi_ref(y|x) = 1/n_responses` everywhere.
    Uniform,
    /// Each row drawn from a flat Dirichlet (all concentrations 1), floored at
    /// [`REF_FLOOR`] and renormalized.
    RandomDirichlet,
}

/// Finite prompt set, response set, and reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpace {
    n_prompts: usize,
    n_responses: usize,
    ref_policy: Array2<f64>,
    log_ref: Array2<f64>,
}

impl TaskSpace {
    /// Build a space from explicit reference rows. Rows must sum to 1 within
    /// 1e-12 and be strictly positive.
    pub fn from_ref_policy(ref_policy: Array2<f64>) -> Result<TaskSpace> {
        let (n_prompts, n_responses) = ref_policy.dim();
        if n_prompts < 1 {
            return Err(Error::InvalidArgument("need at least one prompt".into()));
        }
        if n_responses < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two responses, got {n_responses}"
            )));
        }
        for (x, row) in ref_policy.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "reference row {x} sums to {sum}, expected 1"
                )));
            }
            if let Some((y, &p)) = row.iter().enumerate().find(|(_, &p)| p <= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "reference probability at ({x}, {y}) is {p}, must be positive"
                )));
            }
        }
        let log_ref = ref_policy.mapv(f64::ln);
        Ok(TaskSpace {
            n_prompts,
            n_responses,
            ref_policy,
            log_ref,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn ref_policy(&self) -> &Array2<f64> {
        &self.ref_policy
    }

    /// `pi_ref(y|x)`.
    pub fn ref_prob(&self, x: usize, y: usize) -> f64 {
        self.ref_policy[[x, y]]
    }

    /// `log pi_ref(y|x)`, precomputed at construction.
    pub fn log_ref(&self, x: usize, y: usize) -> f64 {
        self.log_ref[[x, y]]
    }

    pub fn ref_row(&self, x: usize) -> ArrayView1<'_, f64> {
        self.ref_policy.row(x)
    }

    pub fn log_ref_row(&self, x: usize) -> ArrayView1<'_, f64> {
        self.log_ref.row(x)
    }

    pub(crate) fn check_pair(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.n_prompts {
            return Err(Error::OutOfBounds(format!(
                "prompt index {x} >= {}",
                self.n_prompts
            )));
        }
        if y >= self.n_responses {
            return Err(Error::OutOfBounds(format!(
                "response index {y} >= {}",
                self.n_responses
            )));
        }
        Ok(())
    }
}

/// Build a task space with the given reference kind. Deterministic in `seed`.
pub fn make_space(
    n_prompts: usize,
    n_responses: usize,
    ref_kind: RefKind,
    seed: RngSeed,
) -> Result<TaskSpace> {
    if n_prompts < 1 {
        return Err(Error::InvalidArgument("need at least one prompt".into()));
    }
    if n_responses < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two responses (preference pairs are impossible over {n_responses})"
        )));
    }
    let ref_policy = match ref_kind {
        RefKind::Uniform => {
            Array2::from_elem((n_prompts, n_responses), 1.0 / n_responses as f64)
        }
        RefKind::RandomDirichlet => {
            let mut rng = seed.derive("ref-dirichlet", &[]).rng();
            let mut rows = Array2::zeros((n_prompts, n_responses));
            for mut row in rows.rows_mut() {
                // Flat Dirichlet via normalized Exp(1) draws, then floor and
                // renormalize so every entry is strictly positive.
                let mut total = 0.0;
                for p in row.iter_mut() {
                    let u: f64 = rng.random();
                    let g = -(1.0 - u).ln();
                    *p = g;
                    total += g;
                }
                row.mapv_inplace(|g| (g / total).max(REF_FLOOR));
                let sum = row.sum();
                row.mapv_inplace(|p| p / sum);
            }
            rows
        }
    };
    TaskSpace::from_ref_policy(ref_policy)
}

/// One human preference record: `chosen` beat `rejected` on `prompt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreferenceTriple {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
}

impl PreferenceTriple {
    pub fn new(prompt: usize, chosen: usize, rejected: usize) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::InvalidArgument(format!(
                "chosen and rejected must differ, both are {chosen}"
            )));
        }
        Ok(PreferenceTriple {
            prompt,
            chosen,
            rejected,
        })
    }

    pub fn validate(&self, space: &TaskSpace) -> Result<()> {
        space.check_pair(self.prompt, self.chosen)?;
        space.check_pair(self.prompt, self.rejected)?;
        if self.chosen == self.rejected {
            return Err(Error::InvalidArgument(format!(
                "chosen and rejected must differ, both are {}",
                self.chosen
            )));
        }
        Ok(())
    }
}

/// Ordered list of (prompt, response) pairs. Duplicates are permitted and
/// counted with multiplicity everywhere they are summed over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(pairs: Vec<(usize, usize)>, space: &TaskSpace) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        for &(x, y) in &pairs {
            space.check_pair(x, y)?;
        }
        Ok(Batch { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All (x, y) cells in row-major order, each exactly once.
    pub fn full_enumeration(space: &TaskSpace) -> Batch {
        let pairs = (0..space.n_prompts())
            .flat_map(|x| (0..space.n_responses()).map(move |y| (x, y)))
            .collect();
        Batch { pairs }
    }

    /// Every response of one prompt, each exactly once, in index order.
    pub fn enumerate_prompt(space: &TaskSpace, x: usize) -> Result<Batch> {
        space.check_pair(x, 0)?;
        Ok(Batch {
            pairs: (0..space.n_responses()).map(|y| (x, y)).collect(),
        })
    }
}

/// Draw a batch: prompts uniform over the prompt set, responses from the
/// supplied per-prompt distribution. Deterministic given `seed`.
pub fn sample_batch(
    space: &TaskSpace,
    policy_for_responses: &Array2<f64>,
    batch_size: usize,
    seed: RngSeed,
) -> Result<Batch> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if policy_for_responses.dim() != (space.n_prompts(), space.n_responses()) {
        return Err(Error::InvalidArgument(format!(
            "response distribution shape {:?} does not match space ({}, {})",
            policy_for_responses.dim(),
            space.n_prompts(),
            space.n_responses()
        )));
    }
    let mut rng = seed.derive("sample-batch", &[]).rng();
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let x = rng.random_range(0..space.n_prompts());
        let y = sample_index(policy_for_responses.row(x), &mut rng);
        pairs.push((x, y));
    }
    Ok(Batch { pairs })
}

/// Inverse-CDF draw from a probability row.
fn sample_index(probs: ArrayView1<'_, f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Uniform response distribution matrix for a space, for samplers that ignore
/// the reference.
pub fn uniform_response_matrix(space: &TaskSpace) -> Array2<f64> {
    Array2::from_elem(
        (space.n_prompts(), space.n_responses()),
        1.0 / space.n_responses() as f64,
    )
}

/// Parse a preference dataset: one `prompt,chosen,rejected` record per line,
/// base-10 integers, `#` starts a comment line, blank lines are skipped.
/// Indices are checked against `space` and chosen == rejected is rejected;
/// errors name the offending line.
pub fn load_dataset(path: &Path, space: &TaskSpace) -> Result<Vec<PreferenceTriple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, space)
}

/// [`load_dataset`] for in-memory text; line numbers are 1-based.
pub fn parse_dataset(text: &str, space: &TaskSpace) -> Result<Vec<PreferenceTriple>> {
    let mut triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `prompt,chosen,rejected`, got `{raw}`"),
            });
        }
        let parse = |field: &str, name: &str| -> Result<usize> {
            field.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{name} `{field}` is not a base-10 index"),
            })
        };
        let prompt = parse(fields[0], "prompt")?;
        let chosen = parse(fields[1], "chosen")?;
        let rejected = parse(fields[2], "rejected")?;
        let triple = PreferenceTriple {
            prompt,
            chosen,
            rejected,
        };
        triple.validate(space).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("record `{raw}`: {e}"),
        })?;
        triples.push(triple);
    }
    Ok(triples)
}

/// Serialize triples in the dataset file format.
pub fn format_dataset(triples: &[PreferenceTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        let _ = writeln!(out, "{},{},{}", t.prompt, t.chosen, t.rejected);
    }
    out
}

/// Batch dump: the dataset format without the third field.
pub fn format_batch(batch: &Batch) -> String {
    let mut out = String::new();
    for &(x, y) in &batch.pairs {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

/// Parse a batch dump. Same comment and blank-line rules as datasets.
pub fn parse_batch(text: &str, space: &TaskSpace) -> Result<Batch> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `prompt,response`, got `{raw}`"),
            });
        }
        let x = fields[0].parse::<usize>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("prompt `{}` is not a base-10 index", fields[0]),
        })?;
        let y = fields[1].parse::<usize>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("response `{}` is not a base-10 index", fields[1]),
        })?;
        space.check_pair(x, y).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("record `{raw}`: {e}"),
        })?;
        pairs.push((x, y));
    }
    Batch::new(pairs, space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_two_responses() {
        let s = make_space(1, 2, RefKind::Uniform, RngSeed(0)).unwrap();
        assert_eq!(s.ref_row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_is_exactly_quarter() {
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(123)).unwrap();
        assert!(s.ref_policy().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn dirichlet_rows_normalized_and_positive() {
        let s = make_space(3, 8, RefKind::RandomDirichlet, RngSeed(7)).unwrap();
        assert_eq!(s.n_prompts(), 3);
        for x in 0..3 {
            let row = s.ref_row(x);
            assert!((row.sum() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn dirichlet_is_seed_deterministic() {
        let a = make_space(4, 6, RefKind::RandomDirichlet, RngSeed(42)).unwrap();
        let b = make_space(4, 6, RefKind::RandomDirichlet, RngSeed(42)).unwrap();
        assert_eq!(a, b);
        let c = make_space(4, 6, RefKind::RandomDirichlet, RngSeed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_single_response() {
        assert!(make_space(1, 1, RefKind::Uniform, RngSeed(0)).is_err());
        assert!(make_space(0, 2, RefKind::Uniform, RngSeed(0)).is_err());
    }

    #[test]
    fn batch_of_one() {
        let s = make_space(2, 3, RefKind::Uniform, RngSeed(0)).unwrap();
        let b = sample_batch(&s, s.ref_policy(), 1, RngSeed(1)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn degenerate_response_distribution() {
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        let mut det = Array2::zeros((2, 4));
        det[[0, 2]] = 1.0;
        det[[1, 2]] = 1.0;
        let b = sample_batch(&s, &det, 64, RngSeed(5)).unwrap();
        assert!(b.pairs.iter().all(|&(_, y)| y == 2));
    }

    #[test]
    fn same_seed_same_batch() {
        let s = make_space(3, 5, RefKind::RandomDirichlet, RngSeed(9)).unwrap();
        let a = sample_batch(&s, s.ref_policy(), 32, RngSeed(11)).unwrap();
        let b = sample_batch(&s, s.ref_policy(), 32, RngSeed(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_frequencies_match_distribution() {
        // Seeded statistical check: 1e5 draws on one prompt, total variation
        // against the sampling distribution below 0.02.
        let ref_policy = array![[0.05, 0.3, 0.15, 0.2, 0.1, 0.2]];
        let s = TaskSpace::from_ref_policy(ref_policy.clone()).unwrap();
        let n = 100_000;
        let b = sample_batch(&s, s.ref_policy(), n, RngSeed(2024)).unwrap();
        let mut counts = [0usize; 6];
        for &(_, y) in &b.pairs {
            counts[y] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(ref_policy.row(0).iter())
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn dataset_happy_path_and_edge_cases() {
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        assert_eq!(parse_dataset("", &s).unwrap(), vec![]);
        assert_eq!(parse_dataset("# only a comment\n", &s).unwrap(), vec![]);
        let got = parse_dataset("0,1,2\n", &s).unwrap();
        assert_eq!(
            got,
            vec![PreferenceTriple {
                prompt: 0,
                chosen: 1,
                rejected: 2
            }]
        );
    }

    #[test]
    fn dataset_errors_name_the_line() {
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        let err = parse_dataset("0,1,2\n0,3,3\n", &s).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("0,3,3"), "message: {message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_dataset("0,9,1\n", &s).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_dataset("0,foo,1\n", &s).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("foo"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dataset_and_batch_round_trip() {
        let s = make_space(3, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        let triples = vec![
            PreferenceTriple::new(0, 1, 2).unwrap(),
            PreferenceTriple::new(2, 3, 0).unwrap(),
        ];
        let text = format_dataset(&triples);
        assert_eq!(parse_dataset(&text, &s).unwrap(), triples);

        let batch = sample_batch(&s, s.ref_policy(), 10, RngSeed(3)).unwrap();
        let text = format_batch(&batch);
        assert_eq!(parse_batch(&text, &s).unwrap(), batch);
    }

    #[test]
    fn load_dataset_reports_missing_file() {
        let s = make_space(2, 4, RefKind::Uniform, RngSeed(0)).unwrap();
        let err = load_dataset(Path::new("/nonexistent/data.csv"), &s).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn ref_rows_always_normalize(
            n_prompts in 1usize..6,
            n_responses in 2usize..40,
            seed in 0u64..1_000_000,
        ) {
            let s = make_space(n_prompts, n_responses, RefKind::RandomDirichlet, RngSeed(seed))
                .unwrap();
            for x in 0..n_prompts {
                let row = s.ref_row(x);
                proptest::prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
                proptest::prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn sampling_is_reproducible(
            batch_size in 1usize..64,
            seed in 0u64..1_000_000,
        ) {
            let s = make_space(3, 5, RefKind::RandomDirichlet, RngSeed(1)).unwrap();
            let a = sample_batch(&s, s.ref_policy(), batch_size, RngSeed(seed)).unwrap();
            let b = sample_batch(&s, s.ref_policy(), batch_size, RngSeed(seed)).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
