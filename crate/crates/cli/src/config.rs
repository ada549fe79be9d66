//! Config-file schema: flat `key = value` pairs in one section per module,
//! TOML syntax. Every field has a default, an empty file is a valid config,
//! and validation collects *all* schema violations (with field paths) instead
//! of stopping at the first.
//!
//! The normalized config echoes back out as a valid config file; a run is
//! reconstructible from that echo alone.

use std::fmt::Write as _;
use std::path::Path;

use alignlab::losses::{RlolBaseline, RlolParams};
use alignlab::reward::{RewardKind, RewardTable};
use alignlab::space::{make_space, RefKind, TaskSpace};
use alignlab::trainer::{
    BatchMode, LossSpec, OptimizerKind, PolicyInit, ResponseSampling, TrainConfig,
};
use alignlab::RngSeed;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // [instance]
    pub n_prompts: usize,
    pub n_responses: usize,
    pub ref_kind: String,
    // [reward]
    pub reward_kind: String,
    pub sigma: f64,
    pub gap: f64,
    pub value: f64,
    pub lambda: f64,
    // [train]
    pub loss: String,
    pub optimizer: String,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub batch_mode: String,
    pub response_sampling: String,
    pub init: String,
    pub dpo_beta: f64,
    pub clip_epsilon: f64,
    pub rlol_beta: f64,
    pub rlol_baseline: bool,
    pub divergence_demo: bool,
    pub stop_kl: Option<f64>,
    // [data]
    pub dataset: Option<String>,
    pub batch_file: Option<String>,
    pub weights: Option<Vec<f64>>,
    // [gradcheck]
    pub gc_tolerance: f64,
    pub gc_coords: usize,
    pub gc_seeds: usize,
    // [experiment]
    pub exp_seeds: usize,
    pub exp_batch_sizes: Vec<usize>,
    pub exp_steps: usize,
    pub exp_lr: f64,
    pub estimator_seeds: usize,
    pub plots: bool,
    // [run]
    pub seed: u64,
    pub out: String,
    pub quiet: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_prompts: 3,
            n_responses: 8,
            ref_kind: "dirichlet".into(),
            reward_kind: "gaussian".into(),
            sigma: 1.0,
            gap: 1.0,
            value: 0.0,
            lambda: 1.0,
            loss: "var-exact".into(),
            optimizer: "adam".into(),
            lr: 0.1,
            steps: 2000,
            batch_size: 8,
            eval_every: 100,
            batch_mode: "auto".into(),
            response_sampling: "uniform".into(),
            init: "reference".into(),
            dpo_beta: 0.1,
            clip_epsilon: 0.2,
            rlol_beta: 0.0,
            rlol_baseline: false,
            divergence_demo: false,
            stop_kl: None,
            dataset: None,
            batch_file: None,
            weights: None,
            gc_tolerance: 1e-6,
            gc_coords: 64,
            gc_seeds: 5,
            exp_seeds: 20,
            exp_batch_sizes: vec![2, 4, 8, 16],
            exp_steps: 2000,
            exp_lr: 0.05,
            estimator_seeds: 200,
            plots: false,
            seed: 0,
            out: "out".into(),
            quiet: false,
        }
    }
}

/// All schema violations found in one pass.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.0 {
            writeln!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

struct Walker {
    errors: Vec<String>,
}

impl Walker {
    fn type_name(v: &toml::Value) -> &'static str {
        match v {
            toml::Value::String(_) => "string",
            toml::Value::Integer(_) => "integer",
            toml::Value::Float(_) => "float",
            toml::Value::Boolean(_) => "boolean",
            toml::Value::Datetime(_) => "datetime",
            toml::Value::Array(_) => "array",
            toml::Value::Table(_) => "table",
        }
    }

    fn f64(&mut self, sec: &toml::Table, section: &str, key: &str, out: &mut f64) {
        if let Some(v) = sec.get(key) {
            match v {
                toml::Value::Float(f) => *out = *f,
                toml::Value::Integer(i) => *out = *i as f64,
                other => self.errors.push(format!(
                    "{section}.{key}: expected a number, got {}",
                    Self::type_name(other)
                )),
            }
        }
    }

    fn usize(&mut self, sec: &toml::Table, section: &str, key: &str, out: &mut usize) {
        if let Some(v) = sec.get(key) {
            match v {
                toml::Value::Integer(i) if *i >= 0 => *out = *i as usize,
                toml::Value::Integer(i) => self
                    .errors
                    .push(format!("{section}.{key}: must be nonnegative, got {i}")),
                other => self.errors.push(format!(
                    "{section}.{key}: expected an integer, got {}",
                    Self::type_name(other)
                )),
            }
        }
    }

    fn u64(&mut self, sec: &toml::Table, section: &str, key: &str, out: &mut u64) {
        if let Some(v) = sec.get(key) {
            match v {
                toml::Value::Integer(i) if *i >= 0 => *out = *i as u64,
                toml::Value::Integer(i) => self
                    .errors
                    .push(format!("{section}.{key}: must be nonnegative, got {i}")),
                other => self.errors.push(format!(
                    "{section}.{key}: expected an integer, got {}",
                    Self::type_name(other)
                )),
            }
        }
    }

    fn bool(&mut self, sec: &toml::Table, section: &str, key: &str, out: &mut bool) {
        if let Some(v) = sec.get(key) {
            match v {
                toml::Value::Boolean(b) => *out = *b,
                other => self.errors.push(format!(
                    "{section}.{key}: expected a boolean, got {}",
                    Self::type_name(other)
                )),
            }
        }
    }

    fn string(
        &mut self,
        sec: &toml::Table,
        section: &str,
        key: &str,
        allowed: &[&str],
        out: &mut String,
    ) {
        if let Some(v) = sec.get(key) {
            match v {
                toml::Value::String(s) => {
                    if allowed.is_empty() || allowed.contains(&s.as_str()) {
                        *out = s.clone();
                    } else {
                        self.errors.push(format!(
                            "{section}.{key}: `{s}` is not one of {allowed:?}"
                        ));
                    }
                }
                other => self.errors.push(format!(
                    "{section}.{key}: expected a string, got {}",
                    Self::type_name(other)
                )),
            }
        }
    }

    fn check_known(&mut self, sec: &toml::Table, section: &str, known: &[&str]) {
        for key in sec.keys() {
            if !known.contains(&key.as_str()) {
                self.errors
                    .push(format!("{section}.{key}: unknown field"));
            }
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigErrors> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Config, ConfigErrors> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| ConfigErrors(vec![format!("malformed config: {e}")]))?;
        let mut cfg = Config::default();
        let mut w = Walker { errors: Vec::new() };

        const SECTIONS: [&str; 7] = [
            "instance",
            "reward",
            "train",
            "data",
            "gradcheck",
            "experiment",
            "run",
        ];
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                w.errors.push(format!("{key}: unknown section"));
            }
        }
        let empty = toml::Table::new();
        let section = |name: &str| -> &toml::Table {
            table
                .get(name)
                .and_then(|v| v.as_table())
                .unwrap_or(&empty)
        };
        for name in SECTIONS {
            if let Some(v) = table.get(name) {
                if v.as_table().is_none() {
                    w.errors
                        .push(format!("{name}: expected a section, got a value"));
                }
            }
        }

        let sec = section("instance");
        w.check_known(sec, "instance", &["n_prompts", "n_responses", "ref_kind"]);
        w.usize(sec, "instance", "n_prompts", &mut cfg.n_prompts);
        w.usize(sec, "instance", "n_responses", &mut cfg.n_responses);
        w.string(
            sec,
            "instance",
            "ref_kind",
            &["uniform", "dirichlet"],
            &mut cfg.ref_kind,
        );

        let sec = section("reward");
        w.check_known(sec, "reward", &["kind", "sigma", "gap", "value", "lambda"]);
        w.string(
            sec,
            "reward",
            "kind",
            &["gaussian", "planted", "constant"],
            &mut cfg.reward_kind,
        );
        w.f64(sec, "reward", "sigma", &mut cfg.sigma);
        w.f64(sec, "reward", "gap", &mut cfg.gap);
        w.f64(sec, "reward", "value", &mut cfg.value);
        w.f64(sec, "reward", "lambda", &mut cfg.lambda);

        let sec = section("train");
        w.check_known(
            sec,
            "train",
            &[
                "loss",
                "optimizer",
                "lr",
                "steps",
                "batch_size",
                "eval_every",
                "batch_mode",
                "response_sampling",
                "init",
                "dpo_beta",
                "clip_epsilon",
                "rlol_beta",
                "rlol_baseline",
                "divergence_demo",
                "stop_kl",
            ],
        );
        w.string(
            sec,
            "train",
            "loss",
            &["var-inbatch", "var-exact", "dpo", "rlol", "wsft-custom"],
            &mut cfg.loss,
        );
        w.string(sec, "train", "optimizer", &["adam", "gd"], &mut cfg.optimizer);
        w.f64(sec, "train", "lr", &mut cfg.lr);
        w.usize(sec, "train", "steps", &mut cfg.steps);
        w.usize(sec, "train", "batch_size", &mut cfg.batch_size);
        w.usize(sec, "train", "eval_every", &mut cfg.eval_every);
        w.string(
            sec,
            "train",
            "batch_mode",
            &["auto", "sampled", "full-enum", "prompt-cycle"],
            &mut cfg.batch_mode,
        );
        w.string(
            sec,
            "train",
            "response_sampling",
            &["uniform", "ref"],
            &mut cfg.response_sampling,
        );
        w.string(sec, "train", "init", &["reference", "zero"], &mut cfg.init);
        w.f64(sec, "train", "dpo_beta", &mut cfg.dpo_beta);
        w.f64(sec, "train", "clip_epsilon", &mut cfg.clip_epsilon);
        w.f64(sec, "train", "rlol_beta", &mut cfg.rlol_beta);
        w.bool(sec, "train", "rlol_baseline", &mut cfg.rlol_baseline);
        w.bool(sec, "train", "divergence_demo", &mut cfg.divergence_demo);
        if sec.contains_key("stop_kl") {
            let mut v = 0.0;
            w.f64(sec, "train", "stop_kl", &mut v);
            cfg.stop_kl = Some(v);
        }

        let sec = section("data");
        w.check_known(sec, "data", &["dataset", "batch", "weights"]);
        if sec.contains_key("dataset") {
            let mut s = String::new();
            w.string(sec, "data", "dataset", &[], &mut s);
            cfg.dataset = Some(s);
        }
        if sec.contains_key("batch") {
            let mut s = String::new();
            w.string(sec, "data", "batch", &[], &mut s);
            cfg.batch_file = Some(s);
        }
        if let Some(v) = sec.get("weights") {
            match v.as_array() {
                Some(arr) => {
                    let mut ws = Vec::new();
                    for (i, item) in arr.iter().enumerate() {
                        match item {
                            toml::Value::Float(f) => ws.push(*f),
                            toml::Value::Integer(n) => ws.push(*n as f64),
                            other => w.errors.push(format!(
                                "data.weights[{i}]: expected a number, got {}",
                                Walker::type_name(other)
                            )),
                        }
                    }
                    cfg.weights = Some(ws);
                }
                None => w
                    .errors
                    .push("data.weights: expected an array of numbers".to_string()),
            }
        }

        let sec = section("gradcheck");
        w.check_known(sec, "gradcheck", &["tolerance", "coords", "seeds"]);
        w.f64(sec, "gradcheck", "tolerance", &mut cfg.gc_tolerance);
        w.usize(sec, "gradcheck", "coords", &mut cfg.gc_coords);
        w.usize(sec, "gradcheck", "seeds", &mut cfg.gc_seeds);

        let sec = section("experiment");
        w.check_known(
            sec,
            "experiment",
            &["seeds", "batch_sizes", "steps", "lr", "estimator_seeds", "plots"],
        );
        w.usize(sec, "experiment", "seeds", &mut cfg.exp_seeds);
        if let Some(v) = sec.get("batch_sizes") {
            match v.as_array() {
                Some(arr) => {
                    let mut bs = Vec::new();
                    for (i, item) in arr.iter().enumerate() {
                        match item {
                            toml::Value::Integer(n) if *n >= 1 => bs.push(*n as usize),
                            other => w.errors.push(format!(
                                "experiment.batch_sizes[{i}]: expected a positive integer, got {other}"
                            )),
                        }
                    }
                    cfg.exp_batch_sizes = bs;
                }
                None => w
                    .errors
                    .push("experiment.batch_sizes: expected an array of integers".to_string()),
            }
        }
        w.usize(sec, "experiment", "steps", &mut cfg.exp_steps);
        w.f64(sec, "experiment", "lr", &mut cfg.exp_lr);
        w.usize(sec, "experiment", "estimator_seeds", &mut cfg.estimator_seeds);
        w.bool(sec, "experiment", "plots", &mut cfg.plots);

        let sec = section("run");
        w.check_known(sec, "run", &["seed", "out", "quiet"]);
        w.u64(sec, "run", "seed", &mut cfg.seed);
        w.string(sec, "run", "out", &[], &mut cfg.out);
        w.bool(sec, "run", "quiet", &mut cfg.quiet);

        // Range checks on the normalized values, collected like the rest.
        if cfg.n_prompts < 1 {
            w.errors
                .push("instance.n_prompts: must be >= 1".to_string());
        }
        if cfg.n_responses < 2 {
            w.errors
                .push("instance.n_responses: must be >= 2".to_string());
        }
        if !(cfg.lambda > 0.0) {
            w.errors
                .push(format!("reward.lambda: must be positive, got {}", cfg.lambda));
        }
        if !(cfg.sigma > 0.0) {
            w.errors
                .push(format!("reward.sigma: must be positive, got {}", cfg.sigma));
        }
        if cfg.gap < 0.0 {
            w.errors
                .push(format!("reward.gap: must be nonnegative, got {}", cfg.gap));
        }
        if !(cfg.lr > 0.0) {
            w.errors
                .push(format!("train.lr: must be positive, got {}", cfg.lr));
        }
        if cfg.steps < 1 {
            w.errors.push("train.steps: must be >= 1".to_string());
        }
        if cfg.batch_size < 1 {
            w.errors.push("train.batch_size: must be >= 1".to_string());
        }
        if cfg.eval_every < 1 {
            w.errors.push("train.eval_every: must be >= 1".to_string());
        }
        if !(cfg.clip_epsilon > 0.0 && cfg.clip_epsilon < 1.0) {
            w.errors.push(format!(
                "train.clip_epsilon: must lie in (0, 1), got {}",
                cfg.clip_epsilon
            ));
        }
        if !(cfg.dpo_beta > 0.0) {
            w.errors.push(format!(
                "train.dpo_beta: must be positive, got {}",
                cfg.dpo_beta
            ));
        }
        if cfg.rlol_beta < 0.0 {
            w.errors.push(format!(
                "train.rlol_beta: must be nonnegative, got {}",
                cfg.rlol_beta
            ));
        }
        if cfg.exp_seeds < 1 {
            w.errors
                .push("experiment.seeds: must be >= 1".to_string());
        }
        if cfg.exp_batch_sizes.is_empty() {
            w.errors
                .push("experiment.batch_sizes: must be nonempty".to_string());
        }
        if cfg.loss == "dpo" && cfg.dataset.is_none() {
            w.errors
                .push("data.dataset: required when train.loss = \"dpo\"".to_string());
        }
        if cfg.loss == "wsft-custom" && (cfg.batch_file.is_none() || cfg.weights.is_none()) {
            w.errors.push(
                "data.batch and data.weights: required when train.loss = \"wsft-custom\""
                    .to_string(),
            );
        }

        if w.errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(w.errors))
        }
    }

    /// Self with placeholder values resolved (`batch_mode = "auto"` becomes
    /// the per-loss concrete mode).
    pub fn normalized(&self) -> Config {
        let mut cfg = self.clone();
        cfg.batch_mode = self.resolved_batch_mode();
        cfg
    }

    /// The normalized config as a valid config file, every field explicit.
    pub fn to_echo_text(&self) -> String {
        self.normalized().echo_text_raw()
    }

    fn echo_text_raw(&self) -> String {
        let mut s = String::from("# normalized config echo\n");
        let _ = writeln!(s, "[instance]");
        let _ = writeln!(s, "n_prompts = {}", self.n_prompts);
        let _ = writeln!(s, "n_responses = {}", self.n_responses);
        let _ = writeln!(s, "ref_kind = \"{}\"", self.ref_kind);
        let _ = writeln!(s, "\n[reward]");
        let _ = writeln!(s, "kind = \"{}\"", self.reward_kind);
        let _ = writeln!(s, "sigma = {}", fmt_toml_f64(self.sigma));
        let _ = writeln!(s, "gap = {}", fmt_toml_f64(self.gap));
        let _ = writeln!(s, "value = {}", fmt_toml_f64(self.value));
        let _ = writeln!(s, "lambda = {}", fmt_toml_f64(self.lambda));
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "loss = \"{}\"", self.loss);
        let _ = writeln!(s, "optimizer = \"{}\"", self.optimizer);
        let _ = writeln!(s, "lr = {}", fmt_toml_f64(self.lr));
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "batch_mode = \"{}\"", self.batch_mode);
        let _ = writeln!(s, "response_sampling = \"{}\"", self.response_sampling);
        let _ = writeln!(s, "init = \"{}\"", self.init);
        let _ = writeln!(s, "dpo_beta = {}", fmt_toml_f64(self.dpo_beta));
        let _ = writeln!(s, "clip_epsilon = {}", fmt_toml_f64(self.clip_epsilon));
        let _ = writeln!(s, "rlol_beta = {}", fmt_toml_f64(self.rlol_beta));
        let _ = writeln!(s, "rlol_baseline = {}", self.rlol_baseline);
        let _ = writeln!(s, "divergence_demo = {}", self.divergence_demo);
        if let Some(v) = self.stop_kl {
            let _ = writeln!(s, "stop_kl = {}", fmt_toml_f64(v));
        }
        if self.dataset.is_some() || self.batch_file.is_some() || self.weights.is_some() {
            let _ = writeln!(s, "\n[data]");
            if let Some(d) = &self.dataset {
                let _ = writeln!(s, "dataset = \"{d}\"");
            }
            if let Some(b) = &self.batch_file {
                let _ = writeln!(s, "batch = \"{b}\"");
            }
            if let Some(ws) = &self.weights {
                let items: Vec<String> = ws.iter().map(|v| fmt_toml_f64(*v)).collect();
                let _ = writeln!(s, "weights = [{}]", items.join(", "));
            }
        }
        let _ = writeln!(s, "\n[gradcheck]");
        let _ = writeln!(s, "tolerance = {}", fmt_toml_f64(self.gc_tolerance));
        let _ = writeln!(s, "coords = {}", self.gc_coords);
        let _ = writeln!(s, "seeds = {}", self.gc_seeds);
        let _ = writeln!(s, "\n[experiment]");
        let _ = writeln!(s, "seeds = {}", self.exp_seeds);
        let items: Vec<String> = self.exp_batch_sizes.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "batch_sizes = [{}]", items.join(", "));
        let _ = writeln!(s, "steps = {}", self.exp_steps);
        let _ = writeln!(s, "lr = {}", fmt_toml_f64(self.exp_lr));
        let _ = writeln!(s, "estimator_seeds = {}", self.estimator_seeds);
        let _ = writeln!(s, "plots = {}", self.plots);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = \"{}\"", self.out);
        let _ = writeln!(s, "quiet = {}", self.quiet);
        s
    }

    pub fn ref_kind(&self) -> RefKind {
        match self.ref_kind.as_str() {
            "uniform" => RefKind::Uniform,
            _ => RefKind::RandomDirichlet,
        }
    }

    pub fn reward_kind(&self) -> RewardKind {
        match self.reward_kind.as_str() {
            "planted" => RewardKind::PlantedBest { gap: self.gap },
            "constant" => RewardKind::Constant { value: self.value },
            _ => RewardKind::IidGaussian { sigma: self.sigma },
        }
    }

    pub fn build_instance(&self) -> alignlab::Result<(TaskSpace, RewardTable)> {
        let seed = RngSeed(self.seed);
        let space = make_space(
            self.n_prompts,
            self.n_responses,
            self.ref_kind(),
            seed.derive("space", &[]),
        )?;
        let rewards = alignlab::reward::synth_rewards(
            &space,
            self.reward_kind(),
            seed.derive("rewards", &[]),
        )?
        .with_temperature(self.lambda)?;
        Ok((space, rewards))
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss.as_str() {
            "var-inbatch" => LossSpec::VarInBatch,
            "dpo" => LossSpec::Dpo { beta: self.dpo_beta },
            "rlol" => LossSpec::Rlol(RlolParams {
                epsilon: self.clip_epsilon,
                beta: self.rlol_beta,
                baseline: if self.rlol_baseline {
                    RlolBaseline::RefMean
                } else {
                    RlolBaseline::None
                },
            }),
            "wsft-custom" => LossSpec::WsftCustom,
            _ => LossSpec::VarExact,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.loss_spec(), RngSeed(self.seed).derive("train", &[]));
        cfg.optimizer = match self.optimizer.as_str() {
            "gd" => OptimizerKind::Gd,
            _ => OptimizerKind::default_adam(),
        };
        cfg.lr = self.lr;
        cfg.steps = self.steps;
        cfg.batch_size = self.batch_size;
        cfg.eval_every = self.eval_every;
        let sampling = match self.response_sampling.as_str() {
            "ref" => ResponseSampling::Reference,
            _ => ResponseSampling::Uniform,
        };
        cfg.batch_mode = match self.batch_mode.as_str() {
            "sampled" => BatchMode::Sampled { sampling },
            "full-enum" => BatchMode::FullEnumeration,
            "prompt-cycle" => BatchMode::PromptCycle,
            // "auto": keep the per-loss default from TrainConfig::new.
            _ => cfg.batch_mode,
        };
        cfg.init = match self.init.as_str() {
            "zero" => PolicyInit::Zero,
            _ => PolicyInit::Reference,
        };
        cfg.divergence_demo = self.divergence_demo;
        cfg.stop_kl = self.stop_kl;
        cfg
    }

    /// The resolved batch-mode name for the echo (replaces "auto").
    pub fn resolved_batch_mode(&self) -> String {
        if self.batch_mode != "auto" {
            return self.batch_mode.clone();
        }
        match self.train_config().batch_mode {
            BatchMode::Sampled { .. } => "sampled".to_string(),
            BatchMode::FullEnumeration => "full-enum".to_string(),
            BatchMode::PromptCycle => "prompt-cycle".to_string(),
        }
    }
}

fn fmt_toml_f64(v: f64) -> String {
    // TOML floats need a decimal point or exponent.
    let s = format!("{v}");
    if s.contains('.') || s.contains('e') || s.contains('E') || s.contains("inf") || s.contains("nan")
    {
        s
    } else {
        format!("{s}.0")
    }
}
