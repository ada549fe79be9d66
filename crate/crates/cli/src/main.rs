//! Command-line front end: config-driven entry points for the oracle dump,
//! training runs, gradient checks, and the scenario runners.
//!
//! Exit status contract: 0 on success, 1 on validation errors (unknown
//! command or flag, malformed config, unwritable output), 2 on scenario
//! assertion failures (e.g. a clip-distinction tolerance miss).

// `!(x > 0.0)` guards are load-bearing: they reject NaN, which `x <= 0.0`
// would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::Rng;

use alignlab::experiments::{
    emit_outputs, run_clip_distinction, run_consistency, run_estimator_study,
    run_negative_weight_demo, ConsistencySpec, EmitOptions, EstimatorSpec, InstanceSpec,
    ScenarioResult,
};
use alignlab::losses::{
    dpo_loss, grad_check, rlol_coefficients, var_loss, wsft_loss, GradCheckConfig, RlolParams,
    ZMode,
};
use alignlab::oracle::format_oracle_dump;
use alignlab::policy::TabularPolicy;
use alignlab::space::{load_dataset, parse_batch, sample_batch, uniform_response_matrix, PreferenceTriple};
use alignlab::trainer::{train, TrainData};
use alignlab::RngSeed;

use config::Config;

#[derive(Parser)]
#[command(
    name = "alignlab",
    version,
    about = "Tabular laboratory for reward-weighted SFT alignment objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write exact quantities (Z, optimal policy, objective) for the instance
    Oracle(CommonArgs),
    /// Run the configured training loop; writes records and a checkpoint
    Train(CommonArgs),
    /// Finite-difference gradient checks for every loss kind
    Gradcheck(CommonArgs),
    /// Near-tied-rewards comparison: clipped vs variational convergence
    DemoClip(CommonArgs),
    /// Negative-weight unboundedness demo
    DemoNegweight(CommonArgs),
    /// Batch-size ablation of the in-batch objective
    AblateB(CommonArgs),
    /// Monte-Carlo quality study of the batch-sum normalizer
    EstimatorStudy(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (TOML sections per module); every field has a default
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `run.out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config's `run.seed`)
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output
    #[arg(long)]
    quiet: bool,
}

enum CliError {
    /// Exit 1: bad inputs, malformed config, unwritable paths.
    Validation(String),
    /// Exit 2: a scenario ran but missed its assertion.
    Assertion(String),
}

impl From<alignlab::Error> for CliError {
    fn from(e: alignlab::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Oracle(args) => with_config(args, cmd_oracle),
        Command::Train(args) => with_config(args, cmd_train),
        Command::Gradcheck(args) => with_config(args, cmd_gradcheck),
        Command::DemoClip(args) => with_config(args, cmd_demo_clip),
        Command::DemoNegweight(args) => with_config(args, cmd_demo_negweight),
        Command::AblateB(args) => with_config(args, cmd_ablate_b),
        Command::EstimatorStudy(args) => with_config(args, cmd_estimator_study),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(CliError::Assertion(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}

/// Load + validate the config, apply flag overrides, create the output
/// directory, and echo the normalized config into it before dispatching.
fn with_config(args: &CommonArgs, f: fn(&Config, &Path) -> CliResult) -> CliResult {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path).map_err(|e| CliError::Validation(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.display().to_string();
    }
    cfg.quiet = cfg.quiet || args.quiet;
    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Validation(format!("unwritable output {}: {e}", out_dir.display())))?;
    let echo_path = out_dir.join("config.echo.toml");
    std::fs::write(&echo_path, cfg.to_echo_text())
        .map_err(|e| CliError::Validation(format!("unwritable output {}: {e}", echo_path.display())))?;
    f(&cfg, &out_dir)
}

fn say(cfg: &Config, msg: &str) {
    if !cfg.quiet {
        println!("{msg}");
    }
}

fn write_out(path: &Path, content: String) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Validation(format!("unwritable output {}: {e}", path.display())))
}

fn cmd_oracle(cfg: &Config, out_dir: &Path) -> CliResult {
    let (space, rewards) = cfg.build_instance()?;
    let dump = format_oracle_dump(&space, &rewards)?;
    let path = out_dir.join("oracle_dump.txt");
    write_out(&path, dump)?;
    say(cfg, &format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_train(cfg: &Config, out_dir: &Path) -> CliResult {
    let (space, rewards) = cfg.build_instance()?;
    let train_cfg = cfg.train_config();

    let triples = match &cfg.dataset {
        Some(path) => load_dataset(Path::new(path), &space)?,
        None => Vec::new(),
    };
    let custom_batch = match &cfg.batch_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read {path}: {e}")))?;
            Some(parse_batch(&text, &space)?)
        }
        None => None,
    };
    let data = TrainData {
        triples: &triples,
        custom_batch: custom_batch.as_ref(),
        custom_weights: cfg.weights.as_deref(),
    };

    let report = train(&space, &rewards, &train_cfg, &data)?;
    let ckpt_path = out_dir.join("policy.ckpt");
    report.final_policy.save(&ckpt_path)?;
    let records_path = out_dir.join("run.records");
    report.write_records(&records_path, Some("policy.ckpt"))?;
    let final_rec = report.final_record();
    say(
        cfg,
        &format!(
            "ran {} steps of {}: final loss {:.6e}, KL(opt||policy) {:.6e}, objective {:.6}{}",
            report.steps_run,
            train_cfg.loss.name(),
            final_rec.loss,
            final_rec.kl_opt_policy,
            final_rec.objective,
            if report.diverged { " [diverged]" } else { "" }
        ),
    );
    say(cfg, &format!("wrote {}", records_path.display()));
    say(cfg, &format!("wrote {}", ckpt_path.display()));
    Ok(())
}

fn cmd_gradcheck(cfg: &Config, out_dir: &Path) -> CliResult {
    let (space, rewards) = cfg.build_instance()?;
    let seed = RngSeed(cfg.seed);
    let triples: Vec<PreferenceTriple> = match &cfg.dataset {
        Some(path) => load_dataset(Path::new(path), &space)?,
        None => {
            let mut rng = seed.derive("gradcheck-triples", &[]).rng();
            (0..12)
                .map(|_| {
                    let x = rng.random_range(0..space.n_prompts());
                    let w = rng.random_range(0..space.n_responses());
                    let l = (w + 1 + rng.random_range(0..space.n_responses() - 1))
                        % space.n_responses();
                    PreferenceTriple::new(x, w, l).expect("w != l by construction")
                })
                .collect()
        }
    };

    let mut report_text = String::from("loss,max_rel_error,checked,pass\n");
    let mut all_pass = true;
    let mut messages = Vec::new();
    for loss_name in ["var-inbatch", "var-exact", "wsft", "dpo", "rlol"] {
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for trial in 0..cfg.gc_seeds as u64 {
            let trial_seed = seed.derive("gradcheck", &[trial]);
            let mut rng = trial_seed.rng();
            let logits = Array2::from_shape_fn(
                (space.n_prompts(), space.n_responses()),
                |_| rng.random_range(-2.0..2.0),
            );
            let policy = TabularPolicy::from_logits(logits);
            let batch = sample_batch(
                &space,
                &uniform_response_matrix(&space),
                cfg.batch_size.max(4),
                trial_seed.derive("batch", &[]),
            )?;
            let gc = GradCheckConfig {
                step: 1e-5,
                n_coords: cfg.gc_coords,
                seed: trial_seed.derive("coords", &[]),
            };
            let report = match loss_name {
                "var-inbatch" => grad_check(
                    |p| var_loss(p, &space, &rewards, &batch, ZMode::InBatch),
                    &policy,
                    &gc,
                )?,
                "var-exact" => grad_check(
                    |p| var_loss(p, &space, &rewards, &batch, ZMode::Exact),
                    &policy,
                    &gc,
                )?,
                "wsft" => {
                    let weights: Vec<f64> =
                        (0..batch.len()).map(|_| rng.random_range(-1.0..2.0)).collect();
                    grad_check(|p| wsft_loss(p, &batch, &weights), &policy, &gc)?
                }
                "dpo" => grad_check(
                    |p| dpo_loss(p, space.ref_policy(), &triples, cfg.dpo_beta),
                    &policy,
                    &gc,
                )?,
                "rlol" => {
                    let params = RlolParams {
                        epsilon: cfg.clip_epsilon,
                        beta: cfg.rlol_beta,
                        baseline: alignlab::losses::RlolBaseline::None,
                    };
                    let coeffs = rlol_coefficients(
                        &policy,
                        space.ref_policy(),
                        &space,
                        &rewards,
                        &batch,
                        &params,
                    )?;
                    grad_check(|p| wsft_loss(p, &batch, &coeffs), &policy, &gc)?
                }
                _ => unreachable!(),
            };
            if report.max_rel_error > worst {
                worst = report.max_rel_error;
                if !report.passes(cfg.gc_tolerance) {
                    messages.push(format!("{loss_name} trial {trial}:\n{report}"));
                }
            }
            checked += report.checked;
        }
        let pass = worst < cfg.gc_tolerance;
        all_pass &= pass;
        report_text.push_str(&format!("{loss_name},{worst:e},{checked},{pass}\n"));
        say(
            cfg,
            &format!("{loss_name}: max relative error {worst:.3e} over {checked} coordinates"),
        );
    }
    let path = out_dir.join("gradcheck.csv");
    write_out(&path, report_text)?;
    say(cfg, &format!("wrote {}", path.display()));
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Assertion(format!(
            "gradient check exceeded tolerance {}\n{}",
            cfg.gc_tolerance,
            messages.join("\n")
        )))
    }
}

fn cmd_demo_clip(cfg: &Config, out_dir: &Path) -> CliResult {
    let report = run_clip_distinction()?;
    let pass = report.pass;
    let summary = report.to_summary_text();
    emit_outputs(
        &ScenarioResult::Clip(report),
        out_dir,
        &EmitOptions { plots: cfg.plots },
    )?;
    say(cfg, summary.trim_end());
    if pass {
        Ok(())
    } else {
        Err(CliError::Assertion(
            "clip-distinction targets missed the 1e-3 tolerance".to_string(),
        ))
    }
}

fn cmd_demo_negweight(cfg: &Config, out_dir: &Path) -> CliResult {
    let report = run_negative_weight_demo()?;
    let pass = report.pass;
    let summary = report.to_summary_text();
    emit_outputs(
        &ScenarioResult::NegWeight(report),
        out_dir,
        &EmitOptions { plots: cfg.plots },
    )?;
    say(cfg, summary.trim_end());
    if pass {
        Ok(())
    } else {
        Err(CliError::Assertion(
            "negative-weight demo did not reach its thresholds".to_string(),
        ))
    }
}

fn instance_spec(cfg: &Config) -> InstanceSpec {
    InstanceSpec {
        n_prompts: cfg.n_prompts,
        n_responses: cfg.n_responses,
        ref_kind: cfg.ref_kind(),
        reward: cfg.reward_kind(),
        lambda: cfg.lambda,
    }
}

fn cmd_ablate_b(cfg: &Config, out_dir: &Path) -> CliResult {
    let mut spec = ConsistencySpec::desk_default(RngSeed(cfg.seed));
    spec.instance = instance_spec(cfg);
    spec.n_seeds = cfg.exp_seeds;
    spec.batch_sizes = cfg.exp_batch_sizes.clone();
    spec.steps = cfg.exp_steps;
    spec.lr = cfg.exp_lr;
    spec.out_dir = Some(out_dir.to_path_buf());
    let result = run_consistency(&spec)?;
    let summary = result.to_summary_text();
    emit_outputs(
        &ScenarioResult::Sweep(result),
        out_dir,
        &EmitOptions { plots: cfg.plots },
    )?;
    say(cfg, summary.trim_end());
    Ok(())
}

fn cmd_estimator_study(cfg: &Config, out_dir: &Path) -> CliResult {
    let mut spec = EstimatorSpec::desk_default(RngSeed(cfg.seed));
    spec.instance = instance_spec(cfg);
    spec.batch_sizes = cfg.exp_batch_sizes.clone();
    spec.n_seeds = cfg.estimator_seeds;
    let result = run_estimator_study(&spec)?;
    let summary = result.to_summary_text();
    emit_outputs(
        &ScenarioResult::Sweep(result),
        out_dir,
        &EmitOptions { plots: cfg.plots },
    )?;
    say(cfg, summary.trim_end());
    Ok(())
}
