//! Command-line entry points: training runs, grid evaluation, the
//! estimator validation suite, tabular oracle queries, and plotting.
//! Configs come from a JSON file plus flat dotted-key overrides; unknown
//! keys are rejected by name and the resolved config is echoed to the
//! output directory.

use crate::admrl_loop::{load_latest, run, RunConfig};
use crate::envs::TaskBox;
use crate::error::{AdmrlError, Result};
use crate::gradcheck::{all_passed, render_table, run_all, CheckBudget};
use crate::metrics_io::{
    grid_eval, now_timestamp, ood_model_error, read_report, render_heatmap,
    render_worst_case_curve, GapMetric, GridSpec, OracleCache, Report, ReportMeta,
    REPORT_SCHEMA_VERSION,
};
use crate::oracle::{exact_grad, exact_return, occupancy, GradWrt, SoftmaxPolicy, TabularMdp};
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "admrl",
    about = "Adversarial model-based meta-RL trainer and evaluation tools"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonOpts {
    /// Output directory. Defaults to $ADMRL_OUT_ROOT/<command> when the
    /// variable is set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on internal worker threads (reserved: current kernels are
    /// single-threaded, so any value >= 1 is accepted and recorded).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute (or resume) a training run in the output directory.
    Run {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. --set trpo.kl_limit=0.02 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a finished run on a task grid and write a report.
    Eval {
        /// Run directory holding checkpoints.
        #[arg(long)]
        dir: PathBuf,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 6)]
        grid: usize,
        /// Also evaluate the boundary of the enlarged out-of-distribution box.
        #[arg(long)]
        ood: bool,
        /// Half-width of the out-of-distribution box.
        #[arg(long, default_value_t = 5.0)]
        ood_half_width: f64,
        /// Cumulative adaptation-sample counts to record.
        #[arg(long, value_delimiter = ',', default_values_t = [2000u64, 4000, 6000])]
        adapt: Vec<u64>,
        /// Evaluation rollouts per measurement (minimum 20).
        #[arg(long, default_value_t = 20)]
        n_eval: usize,
        /// Iteration budget for the optimal-return oracle.
        #[arg(long, default_value_t = 300)]
        oracle_budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the estimator validation suite and print a pass/fail table.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reduced sampling budgets (smoke test; pinned tolerances assume
        /// the full budget).
        #[arg(long)]
        quick: bool,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Build a tabular oracle MDP and print its exact solution.
    Oracle {
        /// Seed for the default random oracle instance.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON MDP description (transitions, features, p0, gamma) instead
        /// of a seeded instance.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Task parameters, comma separated.
        #[arg(long, value_delimiter = ',')]
        psi: Option<Vec<f64>>,
        /// Write the solution JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render heatmaps and worst-case curves from a written report.
    Plot {
        /// Path to a report.json produced by `eval`.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

/// Applies `key=value` to a JSON config tree, rejecting keys that do not
/// already exist (every valid key is present in the serialized defaults).
pub fn apply_override(tree: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AdmrlError::Input(format!("override '{spec}' is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = &mut *tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| AdmrlError::Input(format!("config key `{key}` is not nested")))?;
        if !obj.contains_key(*part) {
            return Err(AdmrlError::Input(format!("unknown config key `{key}`")));
        }
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split('.') yields at least one part")
}

/// Loads the base config, applies overrides, and parses with unknown-key
/// rejection.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut tree = match config_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    // Surface file-level unknown keys early, with the key named by serde.
    let _: RunConfig = serde_json::from_value(tree.clone())
        .map_err(|e| AdmrlError::Input(format!("config: {e}")))?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| AdmrlError::Input(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(common: &CommonOpts, command: &str) -> Result<PathBuf> {
    if let Some(out) = &common.out {
        return Ok(out.clone());
    }
    if let Ok(root) = std::env::var("ADMRL_OUT_ROOT") {
        return Ok(PathBuf::from(root).join(command));
    }
    Err(AdmrlError::Input(
        "no output directory: pass --out or set ADMRL_OUT_ROOT".into(),
    ))
}

fn write_json_file(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Grid evaluation of a finished run directory, writing report files and
/// the oracle cache into `out`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_run(
    dir: &Path,
    grid: usize,
    ood: bool,
    ood_half_width: f64,
    adapt: &[u64],
    n_eval: usize,
    oracle_budget: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let state = load_latest(dir)?
        .ok_or_else(|| AdmrlError::Input(format!("no checkpoints under {}", dir.display())))?;
    std::fs::create_dir_all(out)?;
    write_json_file(
        &out.join("eval_config.json"),
        &serde_json::json!({
            "run_dir": dir.display().to_string(),
            "grid": grid,
            "ood": ood,
            "ood_half_width": ood_half_width,
            "adapt": adapt,
            "n_eval": n_eval,
            "oracle_budget": oracle_budget,
            "seed": seed,
        }),
    )?;
    let cache_path = out.join("oracle_cache.json");
    let mut cache =
        if cache_path.exists() { OracleCache::load(&cache_path)? } else { OracleCache::new() };
    let spec = GridSpec::in_distribution(state.config.task_box(), grid);
    let grid_eval_out = grid_eval(&state, &spec, adapt, n_eval, oracle_budget, seed, &mut cache)?;
    let (ood_grid, model_err) = if ood {
        let ood_spec = GridSpec::ood_boundary(
            TaskBox::symmetric(state.config.task_dim, ood_half_width),
            grid,
        );
        let g = grid_eval(&state, &ood_spec, adapt, n_eval, oracle_budget, seed, &mut cache)?;
        let tasks = ood_spec.cells()?;
        let me = ood_model_error(&state, &tasks, 5, seed)?;
        (Some(g), Some(me))
    } else {
        (None, None)
    };
    cache.save(&cache_path)?;
    let report = Report {
        meta: ReportMeta {
            schema_version: REPORT_SCHEMA_VERSION,
            timestamp: now_timestamp(),
            env: state.config.env.clone(),
            seed,
            sampler: state.config.sampler,
            real_steps_trained: state.counter.real_steps,
        },
        grid: grid_eval_out,
        ood: ood_grid,
        model_error_ood: model_err,
    };
    crate::metrics_io::write_report(&report, out)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_plot(report_path: &Path, out: &Path) -> Result<()> {
    let report = read_report(report_path)?;
    std::fs::create_dir_all(out)?;
    render_heatmap(&report.grid, GapMetric::ZeroShot, &out.join("gap_zero_shot.svg"))?;
    for (k, n) in report.grid.adapt_samples.iter().enumerate() {
        render_heatmap(&report.grid, GapMetric::AtSampleIndex(k), &out.join(format!("gap_{n}.svg")))?;
    }
    if let Some(ood) = &report.ood {
        render_heatmap(ood, GapMetric::ZeroShot, &out.join("ood_gap_zero_shot.svg"))?;
        for (k, n) in ood.adapt_samples.iter().enumerate() {
            render_heatmap(ood, GapMetric::AtSampleIndex(k), &out.join(format!("ood_gap_{n}.svg")))?;
        }
    }
    render_worst_case_curve(&report, &out.join("worst_case.svg"))?;
    println!("plots written to {}", out.display());
    Ok(())
}

fn cmd_oracle(
    seed: u64,
    json: Option<&Path>,
    psi: Option<Vec<f64>>,
    out: Option<&Path>,
) -> Result<()> {
    let mdp = match json {
        Some(p) => {
            let raw: TabularMdp = serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| AdmrlError::Input(format!("oracle description: {e}")))?;
            // Revalidate: deserialization bypasses the constructor checks.
            TabularMdp::new(raw.trans, raw.features, raw.p0, raw.gamma)?
        }
        None => TabularMdp::default_oracle(seed),
    };
    let psi = Array1::from_vec(psi.unwrap_or_else(|| vec![1.0; mdp.psi_dim()]));
    if psi.len() != mdp.psi_dim() {
        return Err(AdmrlError::Input(format!(
            "psi has {} components, oracle expects {}",
            psi.len(),
            mdp.psi_dim()
        )));
    }
    let policy = SoftmaxPolicy::for_mdp(&mdp);
    let theta = vec![0.0; mdp.n_states * mdp.n_actions];
    let solution = serde_json::json!({
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.gamma,
        "psi": psi.to_vec(),
        "uniform_policy_return": exact_return(&mdp, &policy, &theta, &psi, 0.0)?,
        "uniform_policy_grad_theta":
            exact_grad(&mdp, &policy, &theta, &psi, 0.0, GradWrt::Theta)?.to_vec(),
        "uniform_policy_grad_psi":
            exact_grad(&mdp, &policy, &theta, &psi, 0.0, GradWrt::Psi)?.to_vec(),
        "occupancy": occupancy(&mdp, &policy, &theta, &psi)?.to_vec(),
    });
    let text = serde_json::to_string_pretty(&solution)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn validate_threads(threads: Option<usize>) -> Result<()> {
    if threads == Some(0) {
        return Err(AdmrlError::Input("--threads must be >= 1".into()));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Run { config, set, seed, common } => {
            validate_threads(common.threads)?;
            let cfg = resolve_config(config.as_deref(), &set, seed)?;
            let out = resolve_out(&common, "run")?;
            let state = run(&cfg, &out)?;
            println!(
                "run complete: {} tasks, {} real steps, output in {}",
                state.records.len(),
                state.counter.real_steps,
                out.display()
            );
            Ok(0)
        }
        Cmd::Eval {
            dir,
            grid,
            ood,
            ood_half_width,
            adapt,
            n_eval,
            oracle_budget,
            seed,
            common,
        } => {
            validate_threads(common.threads)?;
            let out = common.out.clone().unwrap_or_else(|| dir.join("eval"));
            evaluate_run(&dir, grid, ood, ood_half_width, &adapt, n_eval, oracle_budget, seed, &out)?;
            Ok(0)
        }
        Cmd::Gradcheck { seed, quick, json, threads } => {
            validate_threads(threads)?;
            let budget = if quick { CheckBudget::quick() } else { CheckBudget::full() };
            let results = run_all(seed, &budget)?;
            print!("{}", render_table(&results));
            if let Some(p) = json {
                write_json_file(&p, &results)?;
            }
            Ok(if all_passed(&results) { 0 } else { 2 })
        }
        Cmd::Oracle { seed, json, psi, out } => {
            cmd_oracle(seed, json.as_deref(), psi, out.as_deref())?;
            Ok(0)
        }
        Cmd::Plot { report, common } => {
            validate_threads(common.threads)?;
            let out = match (&common.out, report.parent()) {
                (Some(o), _) => o.clone(),
                (None, Some(parent)) => parent.to_path_buf(),
                (None, None) => PathBuf::from("."),
            };
            cmd_plot(&report, &out)?;
            Ok(0)
        }
    }
}

/// Full command dispatch: 0 on success, 1 on input or runtime errors, 2
/// when validation checks fail.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
