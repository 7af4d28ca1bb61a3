use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmalloc::config::{Method, RunConfig};
use fmalloc::engine::prepare_data;
use fmalloc::{Error, Result};
use fmalloc_cli::pipeline::{self, SweepAxis, SweepSpec, Workspace};

/// Continual learning for encoder-decoder transformers by allocating
/// feed-forward memory cells to tasks.
///
/// Outputs go under $FMALLOC_RUN_DIR (default ./runs).
#[derive(Parser)]
#[command(name = "fmalloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` applied after the file, e.g. `method=ewc`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Redo a stage even if its artifacts exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the general-domain model (cached per configuration).
    Pretrain(Common),
    /// Estimate memory-cell importance and prune the general model.
    Prune(PruneArgs),
    /// Run the continual sequence of the configured method and task order.
    ClRun(Common),
    /// Re-decode every task of a completed run with the final model.
    Evaluate(Common),
    /// Regenerate the metrics of a (possibly partial) run.
    Report(Common),
    /// Run several task orders or hyperparameter values as worker processes.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    /// Shorthand for `--override sparsity=S`.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Shorthand for `--override importance_batches=N`.
    #[arg(long)]
    importance_batches: Option<usize>,
    /// Shorthand for `--override seeds.init=SEED` (seeds the dropout noise).
    #[arg(long)]
    seed: Option<u64>,
}

impl PruneArgs {
    /// The shorthand flags become overrides applied after the explicit ones.
    fn into_common(self) -> Common {
        let mut c = self.common;
        if let Some(s) = self.sparsity {
            c.overrides.push(format!("sparsity={s}"));
        }
        if let Some(n) = self.importance_batches {
            c.overrides.push(format!("importance_batches={n}"));
        }
        if let Some(seed) = self.seed {
            c.overrides.push(format!("seeds.init={seed}"));
        }
        c
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Number of random task orders.
    #[arg(long, conflicts_with_all = ["axis", "values"])]
    orders: Option<usize>,
    /// Seed for drawing the task orders.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hyperparameter to vary: tau_max, sparsity or ewc_alpha.
    #[arg(long, requires = "values")]
    axis: Option<String>,
    /// Comma-separated values for --axis.
    #[arg(long, value_delimiter = ',', requires = "axis")]
    values: Vec<f64>,
    /// Maximum concurrent worker processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&c.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let root = pipeline::run_root();
    match cli.command {
        Cmd::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let ws = Workspace::new(&root, &cfg);
            let bench = prepare_data(&cfg)?;
            pipeline::pretrain(&cfg, &bench, &ws, c.force)?;
            println!("{}", ws.general_dir(&cfg).display());
        }
        Cmd::Prune(p) => {
            let c = p.into_common();
            let cfg = load_config(&c)?;
            let ws = Workspace::new(&root, &cfg);
            let bench = prepare_data(&cfg)?;
            let model = pipeline::pretrain(&cfg, &bench, &ws, false)?;
            let (pruned, _) = pipeline::prune(&cfg, &bench, &model, &ws, c.force)?;
            println!(
                "{} (kept per layer {:?})",
                ws.pruned_dir(&cfg).display(),
                pruned.general.kept_per_layer()
            );
        }
        Cmd::ClRun(c) => {
            let cfg = load_config(&c)?;
            let s = pipeline::cl_run(&cfg, &root, c.force)?;
            println!("{}", Workspace::new(&root, &cfg).run_dir(&cfg).root.display());
            println!(
                "average BLEU {:.2}, final FR {}",
                s.average_bleu.unwrap_or(f64::NAN),
                s.final_forgetting_ratio.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Cmd::Evaluate(c) => {
            let cfg = load_config(&c)?;
            for r in pipeline::evaluate(&cfg, &root)? {
                println!(
                    "task {} {:<12} BLEU {:7.3} (stage {}) identical={}",
                    r.task,
                    r.name,
                    r.bleu,
                    r.stage_bleu.map_or("-".into(), |v| format!("{v:.3}")),
                    r.identical_to_stage.map_or("-".into(), |v| v.to_string())
                );
            }
        }
        Cmd::Report(c) => {
            let cfg = load_config(&c)?;
            let s = pipeline::report(&cfg, &root)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Sweep(a) => {
            let cfg = load_config(&a.common)?;
            let spec = match (a.orders, a.axis) {
                (Some(n), _) => SweepSpec::Orders { n, seed: a.seed },
                (None, Some(axis)) => SweepSpec::Axis {
                    axis: SweepAxis::parse(&axis)?,
                    values: a.values,
                },
                (None, None) => return Err(Error::Config("sweep needs --orders N or --axis/--values".into())),
            };
            if matches!(spec, SweepSpec::Axis { axis: SweepAxis::EwcAlpha, .. }) && cfg.method != Method::Ewc {
                return Err(Error::Config("ewc_alpha sweeps need method=ewc".into()));
            }
            let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            let rows = pipeline::sweep(&cfg, &spec, &root, a.jobs, a.common.force, &exe)?;
            for r in &rows {
                println!(
                    "{:<40} {:>10} ok={} avgBLEU={} FR={}",
                    r.label,
                    r.value,
                    r.ok,
                    r.average_bleu.map_or("-".into(), |v| format!("{v:.2}")),
                    r.final_forgetting_ratio.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            if rows.iter().all(|r| !r.ok) {
                return Err(Error::Training("every sweep value failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
