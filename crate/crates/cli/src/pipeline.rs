//! Run-directory management: cached pretraining and pruning, continual runs,
//! re-evaluation, reports and sweeps.
//!
//! Layout under the run root (`$FMALLOC_RUN_DIR`, default `runs`):
//!
//! ```text
//! <root>/<name>/general-<fingerprint>/model.ckpt          pretrained model
//! <root>/<name>/general-<fingerprint>/pruned-<fp>/...     general mask + task-0 archive
//! <root>/<name>/<method>_order-<i-j-...>[_<tag>]/         one continual run
//! <root>/<name>/sweeps/<sweep-id>/                        per-value configs and comparison table
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use fmalloc::config::{random_order, Method, RunConfig};
use fmalloc::data::sub_seed;
use fmalloc::engine::{
    evaluate_bleu, mixed_upper_bound, prepare_data, pretrain_general, prune_general, run_sequence, Benchmark, RunDir,
    Start, TrainReport,
};
use fmalloc::metrics::{emit_report, BleuMatrix, CapacityPoint, Summary};
use fmalloc::model::{LayerMasks, Model};
use fmalloc::pruning::{prune_model, GeneralMask, PrunedModel};
use fmalloc::taskmask::MaskArchive;
use fmalloc::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable overriding the output root.
pub const RUN_DIR_ENV: &str = "FMALLOC_RUN_DIR";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        io(dir, fs::create_dir_all(dir))?;
    }
    io(path, fs::write(path, text))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = io(path, fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Short content hash of a serializable value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprint input serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything that determines the pretrained general model.
#[derive(Serialize)]
struct PretrainKey<'a> {
    model: &'a fmalloc::model::ModelConfig,
    general: &'a fmalloc::data::DomainSpec,
    domains: &'a [fmalloc::data::DomainSpec],
    init_seed: u64,
    data_seed: u64,
    pretrain_lr: f64,
    pretrain_max_epochs: usize,
    patience: usize,
    batch_size: usize,
}

/// Everything that additionally determines the pruned model and its archive.
#[derive(Serialize)]
struct PruneKey<'a> {
    pretrain: &'a str,
    sparsity: f64,
    importance_batches: usize,
    batch_size: usize,
    lambda: f64,
    tau_max: f64,
    alpha: f64,
    init_seed: u64,
}

/// Paths of one experiment (`<root>/<name>`).
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path, cfg: &RunConfig) -> Self {
        Self { dir: root.join(&cfg.name) }
    }

    pub fn general_dir(&self, cfg: &RunConfig) -> PathBuf {
        let key = PretrainKey {
            model: &cfg.model,
            general: &cfg.general,
            domains: &cfg.domains,
            init_seed: cfg.seeds.init,
            data_seed: cfg.seeds.data,
            pretrain_lr: cfg.pretrain_lr,
            pretrain_max_epochs: cfg.pretrain_max_epochs,
            patience: cfg.patience,
            batch_size: cfg.batch_size,
        };
        self.dir.join(format!("general-{}", fingerprint(&key)))
    }

    pub fn pruned_dir(&self, cfg: &RunConfig) -> PathBuf {
        let general = self.general_dir(cfg);
        let pretrain = general.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let key = PruneKey {
            pretrain: &pretrain,
            sparsity: cfg.sparsity,
            importance_batches: cfg.importance_batches,
            batch_size: cfg.batch_size,
            lambda: cfg.lambda,
            tau_max: cfg.tau_max,
            alpha: cfg.alpha,
            init_seed: cfg.seeds.init,
        };
        general.join(format!("pruned-{}", fingerprint(&key)))
    }

    pub fn run_dir(&self, cfg: &RunConfig) -> RunDir {
        RunDir::new(self.dir.join(cfg.run_label()))
    }

    pub fn sweep_dir(&self, id: &str) -> PathBuf {
        self.dir.join("sweeps").join(id)
    }
}

/// Loads the cached pretrained model, or trains and caches it.
pub fn pretrain(cfg: &RunConfig, bench: &Benchmark, ws: &Workspace, force: bool) -> Result<Model> {
    let dir = ws.general_dir(cfg);
    let ckpt = dir.join("model.ckpt");
    if ckpt.exists() && !force {
        log::info!("pretrained model found at {}", ckpt.display());
        return Model::load(&ckpt);
    }
    log::info!("pretraining the general model into {}", dir.display());
    let (model, report) = pretrain_general(cfg, bench)?;
    write_json(&dir.join("pretrain.json"), &report)?;
    write_text(&dir.join("pretrain.log"), &(report.log.join("\n") + "\n"))?;
    // the checkpoint goes last: its presence marks the stage complete
    model.save(&ckpt)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ImportanceFile {
    n_samples: usize,
    /// Wall-clock time of importance estimation and pruning.
    #[serde(default)]
    seconds: f64,
    layer_means: Vec<f64>,
    scores: Vec<Vec<f64>>,
}

/// Loads the cached general mask, or estimates importance and prunes.
pub fn prune(cfg: &RunConfig, bench: &Benchmark, model: &Model, ws: &Workspace, force: bool) -> Result<(PrunedModel, MaskArchive)> {
    let dir = ws.pruned_dir(cfg);
    let mask_path = dir.join("general_mask.json");
    if mask_path.exists() && !force {
        log::info!("general mask found at {}", mask_path.display());
        let general = GeneralMask::load(&mask_path)?;
        let archive = MaskArchive::new(cfg.lambda, cfg.tau_max, cfg.alpha, cfg.seeds.init);
        return prune_model(model.clone(), general, archive);
    }
    log::info!("estimating importance into {}", dir.display());
    let start = std::time::Instant::now();
    let (pruned, archive, importance) = prune_general(cfg, bench, model)?;
    write_json(
        &dir.join("importance.json"),
        &ImportanceFile {
            n_samples: importance.n_samples,
            seconds: start.elapsed().as_secs_f64(),
            layer_means: importance.layer_means(),
            scores: importance.scores.clone(),
        },
    )?;
    archive.save(&dir.join("archive.json"))?;
    pruned.general.save(&mask_path)?;
    Ok((pruned, archive))
}

fn completed_summary(run: &RunDir) -> Option<Summary> {
    let s: Summary = read_json(&run.metrics().join("summary.json")).ok()?;
    (!s.partial).then_some(s)
}

/// Wall-clock cost of one continual run, including the cached shared stages
/// it was built on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pretrain_seconds: f64,
    /// Importance estimation and pruning; zero for the baselines.
    pub prune_seconds: f64,
    /// All continual stages including their evaluations.
    pub sequence_seconds: f64,
}

impl Timing {
    pub fn total(&self) -> f64 {
        self.pretrain_seconds + self.prune_seconds + self.sequence_seconds
    }
}

pub fn timing_path(run: &RunDir) -> PathBuf {
    run.metrics().join("timing.json")
}

/// Per-stage training reports of a run, written next to the metrics.
fn stages_path(run: &RunDir) -> PathBuf {
    run.metrics().join("stages.json")
}

/// Runs one continual sequence (pretraining and pruning are reused from the
/// cache). A completed run is left untouched unless `force` is set.
pub fn cl_run(cfg: &RunConfig, root: &Path, force: bool) -> Result<Summary> {
    cfg.validate()?;
    let ws = Workspace::new(root, cfg);
    let run = ws.run_dir(cfg);
    if !force {
        if let Some(s) = completed_summary(&run) {
            log::info!("run {} is complete; use --force to redo it", run.root.display());
            return Ok(s);
        }
    }
    if run.root.exists() {
        io(&run.root, fs::remove_dir_all(&run.root))?;
    }
    let bench = prepare_data(cfg)?;
    let model = pretrain(cfg, &bench, &ws, false)?;
    let start = match cfg.method {
        Method::Fmalloc => {
            let (pruned, archive) = prune(cfg, &bench, &model, &ws, false)?;
            Start::Pruned(pruned, archive)
        }
        _ => Start::Pretrained(model.clone()),
    };
    log::info!("continual run into {}", run.root.display());
    let mut res = run_sequence(cfg, &bench, start, Some(&run))?;
    write_json(&stages_path(&run), &res.reports)?;
    let pretrain_seconds = read_json::<TrainReport>(&ws.general_dir(cfg).join("pretrain.json"))?.seconds;
    let prune_seconds = match cfg.method {
        Method::Fmalloc => read_json::<ImportanceFile>(&ws.pruned_dir(cfg).join("importance.json"))?.seconds,
        _ => 0.0,
    };
    write_json(
        &timing_path(&run),
        &Timing {
            pretrain_seconds,
            prune_seconds,
            sequence_seconds: res.seconds,
        },
    )?;
    if cfg.mixed_upper_bound {
        log::info!("joint training for the saturation-ratio upper bound");
        let mixed = mixed_upper_bound(cfg, &bench, &model)?;
        res.bleu.mixed = Some(mixed);
        res.summary = emit_report(&run.metrics(), &res.bleu, cfg.method.as_str(), res.archive.as_ref(), &res.trace)?;
    }
    Ok(res.summary)
}

fn read_trace(path: &Path) -> Result<Vec<CapacityPoint>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Input(format!("{}: malformed row {l:?}", path.display()));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(CapacityPoint {
                step: f[0].parse().map_err(|_| bad())?,
                stage: f[1].parse().map_err(|_| bad())?,
                epoch: f[2].parse().map_err(|_| bad())?,
                usage: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Regenerates the metrics of a (possibly partial) run from its BLEU matrix,
/// mask archive and capacity trace.
pub fn report(cfg: &RunConfig, root: &Path) -> Result<Summary> {
    let run = Workspace::new(root, cfg).run_dir(cfg);
    let metrics = run.metrics();
    let csv = metrics.join("bleu_matrix.csv");
    if !csv.exists() {
        return Err(Error::State(format!("{} has no BLEU matrix; run cl-run first", run.root.display())));
    }
    let stored = BleuMatrix::from_csv(&io(&csv, fs::read_to_string(&csv))?)?;
    // the task list comes from the configuration so that a truncated matrix
    // still knows how many stages are missing
    let names: Vec<String> = std::iter::once(cfg.general.name.clone())
        .chain(cfg.task_order().iter().map(|&i| cfg.domains[i].name.clone()))
        .collect();
    let mut m = BleuMatrix::new(names);
    for j in 0..stored.n_tasks() {
        for i in 0..=j {
            if let Some(v) = stored.get(i, j) {
                m.set(i, j, v)?;
            }
        }
    }
    let archive = if run.archive().exists() {
        Some(MaskArchive::load(&run.archive())?)
    } else {
        None
    };
    let trace = read_trace(&metrics.join("capacity.csv"))?;
    emit_report(&metrics, &m, cfg.method.as_str(), archive.as_ref(), &trace)
}

/// One task re-evaluated with the final model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: usize,
    pub name: String,
    pub bleu: f64,
    /// BLEU recorded right after the task's own stage.
    pub stage_bleu: Option<f64>,
    /// Decoded output identical, token for token, to the stage-time output.
    pub identical_to_stage: Option<bool>,
}

/// Decodes every task's test set with the final checkpoint (and the task's
/// archived mask for F-MALLOC) and compares with the stage-time outputs.
pub fn evaluate(cfg: &RunConfig, root: &Path) -> Result<Vec<EvalRow>> {
    let ws = Workspace::new(root, cfg);
    let run = ws.run_dir(cfg);
    let summary = completed_summary(&run)
        .ok_or_else(|| Error::State(format!("{} is not a completed run", run.root.display())))?;
    let bench = prepare_data(cfg)?;
    let last = summary.completed_stages - 1;
    let model = Model::load(&run.checkpoint(last))?;
    let archive = match cfg.method {
        Method::Fmalloc => Some(MaskArchive::load(&run.archive())?),
        _ => None,
    };
    let m = BleuMatrix::from_csv(&io(
        &run.metrics().join("bleu_matrix.csv"),
        fs::read_to_string(run.metrics().join("bleu_matrix.csv")),
    )?)?;
    let order = cfg.task_order();
    let mut rows = Vec::new();
    let mut csv = String::from("task,name,bleu,stage_bleu,identical_to_stage\n");
    for task in 0..=last {
        let data = if task == 0 {
            &bench.general
        } else {
            &bench.domains[order[task - 1]]
        };
        let masks = match &archive {
            Some(ar) => {
                let a = ar.get(task)?;
                match cfg.mask_inference {
                    fmalloc::config::MaskInference::Hard => a.binary(),
                    fmalloc::config::MaskInference::Soft => a.soft(),
                }
            }
            None => LayerMasks::ones(&cfg.model),
        };
        let (bleu, hyps) = evaluate_bleu(&model, &data.test, &masks, cfg.beam_size)?;
        let text: String = hyps.iter().map(|h| bench.vocab.decode(h).join(" ") + "\n").collect();
        let stage_out = run.outputs(task, task);
        let identical = stage_out.exists().then(|| fs::read_to_string(&stage_out).is_ok_and(|s| s == text));
        let row = EvalRow {
            task,
            name: data.name().to_string(),
            bleu,
            stage_bleu: m.get(task, task),
            identical_to_stage: identical,
        };
        let _ = writeln!(
            csv,
            "{},{},{:.17},{},{}",
            row.task,
            row.name,
            row.bleu,
            row.stage_bleu.map_or(String::new(), |v| format!("{v:.17}")),
            row.identical_to_stage.map_or(String::new(), |v| v.to_string())
        );
        rows.push(row);
    }
    write_text(&run.metrics().join("final_eval.csv"), &csv)?;
    Ok(rows)
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepSpec {
    /// `n` task orders drawn from `seed`.
    Orders { n: usize, seed: u64 },
    /// One run per value of a numeric hyperparameter.
    Axis { axis: SweepAxis, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TauMax,
    Sparsity,
    EwcAlpha,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tau_max" => Ok(Self::TauMax),
            "sparsity" => Ok(Self::Sparsity),
            "ewc_alpha" => Ok(Self::EwcAlpha),
            _ => Err(Error::Config(format!(
                "sweep axis {s:?}: expected one of tau_max, sparsity, ewc_alpha"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::TauMax => "tau_max",
            Self::Sparsity => "sparsity",
            Self::EwcAlpha => "ewc_alpha",
        }
    }
}

/// `n` task orders for `n_domains` domains, deterministic in `seed`.
pub fn sweep_orders(n_domains: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..n as u64).map(|k| random_order(n_domains, sub_seed(seed, k) | 1)).collect()
}

/// Configurations a sweep runs, each with a label.
pub fn sweep_configs(cfg: &RunConfig, spec: &SweepSpec) -> Result<Vec<(String, RunConfig)>> {
    match spec {
        SweepSpec::Orders { n, seed } => {
            if *n == 0 {
                return Err(Error::Config("--orders must be at least 1".into()));
            }
            Ok(sweep_orders(cfg.domains.len(), *n, *seed)
                .into_iter()
                .map(|order| {
                    let mut c = cfg.clone();
                    c.order = Some(order);
                    (c.run_label(), c)
                })
                .collect())
        }
        SweepSpec::Axis { axis, values } => {
            if values.is_empty() {
                return Err(Error::Config("sweep values must not be empty".into()));
            }
            values
                .iter()
                .map(|&v| {
                    let mut c = cfg.clone();
                    match axis {
                        SweepAxis::TauMax => c.tau_max = v,
                        SweepAxis::Sparsity => c.sparsity = v,
                        SweepAxis::EwcAlpha => c.ewc_alpha = v,
                    }
                    let tag = format!("{}-{v}", axis.key());
                    c.run_tag = Some(match &cfg.run_tag {
                        Some(t) => format!("{t}_{tag}"),
                        None => tag,
                    });
                    c.validate()?;
                    Ok((c.run_label(), c))
                })
                .collect()
        }
    }
}

/// One row of a sweep's comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub value: String,
    pub ok: bool,
    pub error: Option<String>,
    pub average_bleu: Option<f64>,
    pub final_average_bleu: Option<f64>,
    pub final_forgetting_ratio: Option<f64>,
    /// Mean over continual stages of the best validation BLEU.
    pub validation_bleu: Option<f64>,
}

fn validation_bleu(run: &RunDir) -> Option<f64> {
    let reports: Vec<TrainReport> = read_json(&stages_path(run)).ok()?;
    let best: Vec<f64> = reports
        .iter()
        .skip(1)
        .filter_map(|r| r.val_scores.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))))
        .collect();
    (!best.is_empty()).then(|| best.iter().sum::<f64>() / best.len() as f64)
}

fn sweep_id(spec: &SweepSpec, cfg: &RunConfig) -> String {
    match spec {
        SweepSpec::Orders { n, seed } => format!("{}_orders-{n}_seed-{seed}", cfg.method.as_str()),
        SweepSpec::Axis { axis, values } => {
            let v: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            format!("{}_{}-{}", cfg.method.as_str(), axis.key(), v.join("-"))
        }
    }
}

/// Runs every configuration of a sweep as a separate `cl-run` worker process
/// (at most `jobs` at once) and writes `table.csv`/`table.json` to the sweep
/// directory. A failing value is recorded and does not stop the others.
pub fn sweep(cfg: &RunConfig, spec: &SweepSpec, root: &Path, jobs: usize, force: bool, exe: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let configs = sweep_configs(cfg, spec)?;
    let ws = Workspace::new(root, cfg);
    let dir = ws.sweep_dir(&sweep_id(spec, cfg));
    // shared stages run once here so that workers only read the cache
    let bench = prepare_data(cfg)?;
    let model = pretrain(cfg, &bench, &ws, false)?;
    for (_, c) in &configs {
        if c.method == Method::Fmalloc {
            prune(c, &bench, &model, &ws, false)?;
        }
    }
    let jobs = jobs.max(1);
    let mut pending: Vec<(usize, PathBuf)> = Vec::new();
    for (i, (label, c)) in configs.iter().enumerate() {
        let path = dir.join("configs").join(format!("{label}.json"));
        write_text(&path, &c.to_json())?;
        pending.push((i, path));
    }
    pending.reverse();
    let mut running: Vec<(usize, Child)> = Vec::new();
    let mut status: Vec<Option<std::result::Result<(), String>>> = vec![None; configs.len()];
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((i, path)) = pending.pop() else { break };
            let mut cmd = Command::new(exe);
            cmd.arg("cl-run").arg("--config").arg(&path).env(RUN_DIR_ENV, root);
            if force {
                cmd.arg("--force");
            }
            log::info!("sweep: starting {}", configs[i].0);
            match cmd.spawn() {
                Ok(child) => running.push((i, child)),
                Err(e) => status[i] = Some(Err(format!("could not start worker: {e}"))),
            }
        }
        if running.is_empty() {
            continue;
        }
        let (i, mut child) = running.remove(0);
        let result = match child.wait() {
            Ok(s) if s.success() => Ok(()),
            Ok(s) => Err(format!("worker exited with {s}")),
            Err(e) => Err(format!("worker wait failed: {e}")),
        };
        if let Err(e) = &result {
            log::error!("sweep: {} failed: {e}", configs[i].0);
        }
        status[i] = Some(result);
    }
    let rows: Vec<SweepRow> = configs
        .iter()
        .zip(status)
        .map(|((label, c), st)| {
            let run = ws.run_dir(c);
            let value = match spec {
                SweepSpec::Orders { .. } => c.task_order().iter().map(|i| i.to_string()).collect::<Vec<_>>().join("-"),
                SweepSpec::Axis { axis, .. } => match axis {
                    SweepAxis::TauMax => c.tau_max.to_string(),
                    SweepAxis::Sparsity => c.sparsity.to_string(),
                    SweepAxis::EwcAlpha => c.ewc_alpha.to_string(),
                },
            };
            let summary = completed_summary(&run);
            let error = match st {
                Some(Err(e)) => Some(e),
                _ if summary.is_none() => Some("run did not complete".to_string()),
                _ => None,
            };
            SweepRow {
                label: label.clone(),
                value,
                ok: error.is_none(),
                error,
                average_bleu: summary.as_ref().and_then(|s| s.average_bleu),
                final_average_bleu: summary.as_ref().and_then(|s| s.final_average_bleu),
                final_forgetting_ratio: summary.as_ref().and_then(|s| s.final_forgetting_ratio),
                validation_bleu: validation_bleu(&run),
            }
        })
        .collect();
    write_json(&dir.join("table.json"), &rows)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut csv = String::from("label,value,ok,average_bleu,final_average_bleu,final_forgetting_ratio,validation_bleu\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.label,
            r.value,
            r.ok,
            opt(r.average_bleu),
            opt(r.final_average_bleu),
            opt(r.final_forgetting_ratio),
            opt(r.validation_bleu)
        );
    }
    write_text(&dir.join("table.csv"), &csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let a = RunConfig::default();
        let ws = Workspace::new(Path::new("/r"), &a);
        let b = a.with_overrides(&["method=ewc", "lr=0.5"]).unwrap();
        // continual-stage settings do not touch the pretraining cache
        assert_eq!(ws.general_dir(&a), ws.general_dir(&b));
        assert_eq!(ws.pruned_dir(&a), ws.pruned_dir(&b));
        let c = a.with_overrides(&["sparsity=0.4"]).unwrap();
        assert_eq!(ws.general_dir(&a), ws.general_dir(&c));
        assert_ne!(ws.pruned_dir(&a), ws.pruned_dir(&c));
        let d = a.with_overrides(&["seeds.init=9"]).unwrap();
        assert_ne!(ws.general_dir(&a), ws.general_dir(&d));
        assert_eq!(fingerprint(&[1, 2]), fingerprint(&[1, 2]));
        assert_eq!(fingerprint(&[1, 2]).len(), 16);
    }

    #[test]
    fn sweep_orders_are_deterministic_permutations() {
        let a = sweep_orders(5, 5, 7);
        assert_eq!(a, sweep_orders(5, 5, 7));
        assert_ne!(a, sweep_orders(5, 5, 8));
        for o in &a {
            let mut s = o.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn axis_sweep_tags_runs() {
        let cfg = RunConfig::default();
        let spec = SweepSpec::Axis {
            axis: SweepAxis::TauMax,
            values: vec![50.0, 400.0],
        };
        let runs = sweep_configs(&cfg, &spec).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].1.tau_max, 50.0);
        assert!(runs[0].0.ends_with("_tau_max-50"), "{}", runs[0].0);
        assert_ne!(runs[0].0, runs[1].0);
        let bad = SweepSpec::Axis {
            axis: SweepAxis::Sparsity,
            values: vec![1.5],
        };
        assert!(sweep_configs(&cfg, &bad).unwrap_err().is_config());
        assert!(SweepAxis::parse("lr").unwrap_err().is_config());
        let empty = SweepSpec::Orders { n: 0, seed: 1 };
        assert!(sweep_configs(&cfg, &empty).is_err());
    }
}
