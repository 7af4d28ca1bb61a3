//! Pretraining, pruning, continual task training (F-MALLOC and the
//! Seq-finetune / EWC baselines) and multi-stage evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{MaskInference, Method, RunConfig};
use crate::data::{
    batch_iter, build_vocab, gen_domain_corpus, sequential_batches, sub_seed, Batch, DomainSpec, EncodedPair,
    Vocabulary,
};
use crate::decode::decode_corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::metrics::{corpus_bleu, emit_report, BleuMatrix, CapacityPoint, Summary};
use crate::model::{Dropout, DropoutMode, LayerMasks, Model};
use crate::optim::{Adam, AdamConfig};
use crate::pruning::{binarize_importance, estimate_importance, prune_model, ImportanceVector, PrunedModel};
use crate::taskmask::{init_task_embedding, mask_gradients, AnnealSchedule, MaskArchive, TaskEmbedding};

/// Sentences decoded together during evaluation.
const DECODE_CHUNK: usize = 64;

/// One domain's encoded splits.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<EncodedPair>,
    pub dev: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

impl DomainData {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

/// All corpora of a run, encoded with one shared vocabulary.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub vocab: Vocabulary,
    pub general: DomainData,
    pub domains: Vec<DomainData>,
}

/// Generates every corpus from the data seed and checks the model's
/// vocabulary size against the data.
pub fn prepare_data(cfg: &RunConfig) -> Result<Benchmark> {
    let specs: Vec<&DomainSpec> = std::iter::once(&cfg.general).chain(&cfg.domains).collect();
    let corpora = specs
        .iter()
        .enumerate()
        .map(|(i, s)| gen_domain_corpus(s, sub_seed(cfg.seeds.data, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let vocab = build_vocab(&corpora.iter().collect::<Vec<_>>())?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model.vocab_size: the corpora need {} (4 reserved + {} symbols), config says {}",
            vocab.len(),
            vocab.len() - 4,
            cfg.model.vocab_size
        )));
    }
    let mut data: Vec<DomainData> = corpora
        .iter()
        .zip(&specs)
        .map(|(c, s)| DomainData {
            spec: (*s).clone(),
            train: vocab.encode_all(&c.train),
            dev: vocab.encode_all(&c.dev),
            test: vocab.encode_all(&c.test),
        })
        .collect();
    let general = data.remove(0);
    Ok(Benchmark {
        vocab,
        general,
        domains: data,
    })
}

/// Outcome of one early-stopped training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Validation score per epoch (BLEU, or negative loss for pretraining).
    pub val_scores: Vec<f64>,
    pub steps: usize,
    pub final_train_loss: f64,
    pub seconds: f64,
    #[serde(skip)]
    pub log: Vec<String>,
}

fn row(v: &[f64]) -> Tensor {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

fn check_loss(loss: f64, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!(
            "{what}: loss became {loss} at step {step}; lower the learning rate or check the data"
        )))
    }
}

/// Applies Adam updates for every parameter that has a gradient.
fn apply_grads(model: &mut Model, adam: &mut Adam, grads: &[Option<Tensor>]) {
    adam.tick();
    let ids: Vec<_> = model.param_ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        if let Some(g) = g {
            let u = adam.update(id.index(), g);
            model.apply_update(id, &u);
        }
    }
}

fn ce_graph(
    model: &Model,
    g: &mut Graph,
    batch: &Batch,
    masks: &[NodeId],
    drop: &mut Dropout,
) -> Result<(crate::model::Bound, NodeId)> {
    let bound = model.bind(g);
    let logits = model.forward_graph(g, &bound, batch, masks, drop)?;
    let loss = g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_weight);
    Ok((bound, loss))
}

/// Mean validation cross-entropy (dropout off).
pub fn validation_loss(model: &Model, pairs: &[EncodedPair], masks: &LayerMasks, batch_size: usize) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0.0);
    for b in sequential_batches(pairs, batch_size) {
        let tokens = b.n_tokens();
        nll += model.loss(&b, masks, &mut Dropout::off())? * tokens;
        n += tokens;
    }
    Ok(nll / n)
}

/// Decodes `pairs` and scores them against their targets.
pub fn evaluate_bleu(model: &Model, pairs: &[EncodedPair], masks: &LayerMasks, beam: usize) -> Result<(f64, Vec<Vec<usize>>)> {
    let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let hyps = decode_corpus(model, &srcs, masks, beam, DECODE_CHUNK)?;
    Ok((corpus_bleu(&hyps, &refs)?.bleu, hyps))
}

/// Per-sequence token accuracy under teacher forcing (argmax == target).
pub fn token_accuracy(model: &Model, pairs: &[EncodedPair], masks: &LayerMasks) -> Result<f64> {
    let (mut hit, mut n) = (0.0, 0.0);
    for b in sequential_batches(pairs, 64) {
        let p = model.forward(&b, masks, &mut Dropout::off())?;
        for (r, (&w, &t)) in p.weights.iter().zip(&b.tgt_out).enumerate() {
            if w == 0.0 {
                continue;
            }
            let best = p
                .log_probs
                .row(r)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            hit += (best == t) as u8 as f64;
            n += 1.0;
        }
    }
    Ok(hit / n)
}

/// Validation result of one epoch. Epochs compare by `score`, ties broken by
/// lower `loss` (a BLEU of exactly 0 is common before any token is right).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub score: f64,
    pub loss: f64,
}

impl Validation {
    fn improves_on(&self, other: &Validation) -> bool {
        self.score > other.score || (self.score == other.score && self.loss < other.loss)
    }
}

/// Epoch loop with early stopping: keeps the state with the best validation
/// result and stops after `patience` epochs without improvement.
fn early_stopping<S: Clone>(
    max_epochs: usize,
    patience: usize,
    state: S,
    report: &mut TrainReport,
    mut epoch: impl FnMut(&mut S, usize, &mut TrainReport) -> Result<Validation>,
) -> Result<S> {
    let mut state = state;
    let mut best: Option<(Validation, S)> = None;
    let mut since = 0;
    for e in 0..max_epochs {
        let v = epoch(&mut state, e, report)?;
        report.val_scores.push(v.score);
        report.epochs_run = e + 1;
        if best.as_ref().is_none_or(|(b, _)| v.improves_on(b)) {
            best = Some((v, state.clone()));
            report.best_epoch = e + 1;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                break;
            }
        }
    }
    Ok(best.map(|(_, s)| s).unwrap_or(state))
}

fn epoch_seed(cfg: &RunConfig, stream: u64, epoch: usize) -> u64 {
    sub_seed(cfg.seeds.data, stream << 20 | epoch as u64)
}

fn step_seed(cfg: &RunConfig, stream: u64, step: usize) -> u64 {
    sub_seed(cfg.seeds.init ^ 0xD80F_0u64, stream << 32 | step as u64)
}

/// Data stream ids: 0 = general, 1 + i = domain i, 1000 = joint training.
fn domain_stream(i: usize) -> u64 {
    1 + i as u64
}
const JOINT_STREAM: u64 = 1000;

/// Trains every parameter on the general corpus, early-stopped on
/// validation loss. `pretrain_max_epochs = 0` returns the initialized model.
pub fn pretrain_general(cfg: &RunConfig, bench: &Benchmark) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let mut model = Model::new(cfg.model.clone(), cfg.seeds.init)?;
    model.set_trainable(|_| true);
    let ones = LayerMasks::ones(&cfg.model);
    let mut report = TrainReport::default();
    let state = (model, Adam::new(AdamConfig::with_lr(cfg.pretrain_lr)), 0usize);
    let (mut model, _, _) = early_stopping(cfg.pretrain_max_epochs, cfg.patience, state, &mut report, |st, epoch, rep| {
        let (model, adam, step) = st;
        let batches = batch_iter(&bench.general.train, cfg.batch_size, epoch_seed(cfg, 0, epoch))?;
        let mut total = 0.0;
        for batch in &batches {
            *step += 1;
            let mut g = Graph::new();
            let masks = ones.to_nodes(&mut g);
            let mut drop = Dropout::new(DropoutMode::All, cfg.model.dropout_p, step_seed(cfg, 0, *step));
            let (bound, loss) = ce_graph(model, &mut g, batch, &masks, &mut drop)?;
            let value = g.scalar(loss);
            check_loss(value, "pretraining", *step)?;
            total += value;
            let mut grads = g.backward(loss)?;
            apply_grads(model, adam, &bound.collect(&mut grads));
        }
        let val = validation_loss(model, &bench.general.dev, &ones, 64)?;
        rep.steps = *step;
        rep.final_train_loss = total / batches.len() as f64;
        rep.log.push(format!(
            "epoch={} step={} train_loss={:.6} val_loss={val:.6}",
            epoch + 1,
            step,
            rep.final_train_loss
        ));
        log::info!("pretrain {}", rep.log.last().unwrap());
        Ok(Validation { score: -val, loss: val })
    })?;
    model.set_trainable(|_| false);
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Importance estimation on the general dev split (held out from
/// pretraining) followed by per-layer binarization at `cfg.sparsity`.
pub fn prune_general(cfg: &RunConfig, bench: &Benchmark, model: &Model) -> Result<(PrunedModel, MaskArchive, ImportanceVector)> {
    let seed = sub_seed(cfg.seeds.init, 0x1A9);
    let importance = estimate_importance(model, &bench.general.dev, cfg.batch_size, cfg.importance_batches, seed)?;
    let mut general = binarize_importance(&importance, cfg.sparsity)?;
    general.seed = seed;
    let archive = MaskArchive::new(cfg.lambda, cfg.tau_max, cfg.alpha, cfg.seeds.init);
    let (pruned, archive) = prune_model(model.clone(), general, archive)?;
    Ok((pruned, archive, importance))
}

/// Mask a past task is evaluated with.
fn task_masks(cfg: &RunConfig, archive: &MaskArchive, task: usize) -> Result<LayerMasks> {
    let m = archive.get(task)?;
    Ok(match cfg.mask_inference {
        MaskInference::Hard => m.binary(),
        MaskInference::Soft => m.soft(),
    })
}

fn usage_with(readonly: &LayerMasks, current: &LayerMasks) -> f64 {
    let (mut used, mut n) = (0.0, 0.0);
    for (a, b) in readonly.0.iter().zip(&current.0) {
        for (&x, &y) in a.iter().zip(b) {
            used += x.max(y);
            n += 1.0;
        }
    }
    used / n
}

/// Result of training one F-MALLOC task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub embedding: TaskEmbedding,
    pub report: TrainReport,
    pub trace: Vec<CapacityPoint>,
}

/// Trains task `task_id` (>= 1) with a learnable mask over writable cells;
/// on convergence the mask is archived. `step_offset` numbers the capacity
/// trace globally.
pub fn train_task(
    cfg: &RunConfig,
    model: &mut Model,
    archive: &mut MaskArchive,
    task_id: usize,
    domain_index: usize,
    data: &DomainData,
    step_offset: usize,
) -> Result<TaskOutcome> {
    let start = Instant::now();
    let readonly = archive.aggregate_previous(task_id)?;
    let n_cells = cfg.model.n_cells() as f64;
    let used: f64 = readonly.0.iter().flatten().sum();
    if used >= n_cells {
        log::warn!("task {task_id}: every memory cell is read-only; only the task mask can change");
    }
    let general = archive.get(0)?.binary();
    let embedding = init_task_embedding(task_id, &general, cfg.alpha, sub_seed(cfg.seeds.init, 0xE0 + task_id as u64))?;
    model.train_cells_only();
    let stream = domain_stream(domain_index);
    let n_params = model.params().len();
    let lambda = cfg.lambda;
    let final_tau = 1.0 / cfg.tau_max;
    let inference = |e: &TaskEmbedding| -> Result<LayerMasks> {
        let gates = e.gates(final_tau)?;
        Ok(match cfg.mask_inference {
            MaskInference::Hard => LayerMasks(
                gates
                    .0
                    .iter()
                    .map(|l| l.iter().map(|&g| if g >= lambda { 1.0 } else { 0.0 }).collect())
                    .collect(),
            ),
            MaskInference::Soft => gates,
        })
    };
    let binary = |e: &TaskEmbedding| -> Result<LayerMasks> {
        let gates = e.gates(final_tau)?;
        Ok(LayerMasks(
            gates
                .0
                .iter()
                .map(|l| l.iter().map(|&g| if g >= lambda { 1.0 } else { 0.0 }).collect())
                .collect(),
        ))
    };
    let mut report = TrainReport::default();
    let mut trace = Vec::new();
    let state = (model.clone(), embedding, Adam::new(AdamConfig::with_lr(cfg.lr)), 0usize);
    let (best_model, best_emb, _, _) = early_stopping(cfg.max_epochs, cfg.patience, state, &mut report, |st, epoch, rep| {
        let (model, emb, adam, step) = st;
        let batches = batch_iter(&data.train, cfg.batch_size, epoch_seed(cfg, stream, epoch))?;
        let schedule = AnnealSchedule::new(cfg.tau_max, batches.len())?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            *step += 1;
            let tau = schedule.tau(b + 1);
            let mut g = Graph::new();
            let e_nodes: Vec<NodeId> = emb.layers.iter().map(|e| g.leaf(row(e), true)).collect();
            let m_nodes: Vec<NodeId> = e_nodes.iter().map(|&e| g.gate(e, tau)).collect();
            let mut drop = Dropout::new(DropoutMode::All, cfg.model.dropout_p, step_seed(cfg, stream, *step));
            let (bound, loss) = ce_graph(model, &mut g, batch, &m_nodes, &mut drop)?;
            let value = g.scalar(loss);
            check_loss(value, &format!("task {task_id}"), *step)?;
            total += value;
            let mut grads = g.backward(loss)?;
            let e_grads: Vec<Option<Tensor>> = e_nodes.iter().map(|&n| grads.take(n)).collect();
            let mut p_grads = bound.collect(&mut grads);
            mask_gradients(model, &mut p_grads, &readonly);
            apply_grads(model, adam, &p_grads);
            for (l, eg) in e_grads.iter().enumerate() {
                if let Some(eg) = eg {
                    let u = adam.update(n_params + l, eg);
                    for (v, d) in emb.layers[l].iter_mut().zip(u.iter()) {
                        *v -= d;
                    }
                }
            }
            if *step % 10 == 0 || b + 1 == batches.len() {
                let usage = usage_with(&readonly, &binary(emb)?);
                rep.log.push(format!(
                    "step={} epoch={} loss={value:.6} tau={tau:.6e} capacity={usage:.6}",
                    step_offset + *step,
                    epoch + 1
                ));
            }
        }
        let masks = inference(emb)?;
        let (bleu, _) = evaluate_bleu(model, &data.dev, &masks, 1)?;
        let val_loss = validation_loss(model, &data.dev, &masks, 64)?;
        let usage = usage_with(&readonly, &binary(emb)?);
        trace.push(CapacityPoint {
            step: step_offset + *step,
            stage: task_id,
            epoch: epoch + 1,
            usage,
        });
        rep.steps = *step;
        rep.final_train_loss = total / batches.len() as f64;
        rep.log.push(format!(
            "epoch={} train_loss={:.6} val_loss={val_loss:.6} val_bleu={bleu:.4} capacity={usage:.6}",
            epoch + 1,
            rep.final_train_loss
        ));
        log::info!("task {task_id} {}", rep.log.last().unwrap());
        Ok(Validation { score: bleu, loss: val_loss })
    })?;
    *model = best_model;
    model.set_trainable(|_| false);
    archive.archive_mask(&best_emb, final_tau)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(TaskOutcome {
        embedding: best_emb,
        report,
        trace,
    })
}

/// Accumulated diagonal Fisher information with its anchor parameters.
#[derive(Debug, Clone, Default)]
pub struct FisherState {
    /// Indexed like `Model::params`; `None` for parameters never trained.
    pub fisher: Vec<Option<Tensor>>,
    pub anchor: Option<Vec<Tensor>>,
    pub n_tasks: usize,
}

impl FisherState {
    /// Adds the weighted mean of squared gradients to the accumulation.
    pub fn accumulate(&mut self, weighted_grads: impl IntoIterator<Item = (f64, Vec<Option<Tensor>>)>) -> Result<()> {
        let mut sum: Vec<Option<Tensor>> = Vec::new();
        let mut total = 0.0;
        for (w, grads) in weighted_grads {
            if sum.is_empty() {
                sum = vec![None; grads.len()];
            }
            total += w;
            for (s, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    let sq = g.mapv(|v| w * v * v);
                    match s {
                        Some(s) => *s += &sq,
                        None => *s = Some(sq),
                    }
                }
            }
        }
        if total <= 0.0 {
            return Err(Error::Input("Fisher estimate needs at least one batch".into()));
        }
        if self.fisher.len() < sum.len() {
            self.fisher.resize(sum.len(), None);
        }
        for (f, s) in self.fisher.iter_mut().zip(sum) {
            if let Some(s) = s {
                let mean = s / total;
                match f {
                    Some(f) => *f += &mean,
                    None => *f = Some(mean),
                }
            }
        }
        self.n_tasks += 1;
        Ok(())
    }
}

/// `α Σ F (θ - θ*)²` over trainable parameters.
pub fn ewc_penalty(model: &Model, fisher: &FisherState, ewc_alpha: f64) -> Result<f64> {
    let anchor = fisher
        .anchor
        .as_ref()
        .ok_or_else(|| Error::State("EWC penalty needs an anchored Fisher state".into()))?;
    let mut total = 0.0;
    for ((p, f), a) in model.params().iter().zip(&fisher.fisher).zip(anchor) {
        if let (true, Some(f)) = (p.trainable, f) {
            total += ndarray::Zip::from(&p.value)
                .and(f)
                .and(a)
                .fold(0.0, |acc, &t, &f, &a| acc + f * (t - a) * (t - a));
        }
    }
    Ok(ewc_alpha * total)
}

/// Gradient of `ewc_penalty`: `2 α F (θ - θ*)` for trainable parameters.
pub fn ewc_penalty_gradient(model: &Model, fisher: &FisherState, ewc_alpha: f64) -> Result<Vec<Option<Tensor>>> {
    let anchor = fisher
        .anchor
        .as_ref()
        .ok_or_else(|| Error::State("EWC penalty needs an anchored Fisher state".into()))?;
    Ok(model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| match (p.trainable, fisher.fisher.get(i).and_then(|f| f.as_ref())) {
            (true, Some(f)) => {
                let mut g = &p.value - &anchor[i];
                g.zip_mut_with(f, |d, &f| *d *= 2.0 * ewc_alpha * f);
                Some(g)
            }
            _ => None,
        })
        .collect())
}

/// Adds the squared per-batch cross-entropy gradients of `pairs` (dropout
/// off, all cells active) to the accumulation and re-anchors at the current
/// parameters. Only trainable parameters contribute.
pub fn fisher_update(model: &Model, pairs: &[EncodedPair], batch_size: usize, state: &mut FisherState) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Input("Fisher estimate on an empty corpus".into()));
    }
    let ones = LayerMasks::ones(model.config());
    let grads = sequential_batches(pairs, batch_size)
        .iter()
        .map(|b| {
            let mut g = Graph::new();
            let masks = ones.to_nodes(&mut g);
            let (bound, loss) = ce_graph(model, &mut g, b, &masks, &mut Dropout::off())?;
            let mut grads = g.backward(loss)?;
            Ok((1.0, bound.collect(&mut grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    state.accumulate(grads)?;
    state.anchor = Some(model.params().iter().map(|p| p.value.clone()).collect());
    Ok(())
}

/// Plain fine-tuning of all cell parameters with every cell active, plus an
/// optional EWC penalty. Used by both baselines and the single-domain and
/// joint reference runs.
pub fn train_baseline(
    cfg: &RunConfig,
    model: &mut Model,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    stream: u64,
    ewc: Option<(&FisherState, f64)>,
) -> Result<TrainReport> {
    let start = Instant::now();
    model.train_cells_only();
    let ones = LayerMasks::ones(&cfg.model);
    let mut report = TrainReport::default();
    let state = (model.clone(), Adam::new(AdamConfig::with_lr(cfg.lr)), 0usize);
    let (best, _, _) = early_stopping(cfg.max_epochs, cfg.patience, state, &mut report, |st, epoch, rep| {
        let (model, adam, step) = st;
        let batches = batch_iter(train, cfg.batch_size, epoch_seed(cfg, stream, epoch))?;
        let mut total = 0.0;
        for batch in &batches {
            *step += 1;
            let mut g = Graph::new();
            let masks = ones.to_nodes(&mut g);
            let mut drop = Dropout::new(DropoutMode::All, cfg.model.dropout_p, step_seed(cfg, stream, *step));
            let (bound, loss) = ce_graph(model, &mut g, batch, &masks, &mut drop)?;
            let mut value = g.scalar(loss);
            let mut grads = g.backward(loss)?;
            let mut p_grads = bound.collect(&mut grads);
            if let Some((fisher, alpha)) = ewc {
                if alpha != 0.0 {
                    value += ewc_penalty(model, fisher, alpha)?;
                    for (g, e) in p_grads.iter_mut().zip(ewc_penalty_gradient(model, fisher, alpha)?) {
                        if let (Some(g), Some(e)) = (g.as_mut(), e) {
                            *g += &e;
                        }
                    }
                }
            }
            check_loss(value, "fine-tuning", *step)?;
            total += value;
            apply_grads(model, adam, &p_grads);
            if *step % 10 == 0 {
                rep.log.push(format!("step={} epoch={} loss={value:.6}", step, epoch + 1));
            }
        }
        let (bleu, _) = evaluate_bleu(model, dev, &ones, 1)?;
        let val_loss = validation_loss(model, dev, &ones, 64)?;
        rep.steps = *step;
        rep.final_train_loss = total / batches.len() as f64;
        rep.log.push(format!(
            "epoch={} train_loss={:.6} val_loss={val_loss:.6} val_bleu={bleu:.4}",
            epoch + 1,
            rep.final_train_loss
        ));
        log::info!("finetune {}", rep.log.last().unwrap());
        Ok(Validation { score: bleu, loss: val_loss })
    })?;
    *model = best;
    model.set_trainable(|_| false);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Starting point of a continual sequence.
#[derive(Debug, Clone)]
pub enum Start {
    /// Pretrained general model (baselines).
    Pretrained(Model),
    /// Pruned general model and its task-0 archive (F-MALLOC).
    Pruned(PrunedModel, MaskArchive),
}

/// Everything produced by one continual sequence.
#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub method: Method,
    /// Domain indices in training order.
    pub order: Vec<usize>,
    pub bleu: BleuMatrix,
    /// `outputs[i][j]`: decoded test outputs of task `i` after stage `j`.
    pub outputs: Vec<Vec<Option<Vec<Vec<usize>>>>>,
    pub archive: Option<MaskArchive>,
    pub embeddings: Vec<TaskEmbedding>,
    pub trace: Vec<CapacityPoint>,
    /// Model after each stage (index 0 = starting model).
    pub stage_models: Vec<Model>,
    pub reports: Vec<TrainReport>,
    pub summary: Summary,
    pub seconds: f64,
}

/// Output locations of a run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn checkpoint(&self, stage: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage_{stage}.ckpt"))
    }
    pub fn archive(&self) -> PathBuf {
        self.root.join("masks").join("archive.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }
    pub fn log(&self, stage: usize) -> PathBuf {
        self.root.join("logs").join(format!("stage_{stage}.log"))
    }
    pub fn outputs(&self, task: usize, stage: usize) -> PathBuf {
        self.root.join("outputs").join(format!("task_{task}_stage_{stage}.txt"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Sequence<'a> {
    cfg: &'a RunConfig,
    bench: &'a Benchmark,
    dir: Option<&'a RunDir>,
    order: Vec<usize>,
    result: SequenceResult,
}

impl Sequence<'_> {
    fn task_data(&self, task: usize) -> &DomainData {
        if task == 0 {
            &self.bench.general
        } else {
            &self.bench.domains[self.order[task - 1]]
        }
    }

    /// Fills column `stage` of the BLEU matrix.
    fn evaluate_stage(&mut self, model: &Model, stage: usize) -> Result<()> {
        for task in 0..=stage {
            let masks = match &self.result.archive {
                Some(ar) => task_masks(self.cfg, ar, task)?,
                None => LayerMasks::ones(&self.cfg.model),
            };
            let (bleu, hyps) = evaluate_bleu(model, &self.task_data(task).test, &masks, self.cfg.beam_size)?;
            self.result.bleu.set(task, stage, bleu)?;
            if let Some(dir) = self.dir {
                let text: String = hyps
                    .iter()
                    .map(|h| self.bench.vocab.decode(h).join(" ") + "\n")
                    .collect();
                write_text(&dir.outputs(task, stage), &text)?;
            }
            self.result.outputs[task][stage] = Some(hyps);
        }
        Ok(())
    }

    fn persist(&mut self, model: &Model, stage: usize, log: &[String]) -> Result<()> {
        self.result.summary = crate::metrics::summarize(
            &self.result.bleu,
            self.cfg.method.as_str(),
            self.result.archive.as_ref(),
        );
        let Some(dir) = self.dir else { return Ok(()) };
        model.save(&dir.checkpoint(stage))?;
        let mut text = String::new();
        for l in log {
            let _ = writeln!(text, "{l}");
        }
        write_text(&dir.log(stage), &text)?;
        if let Some(ar) = &self.result.archive {
            ar.save(&dir.archive())?;
        }
        self.result.summary = emit_report(
            &dir.metrics(),
            &self.result.bleu,
            self.cfg.method.as_str(),
            self.result.archive.as_ref(),
            &self.result.trace,
        )?;
        Ok(())
    }
}

/// Trains the configured domains in order, evaluating every seen task after
/// each stage. With a run directory, artifacts are written after every stage
/// so a failed run leaves partial (flagged) results behind.
pub fn run_sequence(cfg: &RunConfig, bench: &Benchmark, start: Start, dir: Option<&RunDir>) -> Result<SequenceResult> {
    cfg.validate()?;
    let t0 = Instant::now();
    let order = cfg.task_order();
    let tasks: Vec<String> = std::iter::once(bench.general.name().to_string())
        .chain(order.iter().map(|&i| bench.domains[i].name().to_string()))
        .collect();
    let n = tasks.len();
    let (mut model, archive) = match (cfg.method, start) {
        (Method::Fmalloc, Start::Pruned(p, ar)) => (p.model, Some(ar)),
        (Method::Fmalloc, Start::Pretrained(_)) => {
            return Err(Error::State("F-MALLOC sequences start from a pruned model".into()))
        }
        (_, Start::Pretrained(m)) => (m, None),
        (_, Start::Pruned(p, _)) => (p.model, None),
    };
    if let Some(ar) = &archive {
        if ar.len() != 1 {
            return Err(Error::State(format!("expected only the general mask archived, found {} tasks", ar.len())));
        }
    }
    if let Some(dir) = dir {
        write_text(&dir.config(), &cfg.to_json())?;
    }
    let bleu = BleuMatrix::new(tasks.clone());
    let mut seq = Sequence {
        cfg,
        bench,
        dir,
        order: order.clone(),
        result: SequenceResult {
            method: cfg.method,
            order: order.clone(),
            summary: crate::metrics::summarize(&bleu, cfg.method.as_str(), None),
            bleu,
            outputs: vec![vec![None; n]; n],
            archive,
            embeddings: Vec::new(),
            trace: Vec::new(),
            stage_models: Vec::new(),
            reports: Vec::new(),
            seconds: 0.0,
        },
    };
    if let Some(ar) = &seq.result.archive {
        let usage = crate::metrics::capacity_usage(ar, 0)?;
        seq.result.trace.push(CapacityPoint {
            step: 0,
            stage: 0,
            epoch: 0,
            usage,
        });
    }
    seq.evaluate_stage(&model, 0)?;
    seq.result.stage_models.push(model.clone());
    seq.result.reports.push(TrainReport::default());
    seq.persist(&model, 0, &[format!("stage 0: {}", tasks[0])])?;

    let mut fisher = FisherState::default();
    if cfg.method == Method::Ewc {
        model.train_cells_only();
        fisher_update(&model, &bench.general.train, cfg.fisher_batch_size, &mut fisher)?;
        model.set_trainable(|_| false);
    }
    let mut steps = 0;
    for (stage, &domain) in order.iter().enumerate().map(|(j, d)| (j + 1, d)) {
        let data = &bench.domains[domain];
        let outcome: Result<TrainReport> = (|| match cfg.method {
            Method::Fmalloc => {
                let archive = seq.result.archive.as_mut().expect("fmalloc archive");
                let out = train_task(cfg, &mut model, archive, stage, domain, data, steps)?;
                seq.result.embeddings.push(out.embedding);
                // epochs after the best one were rolled back, so the trace keeps
                // the retained trajectory; it ends at the committed usage
                let best = out.report.best_epoch;
                seq.result.trace.extend(out.trace.into_iter().filter(|p| p.epoch <= best));
                Ok(out.report)
            }
            Method::SeqFinetune => train_baseline(cfg, &mut model, &data.train, &data.dev, domain_stream(domain), None),
            Method::Ewc => {
                let rep = train_baseline(
                    cfg,
                    &mut model,
                    &data.train,
                    &data.dev,
                    domain_stream(domain),
                    Some((&fisher, cfg.ewc_alpha)),
                )?;
                model.train_cells_only();
                fisher_update(&model, &data.train, cfg.fisher_batch_size, &mut fisher)?;
                model.set_trainable(|_| false);
                Ok(rep)
            }
        })();
        let report = match outcome {
            Ok(r) => r,
            Err(e) => {
                seq.persist(&model, stage, &[format!("stage {stage} failed: {e}")]).ok();
                return Err(e);
            }
        };
        steps += report.steps;
        seq.evaluate_stage(&model, stage)?;
        let mut log = vec![format!("stage {stage}: {} ({} pairs)", data.name(), data.train.len())];
        log.extend(report.log.iter().cloned());
        seq.result.stage_models.push(model.clone());
        seq.result.reports.push(report);
        seq.persist(&model, stage, &log)?;
    }
    seq.result.seconds = t0.elapsed().as_secs_f64();
    Ok(seq.result)
}

/// Fine-tunes the pretrained model on one domain alone and returns its test
/// BLEU (the per-domain plasticity reference).
pub fn finetune_single(cfg: &RunConfig, bench: &Benchmark, pretrained: &Model, domain: usize) -> Result<(f64, TrainReport)> {
    let data = &bench.domains[domain];
    let mut model = pretrained.clone();
    let rep = train_baseline(cfg, &mut model, &data.train, &data.dev, domain_stream(domain), None)?;
    let (bleu, _) = evaluate_bleu(&model, &data.test, &LayerMasks::ones(&cfg.model), cfg.beam_size)?;
    Ok((bleu, rep))
}

/// Joint training on the general and all continual domains mixed together;
/// returns test BLEU per task in `[general, order...]` order.
pub fn mixed_upper_bound(cfg: &RunConfig, bench: &Benchmark, pretrained: &Model) -> Result<Vec<f64>> {
    let mut train: Vec<EncodedPair> = bench.general.train.clone();
    let mut dev: Vec<EncodedPair> = bench.general.dev.clone();
    for d in &bench.domains {
        train.extend(d.train.iter().cloned());
        dev.extend(d.dev.iter().cloned());
    }
    let mut model = pretrained.clone();
    train_baseline(cfg, &mut model, &train, &dev, JOINT_STREAM, None)?;
    let ones = LayerMasks::ones(&cfg.model);
    std::iter::once(&bench.general)
        .chain(cfg.task_order().iter().map(|&i| &bench.domains[i]))
        .map(|d| Ok(evaluate_bleu(&model, &d.test, &ones, cfg.beam_size)?.0))
        .collect()
}
