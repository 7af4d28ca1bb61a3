//! Task masks: gated embeddings, temperature annealing, the append-only mask
//! archive with EMAX aggregation, and gradient masking of read-only cells.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Tensor};
use crate::model::{LayerMasks, Model};

/// `sigmoid(e / tau)` elementwise.
pub fn gate_mask(e: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("gate temperature must be positive, got {tau}")));
    }
    Ok(e.iter().map(|&v| sigmoid(v / tau)).collect())
}

/// Per-epoch annealing of the gate sharpness.
///
/// The sharpness `c` rises linearly from `1/tau_max` on the first step of an
/// epoch to `tau_max` on the last; the gate temperature is `tau = 1/c`, so
/// each epoch starts with near-uniform soft masks (exploration) and ends with
/// near-binary ones (exploitation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_max: f64,
    pub steps_per_epoch: usize,
}

impl AnnealSchedule {
    pub fn new(tau_max: f64, steps_per_epoch: usize) -> Result<Self> {
        if !(tau_max >= 1.0) || steps_per_epoch == 0 {
            return Err(Error::Config(format!(
                "annealing needs tau_max >= 1 and at least one step per epoch (got {tau_max}, {steps_per_epoch})"
            )));
        }
        Ok(Self {
            tau_max,
            steps_per_epoch,
        })
    }

    /// Gate sharpness at 1-based step `b` of an epoch.
    pub fn sharpness(&self, b: usize) -> f64 {
        let lo = 1.0 / self.tau_max;
        if self.steps_per_epoch == 1 {
            return self.tau_max;
        }
        let frac = (b.clamp(1, self.steps_per_epoch) - 1) as f64 / (self.steps_per_epoch - 1) as f64;
        lo + (self.tau_max - lo) * frac
    }

    /// Gate temperature at 1-based step `b` of an epoch.
    pub fn tau(&self, b: usize) -> f64 {
        1.0 / self.sharpness(b)
    }

    /// Temperature of the fully annealed gate (used at archive time).
    pub fn final_tau(&self) -> f64 {
        1.0 / self.tau_max
    }
}

/// Per-layer real-valued task embedding `e^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub task_id: usize,
    pub layers: Vec<Vec<f64>>,
}

impl TaskEmbedding {
    pub fn gates(&self, tau: f64) -> Result<LayerMasks> {
        Ok(LayerMasks(
            self.layers.iter().map(|e| gate_mask(e, tau)).collect::<Result<_>>()?,
        ))
    }
}

/// `e = alpha * m_general - |z|` with `z` seeded standard normal.
pub fn init_task_embedding(task_id: usize, general: &LayerMasks, alpha: f64, seed: u64) -> Result<TaskEmbedding> {
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = general
        .0
        .iter()
        .map(|m| {
            m.iter()
                .map(|&g| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    alpha * g - z.abs()
                })
                .collect()
        })
        .collect();
    Ok(TaskEmbedding { task_id, layers })
}

/// Elementwise max over the operands, then `>= lambda -> 1`, else 0.
pub fn aggregate(operands: &[&[Vec<f64>]], lambda: f64) -> LayerMasks {
    let Some(first) = operands.first() else {
        return LayerMasks(Vec::new());
    };
    let mut acc: Vec<Vec<f64>> = first.to_vec();
    for op in &operands[1..] {
        for (a, b) in acc.iter_mut().zip(op.iter()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = x.max(y);
            }
        }
    }
    for layer in acc.iter_mut() {
        for x in layer.iter_mut() {
            *x = if *x >= lambda { 1.0 } else { 0.0 };
        }
    }
    LayerMasks(acc)
}

/// One task's archived mask: the binarized gate, plus the soft gate values
/// at archive time.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchivedMask {
    pub task_id: usize,
    pub bits: Vec<Vec<bool>>,
    pub gates: Vec<Vec<f64>>,
}

impl ArchivedMask {
    pub fn binary(&self) -> LayerMasks {
        LayerMasks::from_bits(&self.bits)
    }

    pub fn soft(&self) -> LayerMasks {
        LayerMasks(self.gates.clone())
    }

    pub fn n_active(&self) -> usize {
        self.bits.iter().flatten().filter(|&&b| b).count()
    }

    /// Fraction of gate values strictly inside `(lo, hi)`.
    pub fn unpolarized_fraction(&self, lo: f64, hi: f64) -> f64 {
        let all: Vec<f64> = self.gates.iter().flatten().copied().collect();
        all.iter().filter(|&&g| g > lo && g < hi).count() as f64 / all.len().max(1) as f64
    }
}

/// Append-only store of per-task masks; task 0 is the general-domain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskArchive {
    pub lambda: f64,
    pub tau_max: f64,
    pub alpha: f64,
    pub seed: u64,
    tasks: Vec<ArchivedMask>,
}

impl MaskArchive {
    pub fn new(lambda: f64, tau_max: f64, alpha: f64, seed: u64) -> Self {
        Self {
            lambda,
            tau_max,
            alpha,
            seed,
            tasks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Result<&ArchivedMask> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::State(format!("no archived mask for task {task_id}")))
    }

    pub fn tasks(&self) -> &[ArchivedMask] {
        &self.tasks
    }

    fn push(&mut self, mask: ArchivedMask) -> Result<()> {
        if mask.task_id < self.tasks.len() {
            return Err(Error::State(format!("task {} is already archived", mask.task_id)));
        }
        if mask.task_id != self.tasks.len() {
            return Err(Error::State(format!(
                "tasks must be archived in order: expected {}, got {}",
                self.tasks.len(),
                mask.task_id
            )));
        }
        if let Some(prev) = self.tasks.first() {
            let same = prev.bits.len() == mask.bits.len()
                && prev.bits.iter().zip(&mask.bits).all(|(a, b)| a.len() == b.len());
            if !same {
                return Err(Error::Config("archived mask shape differs from task 0".into()));
            }
        }
        self.tasks.push(mask);
        Ok(())
    }

    /// Archives an already-binary mask (used for the general-domain task 0).
    pub fn archive_bits(&mut self, task_id: usize, bits: Vec<Vec<bool>>) -> Result<()> {
        let gates = bits
            .iter()
            .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .collect();
        self.push(ArchivedMask { task_id, bits, gates })
    }

    /// Binarizes `sigmoid(e / tau)` at `lambda` and stores it for the
    /// embedding's task.
    pub fn archive_mask(&mut self, embedding: &TaskEmbedding, tau: f64) -> Result<()> {
        let gates = embedding.gates(tau)?.0;
        let bits = gates
            .iter()
            .map(|l| l.iter().map(|&g| g >= self.lambda).collect())
            .collect();
        self.push(ArchivedMask {
            task_id: embedding.task_id,
            bits,
            gates,
        })
    }

    /// `m^{<t}`: EMAX over the binary masks of tasks `0..t`, thresholded.
    pub fn aggregate_previous(&self, t: usize) -> Result<LayerMasks> {
        if t == 0 {
            return Err(Error::State("aggregate_previous needs t >= 1".into()));
        }
        if self.tasks.len() < t {
            return Err(Error::State(format!(
                "aggregate_previous({t}) needs tasks 0..{t} archived, have {}",
                self.tasks.len()
            )));
        }
        let masks: Vec<LayerMasks> = self.tasks[..t].iter().map(|m| m.binary()).collect();
        let ops: Vec<&[Vec<f64>]> = masks.iter().map(|m| m.0.as_slice()).collect();
        Ok(aggregate(&ops, self.lambda))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ArchiveFile {
            lambda: self.lambda,
            tau_max: self.tau_max,
            alpha: self.alpha,
            seed: self.seed,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskEntry {
                    task_id: t.task_id,
                    layers: t.bits.iter().map(|l| bits_to_string(l)).collect(),
                    gates: t.gates.clone(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ArchiveFile = serde_json::from_str(&text)?;
        let mut archive = MaskArchive::new(file.lambda, file.tau_max, file.alpha, file.seed);
        for t in file.tasks {
            let bits = t.layers.iter().map(|s| string_to_bits(s)).collect::<Result<_>>()?;
            archive.push(ArchivedMask {
                task_id: t.task_id,
                bits,
                gates: t.gates,
            })?;
        }
        Ok(archive)
    }
}

pub fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn string_to_bits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Input(format!("invalid bit {other:?} in mask string"))),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    task_id: usize,
    layers: Vec<String>,
    gates: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveFile {
    lambda: f64,
    tau_max: f64,
    alpha: f64,
    seed: u64,
    tasks: Vec<TaskEntry>,
}

/// Multiplies every cell's gradient (key row, key bias entry, value column)
/// by `1 - readonly[i]`; cells with `readonly[i] == 1` get exact zeros.
/// `grads` is indexed like `Model::params`; frozen entries are `None`.
pub fn mask_gradients(model: &Model, grads: &mut [Option<Tensor>], readonly: &LayerMasks) {
    let keep = |m: f64, g: f64| if m == 1.0 { 0.0 } else { g * (1.0 - m) };
    for (l, mask) in readonly.0.iter().enumerate() {
        let ff = model.ff_params(l);
        if let Some(g) = grads[ff.keys.index()].as_mut() {
            for (mut row, &m) in g.rows_mut().into_iter().zip(mask) {
                row.mapv_inplace(|v| keep(m, v));
            }
        }
        if let Some(g) = grads[ff.key_bias.index()].as_mut() {
            for (v, &m) in g.iter_mut().zip(mask) {
                *v = keep(m, *v);
            }
        }
        if let Some(g) = grads[ff.values.index()].as_mut() {
            for (mut col, &m) in g.columns_mut().into_iter().zip(mask) {
                col.mapv_inplace(|v| keep(m, v));
            }
        }
    }
}
