//! Run configuration: schema, defaults (the desk benchmark), validation and
//! dotted-key overrides.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{random_permutation, DomainSpec, Rule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fmalloc,
    SeqFinetune,
    Ewc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fmalloc => "fmalloc",
            Method::SeqFinetune => "seq_finetune",
            Method::Ewc => "ewc",
        }
    }
}

/// Which archived mask a task is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInference {
    /// Binarized at `lambda` (read-only protection is then exact).
    Hard,
    /// The gate values at archive time.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub order: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Experiment name; runs live under `<root>/<name>/`.
    pub name: String,
    pub model: ModelConfig,
    pub general: DomainSpec,
    pub domains: Vec<DomainSpec>,
    /// Explicit task order (indices into `domains`); derived from
    /// `seeds.order` when absent.
    pub order: Option<Vec<usize>>,
    pub method: Method,
    pub sparsity: f64,
    pub tau_max: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Learning rate of continual stages (cells and task embeddings).
    pub lr: f64,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub pretrain_max_epochs: usize,
    pub importance_batches: usize,
    /// Beam width for test-set evaluation; validation decodes greedily.
    pub beam_size: usize,
    pub ewc_alpha: f64,
    /// Batch size of the squared-gradient Fisher estimate; 1 squares
    /// per-example gradients.
    pub fisher_batch_size: usize,
    pub mask_inference: MaskInference,
    /// Also train a joint multi-domain model to obtain saturation ratios.
    pub mixed_upper_bound: bool,
    pub seeds: Seeds,
    /// Extra label appended to the run directory name (used by sweeps).
    pub run_tag: Option<String>,
}

/// `w00`, `w01`, ... symbol names.
pub fn symbols(range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("w{i:02}")).collect()
}

fn domain(name: &str, rule: Rule, subset: Vec<String>, n_train: usize, group: &str) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        rule,
        vocab_subset: subset,
        n_train,
        n_dev: 200,
        n_test: 400,
        len_range: [3, 10],
        overlap_group: group.into(),
    }
}

impl Default for RunConfig {
    /// The desk benchmark: a copy general domain over 40 symbols and five
    /// continual domains of different sizes in two vocabulary groups.
    fn default() -> Self {
        let a = symbols(0..20);
        let b = symbols(20..40);
        Self {
            name: "desk".into(),
            model: ModelConfig::default(),
            general: DomainSpec {
                len_range: [3, 12],
                ..domain("general", Rule::Copy, symbols(0..40), 20_000, "all")
            },
            domains: vec![
                domain("reverse", Rule::Reverse, a.clone(), 8_000, "a"),
                domain("shift_2", Rule::ShiftK { k: 2 }, b.clone(), 1_000, "b"),
                domain("pair_swap", Rule::PairSwap, b.clone(), 12_000, "b"),
                domain(
                    "vocab_map",
                    Rule::VocabMap {
                        permutation: random_permutation(20, 17),
                    },
                    b,
                    6_000,
                    "b",
                ),
                domain("sort", Rule::Sort, a, 10_000, "a"),
            ],
            order: None,
            method: Method::Fmalloc,
            sparsity: 0.2,
            tau_max: 400.0,
            lambda: 0.5,
            alpha: 5.0,
            lr: 1e-2,
            pretrain_lr: 1e-3,
            batch_size: 32,
            patience: 5,
            max_epochs: 30,
            pretrain_max_epochs: 40,
            importance_batches: 128,
            beam_size: 5,
            ewc_alpha: 0.1,
            fisher_batch_size: 1,
            mask_inference: MaskInference::Hard,
            mixed_upper_bound: false,
            seeds: Seeds {
                init: 1,
                data: 2,
                order: 0,
            },
            run_tag: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `key.path=value` overrides on top of this configuration.
    /// Values parse as JSON when possible and as plain strings otherwise.
    /// Keys must name an existing field.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?,
                    Value::Array(items) => {
                        let idx: usize = part
                            .parse()
                            .map_err(|_| Error::Config(format!("config key {key:?}: {part:?} is not an index")))?;
                        let len = items.len();
                        items
                            .get_mut(idx)
                            .ok_or_else(|| Error::Config(format!("config key {key:?}: index {idx} >= {len}")))?
                    }
                    _ => return Err(Error::Config(format!("config key {key:?} descends into a scalar"))),
                };
            }
            *slot = parsed;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        self.model
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", format!("{:?} is not a valid directory name", self.name));
        }
        self.general.validate()?;
        if self.domains.is_empty() {
            return bad("domains", "at least one continual domain is required".into());
        }
        let mut names = HashSet::new();
        names.insert(self.general.name.as_str());
        for d in &self.domains {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return bad("domains", format!("duplicate domain name {:?}", d.name));
            }
        }
        if let Some(order) = &self.order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.domains.len()).collect::<Vec<_>>() {
                return bad("order", format!("{order:?} is not a permutation of the domains"));
            }
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad("sparsity", format!("{} outside [0, 1)", self.sparsity));
        }
        if !(self.tau_max >= 1.0) {
            return bad("tau_max", format!("{} must be >= 1", self.tau_max));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", format!("{} outside (0, 1]", self.lambda));
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", format!("{} must be positive", self.alpha));
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("lr", "learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1".into());
        }
        if self.importance_batches == 0 {
            return bad("importance_batches", "must be at least 1".into());
        }
        if self.fisher_batch_size == 0 {
            return bad("fisher_batch_size", "must be at least 1".into());
        }
        if self.beam_size == 0 {
            return bad("beam_size", "must be at least 1".into());
        }
        if !(self.ewc_alpha >= 0.0) {
            return bad("ewc_alpha", format!("{} must be nonnegative", self.ewc_alpha));
        }
        Ok(())
    }

    /// Domain indices in training order.
    pub fn task_order(&self) -> Vec<usize> {
        match &self.order {
            Some(o) => o.clone(),
            None => random_order(self.domains.len(), self.seeds.order),
        }
    }

    /// Directory name of this run below `<root>/<name>/`.
    pub fn run_label(&self) -> String {
        let order: Vec<String> = self.task_order().iter().map(|i| i.to_string()).collect();
        let mut label = format!("{}_order-{}", self.method.as_str(), order.join("-"));
        if let Some(tag) = &self.run_tag {
            label.push('_');
            label.push_str(tag);
        }
        label
    }
}

/// A seeded permutation of `0..n`; seed 0 is the identity.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    if seed != 0 {
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    v
}
