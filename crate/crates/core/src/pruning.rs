//! Data-free memory importance from dropout-contrast divergence, and
//! quantile binarization into the general-domain mask.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, sub_seed, Batch, EncodedPair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Dropout, DropoutMode, LayerMasks, Model};
use crate::taskmask::{bits_to_string, string_to_bits, MaskArchive};

/// Per-layer, per-cell importance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<Vec<f64>>,
    /// Number of batches averaged.
    pub n_samples: usize,
}

impl ImportanceVector {
    pub fn layer_means(&self) -> Vec<f64> {
        self.scores
            .iter()
            .map(|l| l.iter().sum::<f64>() / l.len().max(1) as f64)
            .collect()
    }
}

/// Symmetric divergence between the ff-only-dropout pass and the clean pass,
/// and (optionally) its gradient with respect to the mask multipliers.
fn js_graph(
    model: &Model,
    batch: &Batch,
    masks: &LayerMasks,
    dropout_seed: u64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    if batch.size == 0 || batch.tgt_weight.iter().all(|&w| w == 0.0) {
        return Err(Error::Input("divergence loss on an empty batch".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let mask_nodes: Vec<_> = masks
        .0
        .iter()
        .map(|m| g.leaf(Array2::from_shape_vec((1, m.len()), m.clone()).expect("mask row"), want_grad))
        .collect();
    let mut noisy = Dropout::new(DropoutMode::FfOnly, model.config().dropout_p, dropout_seed);
    let p1 = model.forward_graph(&mut g, &bound, batch, &mask_nodes, &mut noisy)?;
    let p2 = model.forward_graph(&mut g, &bound, batch, &mask_nodes, &mut Dropout::off())?;
    let loss = g.symmetric_kl(p1, p2, &batch.tgt_weight);
    let value = g.scalar(loss);
    if !want_grad {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    let per_layer = mask_nodes
        .iter()
        .zip(&masks.0)
        .map(|(&n, m)| match grads.get(n) {
            Some(t) => t.iter().copied().collect(),
            None => vec![0.0; m.len()],
        })
        .collect();
    Ok((value, Some(per_layer)))
}

/// `½[KL(P1‖P2) + KL(P2‖P1)]` averaged over target positions, with P1 the
/// ff-only-dropout prediction and P2 the clean one, both with all-ones masks.
pub fn js_loss(model: &Model, batch: &Batch, dropout_seed: u64) -> Result<f64> {
    js_loss_masked(model, batch, &LayerMasks::ones(model.config()), dropout_seed)
}

/// `js_loss` with explicit mask multipliers (finite-difference probing).
pub fn js_loss_masked(model: &Model, batch: &Batch, masks: &LayerMasks, dropout_seed: u64) -> Result<f64> {
    Ok(js_graph(model, batch, masks, dropout_seed, false)?.0)
}

/// Signed `∂L/∂m` at `m = 1` for one batch and fixed dropout noise.
pub fn mask_gradient(model: &Model, batch: &Batch, dropout_seed: u64) -> Result<Vec<Vec<f64>>> {
    let (_, g) = js_graph(model, batch, &LayerMasks::ones(model.config()), dropout_seed, true)?;
    Ok(g.expect("gradient requested"))
}

/// `I_k = mean over batches of |∂L/∂m_k|` on `n_batches` batches drawn from
/// the external data (reshuffled per pass), each with its own seeded noise.
pub fn estimate_importance(
    model: &Model,
    external: &[EncodedPair],
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<ImportanceVector> {
    if n_batches == 0 {
        return Err(Error::Input("n_batches must be at least 1".into()));
    }
    let cfg = model.config();
    let mut sums = vec![vec![0.0; cfg.d_ff]; cfg.n_ff_layers()];
    let mut pass = 0u64;
    let mut queue: Vec<Batch> = Vec::new();
    for i in 0..n_batches {
        if queue.is_empty() {
            queue = batch_iter(external, batch_size, sub_seed(seed, pass))?;
            queue.reverse();
            pass += 1;
        }
        let batch = queue.pop().expect("refilled");
        let g = mask_gradient(model, &batch, sub_seed(seed, 1 << 32 | i as u64))?;
        for (s, gl) in sums.iter_mut().zip(&g) {
            for (a, b) in s.iter_mut().zip(gl) {
                *a += b.abs();
            }
        }
    }
    for layer in sums.iter_mut() {
        for v in layer.iter_mut() {
            *v /= n_batches as f64;
        }
    }
    Ok(ImportanceVector {
        scores: sums,
        n_samples: n_batches,
    })
}

/// Number of cells kept out of `n` at sparsity `s`: `ceil((1 - s) n)`.
pub fn kept_cells(n: usize, s: f64) -> usize {
    // guard against representation error such as (1 - 0.05) * 20 = 19.000000000000004
    (((1.0 - s) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Binary general-domain mask `m^G` produced by pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralMask {
    pub layers: Vec<Vec<bool>>,
    pub sparsity: f64,
    pub seed: u64,
    pub n_batches: usize,
}

impl GeneralMask {
    pub fn masks(&self) -> LayerMasks {
        LayerMasks::from_bits(&self.layers)
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.iter().filter(|&&b| b).count()).collect()
    }

    pub fn capacity_usage(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.len()).sum();
        self.kept_per_layer().iter().sum::<usize>() as f64 / total as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GeneralMaskFile {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| (i.to_string(), bits_to_string(l)))
                .collect(),
            sparsity: self.sparsity,
            seed: self.seed,
            n_batches: self.n_batches,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GeneralMaskFile = serde_json::from_str(&text)?;
        let mut layers: Vec<(usize, Vec<bool>)> = file
            .layers
            .iter()
            .map(|(k, v)| {
                let id = k
                    .parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad layer id {k:?} in mask file")))?;
                Ok((id, string_to_bits(v)?))
            })
            .collect::<Result<_>>()?;
        layers.sort_by_key(|(i, _)| *i);
        if layers.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::Input("mask file layer ids are not dense from 0".into()));
        }
        Ok(GeneralMask {
            layers: layers.into_iter().map(|(_, l)| l).collect(),
            sparsity: file.sparsity,
            seed: file.seed,
            n_batches: file.n_batches,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneralMaskFile {
    layers: BTreeMap<String, String>,
    sparsity: f64,
    seed: u64,
    n_batches: usize,
}

/// Keeps, per layer, the `ceil((1-s)N)` most important cells; ties keep the
/// lower cell index.
pub fn binarize_importance(importance: &ImportanceVector, s: f64) -> Result<GeneralMask> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Input(format!("sparsity must lie in [0, 1), got {s}")));
    }
    let layers = importance
        .scores
        .iter()
        .map(|scores| {
            let n = scores.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut bits = vec![false; n];
            for &i in &order[..kept_cells(n, s)] {
                bits[i] = true;
            }
            bits
        })
        .collect();
    Ok(GeneralMask {
        layers,
        sparsity: s,
        seed: 0,
        n_batches: importance.n_samples,
    })
}

/// The general model after pruning: all parameters stay in storage, and the
/// general domain is always evaluated under `m^G`.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub model: Model,
    pub general: GeneralMask,
}

impl PrunedModel {
    pub fn general_masks(&self) -> LayerMasks {
        self.general.masks()
    }
}

/// Installs `m^G` as the task-0 mask and starts a mask archive with it.
pub fn prune_model(model: Model, general: GeneralMask, archive: MaskArchive) -> Result<(PrunedModel, MaskArchive)> {
    let cfg = model.config();
    if general.layers.len() != cfg.n_ff_layers() || general.layers.iter().any(|l| l.len() != cfg.d_ff) {
        return Err(Error::Config("general mask shape does not match the model".into()));
    }
    let mut archive = archive;
    archive.archive_bits(0, general.layers.clone())?;
    Ok((PrunedModel { model, general }, archive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EncodedPair;
    use crate::model::tests::tiny_config;
    use proptest::prelude::*;

    fn pairs() -> Vec<EncodedPair> {
        (0..12)
            .map(|i| EncodedPair {
                src: vec![4 + i % 5, 5 + i % 3, 4 + (i * 7) % 6],
                tgt: vec![4 + (i * 3) % 6, 4 + i % 5],
            })
            .collect()
    }

    fn iv(scores: Vec<f64>) -> ImportanceVector {
        ImportanceVector {
            scores: vec![scores],
            n_samples: 1,
        }
    }

    #[test]
    fn binarize_examples() {
        let m = binarize_importance(&iv(vec![0.1, 0.4, 0.2, 0.3]), 0.5).unwrap();
        assert_eq!(m.layers[0], vec![false, true, false, true]);
        let m = binarize_importance(&iv(vec![0.2; 4]), 0.25).unwrap();
        assert_eq!(m.layers[0], vec![true, true, true, false]);
        let m = binarize_importance(&iv(vec![0.5, 0.0, 0.2]), 0.0).unwrap();
        assert!(m.layers[0].iter().all(|&b| b));
        assert!(binarize_importance(&iv(vec![1.0]), 1.0).is_err());
        assert!(binarize_importance(&iv(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn kept_cell_counts() {
        assert_eq!(kept_cells(20, 0.05), 19);
        assert_eq!(kept_cells(256, 0.2), 205);
        assert_eq!(kept_cells(10, 0.4), 6);
        assert_eq!(kept_cells(7, 0.0), 7);
        assert_eq!(kept_cells(3, 0.99), 1);
    }

    proptest! {
        #[test]
        fn binarize_keeps_ceil_count_and_is_idempotent(
            scores in prop::collection::vec(0.0f64..1.0, 1..40),
            s in 0.0f64..0.99,
        ) {
            let m = binarize_importance(&iv(scores.clone()), s).unwrap();
            let n = scores.len();
            let kept = m.kept_per_layer()[0];
            prop_assert_eq!(kept, ((1.0 - s) * n as f64 - 1e-9).ceil() as usize);
            let implied = iv(m.layers[0].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
            prop_assert_eq!(binarize_importance(&implied, s).unwrap().layers, m.layers.clone());
            // every kept score >= every pruned score
            let min_kept = scores.iter().zip(&m.layers[0]).filter(|(_, &b)| b).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            let max_pruned = scores.iter().zip(&m.layers[0]).filter(|(_, &b)| !b).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_pruned);
        }
    }

    #[test]
    fn js_loss_properties() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let enc = pairs();
        let batch = Batch::from_pairs(&enc.iter().take(4).collect::<Vec<_>>());
        let l = js_loss(&model, &batch, 7).unwrap();
        assert!(l > 0.0 && l.is_finite());
        assert_eq!(l, js_loss(&model, &batch, 7).unwrap());
        let mut cfg = tiny_config();
        cfg.dropout_p = 0.0;
        let clean = Model::new(cfg, 4).unwrap();
        assert_eq!(js_loss(&clean, &batch, 7).unwrap(), 0.0);
        let empty = Batch::from_pairs(&[]);
        assert!(matches!(js_loss(&model, &empty, 7), Err(Error::Input(_))));
    }

    #[test]
    fn importance_matches_finite_differences() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let enc = pairs();
        let batch = Batch::from_pairs(&enc.iter().take(5).collect::<Vec<_>>());
        let seed = 31;
        let grad = mask_gradient(&model, &batch, seed).unwrap();
        let eps = 1e-5;
        for l in 0..grad.len() {
            for k in 0..grad[l].len() {
                let mut plus = LayerMasks::ones(model.config());
                plus.0[l][k] += eps;
                let mut minus = LayerMasks::ones(model.config());
                minus.0[l][k] -= eps;
                let fd = (js_loss_masked(&model, &batch, &plus, seed).unwrap()
                    - js_loss_masked(&model, &batch, &minus, seed).unwrap())
                    / (2.0 * eps);
                let rel = (fd.abs() - grad[l][k].abs()).abs() / (grad[l][k].abs() + 1e-8);
                assert!(rel < 1e-3, "layer {l} cell {k}: fd {fd} vs {}", grad[l][k]);
            }
        }
    }

    #[test]
    fn dead_cell_has_zero_importance_and_estimate_is_deterministic() {
        let mut model = Model::new(tiny_config(), 5).unwrap();
        let ff = model.ff_params(0);
        model.param_mut(ff.values).value.column_mut(2).fill(0.0);
        let imp = estimate_importance(&model, &pairs(), 4, 5, 3).unwrap();
        assert_eq!(imp.scores[0][2], 0.0);
        assert!(imp.scores.iter().flatten().all(|&v| v >= 0.0));
        assert_eq!(imp.n_samples, 5);
        assert_eq!(imp, estimate_importance(&model, &pairs(), 4, 5, 3).unwrap());
        assert!(estimate_importance(&model, &pairs(), 4, 0, 3).is_err());
    }

    #[test]
    fn general_mask_file_round_trip_and_pruning() {
        let m = binarize_importance(
            &ImportanceVector {
                scores: vec![vec![0.3, 0.1, 0.2, 0.9, 0.0, 0.5]; 2],
                n_samples: 4,
            },
            0.5,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("general.json");
        m.save(&path).unwrap();
        assert_eq!(GeneralMask::load(&path).unwrap(), m);
        assert_eq!(m.capacity_usage(), 0.5);

        let model = Model::new(tiny_config(), 1).unwrap();
        let mut wrong = m.clone();
        wrong.layers[1].pop();
        let bad = prune_model(model.clone(), wrong, MaskArchive::new(0.5, 400.0, 5.0, 0));
        assert!(matches!(bad, Err(Error::Config(_))));
        let imp = ImportanceVector {
            scores: vec![vec![1.0; model.config().d_ff]; model.config().n_ff_layers()],
            n_samples: 1,
        };
        let full = binarize_importance(&imp, 0.0).unwrap();
        let (pruned, archive) = prune_model(model.clone(), full, MaskArchive::new(0.5, 400.0, 5.0, 0)).unwrap();
        assert_eq!(archive.len(), 1);
        assert_eq!(pruned.general_masks(), LayerMasks::ones(model.config()));
    }
}
