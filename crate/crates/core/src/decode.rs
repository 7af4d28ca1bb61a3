//! Incremental (cached) decoding and beam search.
//!
//! This path recomputes the same network as `Model::forward_graph` without
//! recording a tape; decoder self-attention keys and values are cached per
//! step so each step only processes the newest position.

use ndarray::{Array2, Axis};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{attention_forward, log_softmax, AttentionShape, Tensor, LAYER_NORM_EPS};
use crate::model::{FfParams, LayerMasks, Model, ParamId};

/// A finished (or length-capped) output with its length-normalized
/// log-probability (sum over generated tokens, EOS included, divided by count).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
    }
    out * gain + bias
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.dot(w) + b
}

fn feed_forward(model: &Model, ff: &FfParams, x: &Tensor, mask: &[f64]) -> Tensor {
    let keys = model.value(ff.keys);
    let pre = x.dot(&keys.t()) + model.value(ff.key_bias);
    let mut act = pre.mapv(|v| v.max(0.0));
    let m = Array2::from_shape_vec((1, mask.len()), mask.to_vec()).expect("mask row");
    act = act * &m;
    act.dot(&model.value(ff.values).t()) + model.value(ff.value_bias)
}

struct Encoded {
    src_len: usize,
    pad: Vec<bool>,
    /// Per decoder layer, cross-attention keys and values of every source row.
    cross: Vec<(Tensor, Tensor)>,
}

fn encode(model: &Model, srcs: &[Vec<usize>], masks: &LayerMasks) -> Result<Encoded> {
    let cfg = model.config();
    let d = cfg.d_model;
    let src_len = srcs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    if src_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "source length {src_len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let n = srcs.len();
    let mut ids = vec![PAD; n * src_len];
    let mut pad = vec![true; n * src_len];
    for (i, s) in srcs.iter().enumerate() {
        for (j, &t) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
            if t >= cfg.vocab_size {
                return Err(Error::Input(format!("token id {t} >= vocab_size {}", cfg.vocab_size)));
            }
            ids[i * src_len + j] = t;
            pad[i * src_len + j] = false;
        }
    }
    let mut x = embed(model, &ids, |r| r % src_len);
    let shape = AttentionShape {
        batch: n,
        q_len: src_len,
        k_len: src_len,
        heads: cfg.n_heads,
        causal: false,
    };
    for (l, layer) in model.encoder_views().iter().enumerate() {
        let (g, b) = layer.norms[0];
        let h = layer_norm(&x, model.value(g), model.value(b));
        let a = &layer.attns[0];
        let q = linear(&h, model.value(a[0]), model.value(a[1]));
        let k = linear(&h, model.value(a[2]), model.value(a[3]));
        let v = linear(&h, model.value(a[4]), model.value(a[5]));
        let (o, _) = attention_forward(&q, &k, &v, shape, Some(&pad));
        x = x + linear(&o, model.value(a[6]), model.value(a[7]));
        let (g, b) = layer.norms[1];
        let h = layer_norm(&x, model.value(g), model.value(b));
        x = x + feed_forward(model, &layer.ff, &h, &masks.0[l]);
    }
    let ((g, b), _) = model.final_norms();
    let memory = layer_norm(&x, model.value(g), model.value(b));
    let cross = model
        .decoder_views()
        .iter()
        .map(|layer| {
            let a = &layer.attns[1];
            (
                linear(&memory, model.value(a[2]), model.value(a[3])),
                linear(&memory, model.value(a[4]), model.value(a[5])),
            )
        })
        .collect();
    let _ = d;
    Ok(Encoded { src_len, pad, cross })
}

fn embed(model: &Model, ids: &[usize], pos: impl Fn(usize) -> usize) -> Tensor {
    let d = model.config().d_model;
    let table = model.embedding();
    let pe = model.positions();
    let scale = (d as f64).sqrt();
    Array2::from_shape_fn((ids.len(), d), |(r, c)| table[[ids[r], c]] * scale + pe[[pos(r), c]])
}

/// Decoder state for `rows` hypotheses; row `r` belongs to sentence `row_sentence[r]`.
struct DecoderState {
    row_sentence: Vec<usize>,
    /// `[layer][step]` keys and values, each `rows × d`.
    keys: Vec<Vec<Tensor>>,
    values: Vec<Vec<Tensor>>,
}

impl DecoderState {
    fn reorder(&mut self, idx: &[usize]) {
        for cache in self.keys.iter_mut().chain(self.values.iter_mut()) {
            for step in cache.iter_mut() {
                *step = step.select(Axis(0), idx);
            }
        }
    }
}

fn decoder_step(
    model: &Model,
    enc: &Encoded,
    state: &mut DecoderState,
    tokens: &[usize],
    step: usize,
    masks: &LayerMasks,
) -> Tensor {
    let cfg = model.config();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = tokens.len();
    let mut x = embed(model, tokens, |_| step);
    let n_enc = cfg.n_enc_layers;
    for (l, layer) in model.decoder_views().iter().enumerate() {
        let (g, b) = layer.norms[0];
        let h = layer_norm(&x, model.value(g), model.value(b));
        let a = &layer.attns[0];
        let q = linear(&h, model.value(a[0]), model.value(a[1]));
        state.keys[l].push(linear(&h, model.value(a[2]), model.value(a[3])));
        state.values[l].push(linear(&h, model.value(a[4]), model.value(a[5])));
        let steps = state.keys[l].len();
        let mut o = Array2::zeros((rows, d));
        let mut scores = vec![0.0; steps];
        for r in 0..rows {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &state.keys[l][j];
                    let mut dot = 0.0;
                    for c in cols.clone() {
                        dot += q[[r, c]] * k[[r, c]];
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let v = &state.values[l][j];
                    for c in cols.clone() {
                        o[[r, c]] += p * v[[r, c]];
                    }
                }
            }
        }
        x = x + linear(&o, model.value(a[6]), model.value(a[7]));

        let (g, b) = layer.norms[1];
        let h = layer_norm(&x, model.value(g), model.value(b));
        let a = &layer.attns[1];
        let q = linear(&h, model.value(a[0]), model.value(a[1]));
        let (ck, cv) = &enc.cross[l];
        let ts = enc.src_len;
        let mut o = Array2::zeros((rows, d));
        let mut scores = vec![0.0; ts];
        for r in 0..rows {
            let s_idx = state.row_sentence[r];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if enc.pad[s_idx * ts + j] {
                        *s = f64::NEG_INFINITY;
                        continue;
                    }
                    let mut dot = 0.0;
                    for c in cols.clone() {
                        dot += q[[r, c]] * ck[[s_idx * ts + j, c]];
                    }
                    *s = dot * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
                    z += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    if *s == 0.0 {
                        continue;
                    }
                    let p = s / z;
                    for c in cols.clone() {
                        o[[r, c]] += p * cv[[s_idx * ts + j, c]];
                    }
                }
            }
        }
        x = x + linear(&o, model.value(a[6]), model.value(a[7]));

        let (g, b) = layer.norms[2];
        let h = layer_norm(&x, model.value(g), model.value(b));
        x = x + feed_forward(model, &layer.ff, &h, &masks.0[n_enc + l]);
    }
    let (_, (g, b)) = model.final_norms();
    let h = layer_norm(&x, model.value(g), model.value(b));
    let (w, bias): (ParamId, ParamId) = model.out_params();
    let logits = linear(&h, model.value(w), model.value(bias));
    log_softmax(&logits).1
}

#[derive(Clone)]
struct Live {
    tokens: Vec<usize>,
    score: f64,
}

struct SentenceBeam {
    live: Vec<Live>,
    finished: Vec<Hypothesis>,
    max_len: usize,
    done: bool,
}

fn check_masks(model: &Model, masks: &LayerMasks) -> Result<()> {
    let cfg = model.config();
    if masks.0.len() != cfg.n_ff_layers() || masks.0.iter().any(|m| m.len() != cfg.d_ff) {
        return Err(Error::Config(format!(
            "expected {} masks of length {}",
            cfg.n_ff_layers(),
            cfg.d_ff
        )));
    }
    Ok(())
}

fn beam_search(model: &Model, srcs: &[Vec<usize>], masks: &LayerMasks, beam: usize) -> Result<Vec<Hypothesis>> {
    let cfg = model.config();
    let enc = encode(model, srcs, masks)?;
    let n = srcs.len();
    let rows = n * beam;
    let n_dec = cfg.n_dec_layers;
    let mut state = DecoderState {
        row_sentence: (0..rows).map(|r| r / beam).collect(),
        keys: vec![Vec::new(); n_dec],
        values: vec![Vec::new(); n_dec],
    };
    let mut beams: Vec<SentenceBeam> = srcs
        .iter()
        .map(|s| SentenceBeam {
            live: (0..beam)
                .map(|k| Live {
                    tokens: Vec::new(),
                    score: if k == 0 { 0.0 } else { f64::NEG_INFINITY },
                })
                .collect(),
            finished: Vec::new(),
            max_len: (s.len() + 5).min(cfg.max_seq_len),
            done: false,
        })
        .collect();
    let vocab = cfg.vocab_size;
    let mut step = 0;
    while beams.iter().any(|b| !b.done) {
        let tokens: Vec<usize> = beams
            .iter()
            .flat_map(|b| b.live.iter().map(|l| *l.tokens.last().unwrap_or(&BOS)))
            .collect();
        let lp = decoder_step(model, &enc, &mut state, &tokens, step, masks);
        let mut reorder: Vec<usize> = (0..rows).collect();
        for (s, b) in beams.iter_mut().enumerate() {
            if b.done {
                continue;
            }
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(beam * vocab);
            for (k, live) in b.live.iter().enumerate() {
                if live.score == f64::NEG_INFINITY {
                    continue;
                }
                let r = s * beam + k;
                for v in 0..vocab {
                    if v == PAD || v == BOS {
                        continue;
                    }
                    cands.push((live.score + lp[[r, v]], k, v));
                }
            }
            // highest score first; ties resolved by (hypothesis, token) order
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next: Vec<(usize, Live)> = Vec::with_capacity(beam);
            for (rank, &(score, k, v)) in cands.iter().enumerate() {
                if next.len() == beam {
                    break;
                }
                if v == EOS {
                    if rank < beam {
                        b.finished.push(Hypothesis {
                            tokens: b.live[k].tokens.clone(),
                            score: score / (step + 1) as f64,
                        });
                    }
                    continue;
                }
                let mut tokens = b.live[k].tokens.clone();
                tokens.push(v);
                next.push((k, Live { tokens, score }));
            }
            let capped = step + 1 >= b.max_len;
            if b.finished.len() >= beam || capped || next.is_empty() {
                if b.finished.is_empty() {
                    for (_, l) in &next {
                        b.finished.push(Hypothesis {
                            tokens: l.tokens.clone(),
                            score: l.score / (step + 1) as f64,
                        });
                    }
                }
                b.done = true;
                continue;
            }
            while next.len() < beam {
                next.push((
                    0,
                    Live {
                        tokens: next[0].1.tokens.clone(),
                        score: f64::NEG_INFINITY,
                    },
                ));
            }
            for (k, (src_k, live)) in next.into_iter().enumerate() {
                reorder[s * beam + k] = s * beam + src_k;
                b.live[k] = live;
            }
        }
        state.reorder(&reorder);
        step += 1;
    }
    Ok(beams
        .into_iter()
        .map(|b| {
            let mut best = b.finished[0].clone();
            for h in &b.finished[1..] {
                if h.score > best.score {
                    best = h.clone();
                }
            }
            best
        })
        .collect())
}

/// Decodes every source with the given feed-forward masks. `beam_size = 1`
/// is greedy argmax decoding. For wider beams the greedy hypothesis is also
/// a candidate, so the returned score never falls below the greedy one.
pub fn decode_batch(
    model: &Model,
    srcs: &[Vec<usize>],
    masks: &LayerMasks,
    beam_size: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(Error::Input("beam_size must be at least 1".into()));
    }
    check_masks(model, masks)?;
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let greedy = beam_search(model, srcs, masks, 1)?;
    if beam_size == 1 {
        return Ok(greedy);
    }
    let wide = beam_search(model, srcs, masks, beam_size)?;
    Ok(wide
        .into_iter()
        .zip(greedy)
        .map(|(w, g)| if g.score > w.score { g } else { w })
        .collect())
}

pub fn decode(model: &Model, src: &[usize], masks: &LayerMasks, beam_size: usize) -> Result<Hypothesis> {
    Ok(decode_batch(model, &[src.to_vec()], masks, beam_size)?.remove(0))
}

/// Decodes a corpus in chunks of `chunk` sentences.
pub fn decode_corpus(
    model: &Model,
    srcs: &[Vec<usize>],
    masks: &LayerMasks,
    beam_size: usize,
    chunk: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(srcs.len());
    for c in srcs.chunks(chunk.max(1)) {
        out.extend(decode_batch(model, c, masks, beam_size)?.into_iter().map(|h| h.tokens));
    }
    Ok(out)
}

/// Log-probability of every next token along a fixed target, via the cached
/// decoder. Row `t` is the distribution after consuming `BOS tgt[..t]`.
pub fn teacher_forced_log_probs(
    model: &Model,
    src: &[usize],
    tgt: &[usize],
    masks: &LayerMasks,
) -> Result<Tensor> {
    check_masks(model, masks)?;
    let enc = encode(model, &[src.to_vec()], masks)?;
    let n_dec = model.config().n_dec_layers;
    let mut state = DecoderState {
        row_sentence: vec![0],
        keys: vec![Vec::new(); n_dec],
        values: vec![Vec::new(); n_dec],
    };
    let mut rows = Vec::new();
    for (step, &tok) in std::iter::once(&BOS).chain(tgt).enumerate() {
        rows.push(decoder_step(model, &enc, &mut state, &[tok], step, masks));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Input(e.to_string()))
}
