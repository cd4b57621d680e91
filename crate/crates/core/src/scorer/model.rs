//! Forward and reverse-mode passes of the toy decoder.
//!
//! Layout of an assembled sequence: `[audio][video][tag][prompt][response]`.
//! Text-only scoring drops the first two segments. Each layer is
//! `h += Attn(h); h += MLP(h)` with causal multi-head attention and a
//! tanh-approximated GELU; there is no normalization layer.

use ndarray::{s, Array2, Axis};

use super::config::ScorerConfig;
use super::params::{Backbone, Layer, LayerAdapters, Lora, Mat, Trainable};
use super::{ScorerError, TokenStreams};

/// Segment indices used for segment embeddings and attention accounting.
pub const SEG_AUDIO: usize = 0;
pub const SEG_VIDEO: usize = 1;
pub const SEG_TEXT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum InputMode {
    Full,
    TextOnly,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Audio(usize),
    Video(usize),
    Tag(usize),
    Text(usize),
}

/// Assembled sequence with segment bookkeeping.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    slots: Vec<Slot>,
    pub segments: Vec<usize>,
    /// Index of the first response token.
    pub response_start: usize,
    pub response: Vec<usize>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    /// Rows whose next-token distribution scores a response token.
    pub fn predicting_rows(&self) -> std::ops::Range<usize> {
        self.response_start - 1..self.len() - 1
    }
}

pub(crate) fn assemble(cfg: &ScorerConfig, ts: &TokenStreams, mode: InputMode) -> Result<Layout, ScorerError> {
    if ts.response_tokens.is_empty() {
        return Err(ScorerError::EmptyResponse);
    }
    let check = |stream: &'static str, ids: &[u32], vocab: usize| -> Result<(), ScorerError> {
        match ids.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(ScorerError::TokenOutOfRange { stream, id, vocab }),
            None => Ok(()),
        }
    };
    check("prompt", &ts.prompt_tokens, cfg.text_vocab)?;
    check("response", &ts.response_tokens, cfg.text_vocab)?;
    let mut slots = Vec::new();
    let mut segments = Vec::new();
    if mode == InputMode::Full {
        check("audio", &ts.audio_tokens, cfg.audio_vocab)?;
        check("video", &ts.video_tokens, cfg.video_vocab)?;
        for &a in &ts.audio_tokens {
            slots.push(Slot::Audio(a as usize));
            segments.push(SEG_AUDIO);
        }
        for &v in &ts.video_tokens {
            slots.push(Slot::Video(v as usize));
            segments.push(SEG_VIDEO);
        }
    }
    slots.push(Slot::Tag(ts.modality_tag.index()));
    segments.push(SEG_TEXT);
    for &t in &ts.prompt_tokens {
        slots.push(Slot::Text(t as usize));
        segments.push(SEG_TEXT);
    }
    let response_start = slots.len();
    for &t in &ts.response_tokens {
        slots.push(Slot::Text(t as usize));
        segments.push(SEG_TEXT);
    }
    if slots.len() > cfg.max_len {
        return Err(ScorerError::TooLong { len: slots.len(), max: cfg.max_len });
    }
    Ok(Layout { slots, segments, response_start, response: ts.response_tokens.iter().map(|&t| t as usize).collect() })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn effective(base: &Mat, lora: Option<&Lora>, scale: f64) -> Mat {
    match lora {
        Some(l) => l.apply(base, scale),
        None => base.clone(),
    }
}

struct LayerWeights {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w_up: Mat,
    w_down: Mat,
}

impl LayerWeights {
    fn new(layer: &Layer, ad: Option<&LayerAdapters>, scale: f64) -> Self {
        Self {
            wq: effective(&layer.wq, ad.and_then(|a| a.q.as_ref()), scale),
            wk: effective(&layer.wk, ad.and_then(|a| a.k.as_ref()), scale),
            wv: effective(&layer.wv, ad.and_then(|a| a.v.as_ref()), scale),
            wo: effective(&layer.wo, ad.and_then(|a| a.o.as_ref()), scale),
            w_up: effective(&layer.w_up, ad.and_then(|a| a.up.as_ref()), scale),
            w_down: effective(&layer.w_down, ad.and_then(|a| a.down.as_ref()), scale),
        }
    }
}

struct LayerCache {
    input: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// One `T×T` row-stochastic matrix per head.
    probs: Vec<Mat>,
    concat: Mat,
    mid: Mat,
    pre_act: Mat,
    act: Mat,
}

/// Everything the reverse pass needs, plus the attention maps for introspection.
pub(crate) struct ForwardCache {
    pub layout: Layout,
    layers: Vec<LayerCache>,
    weights: Vec<LayerWeights>,
    head_w: Mat,
    final_hidden: Mat,
    /// Softmax over the text vocabulary for each predicting row.
    pub next_probs: Mat,
    pub log_prob: f64,
}

impl ForwardCache {
    pub fn attention(&self) -> impl Iterator<Item = &Mat> {
        self.layers.iter().flat_map(|l| l.probs.iter())
    }
}

fn softmax_rows_causal(scores: &mut Mat) {
    let t = scores.nrows();
    for i in 0..t {
        let mut row = scores.row_mut(i);
        let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for j in 0..t {
            if j <= i {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum += e;
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) fn forward(
    cfg: &ScorerConfig,
    backbone: &Backbone,
    trainable: Option<&Trainable>,
    layout: Layout,
) -> ForwardCache {
    let d = cfg.width;
    let t = layout.len();
    let scale = cfg.adapter.scale;

    // Projected modality features are only needed when the stream is present.
    let (audio_proj, video_proj) = match trainable {
        Some(tr) => (Some((&tr.audio_proj, &tr.audio_proj_b)), Some((&tr.video_proj, &tr.video_proj_b))),
        None => (None, None),
    };
    let mut h = Array2::<f64>::zeros((t, d));
    for (p, slot) in layout.slots.iter().enumerate() {
        let mut row = h.row_mut(p);
        match *slot {
            Slot::Audio(id) => {
                let (w, b) = audio_proj.expect("audio input requires a projector");
                row.assign(&(backbone.audio_feat.row(id).dot(w) + b.row(0)));
            }
            Slot::Video(id) => {
                let (w, b) = video_proj.expect("video input requires a projector");
                row.assign(&(backbone.video_feat.row(id).dot(w) + b.row(0)));
            }
            Slot::Tag(m) => row.assign(&backbone.tag_emb.row(m)),
            Slot::Text(id) => row.assign(&backbone.text_emb.row(id)),
        }
        row += &backbone.seg_emb.row(layout.segments[p]);
        row += &backbone.pos_emb.row(p);
    }

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut weights = Vec::with_capacity(cfg.layers);
    for (li, layer) in backbone.layers.iter().enumerate() {
        let w = LayerWeights::new(layer, trainable.map(|tr| &tr.layers[li]), scale);
        let q = h.dot(&w.wq);
        let k = h.dot(&w.wk);
        let v = h.dot(&w.wv);
        let mut concat = Array2::<f64>::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * inv_sqrt;
            softmax_rows_causal(&mut sc);
            concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let mid = &h + &concat.dot(&w.wo);
        let pre_act = mid.dot(&w.w_up) + &layer.b_up;
        let act = pre_act.mapv(gelu);
        let out = &mid + &(act.dot(&w.w_down) + &layer.b_down);
        layers.push(LayerCache { input: h, q, k, v, probs, concat, mid, pre_act, act });
        weights.push(w);
        h = out;
    }

    let head_w = effective(&backbone.head_w, trainable.and_then(|tr| tr.head.as_ref()), scale);
    let rows = layout.predicting_rows();
    let hidden = h.slice(s![rows.clone(), ..]);
    let mut logits = hidden.dot(&head_w) + &backbone.head_b;
    let mut log_prob = 0.0;
    for (r, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target = row[layout.response[r]] - max;
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        log_prob += target - sum.ln();
    }
    ForwardCache { layout, layers, weights, head_w, final_hidden: h, next_probs: logits, log_prob }
}

/// Accumulates gradients of the low-rank factors given the gradient of the effective weight.
fn accumulate_lora(grad: &mut Option<Lora>, lora: Option<&Lora>, d_eff: &Mat, scale: f64) {
    if let (Some(g), Some(l)) = (grad.as_mut(), lora) {
        g.a.scaled_add(scale, &d_eff.dot(&l.b.t()));
        g.b.scaled_add(scale, &l.a.t().dot(d_eff));
    }
}

/// Adds `upstream · ∂ log_prob / ∂θ` to `grads` for every trainable tensor.
pub(crate) fn backward(
    cfg: &ScorerConfig,
    backbone: &Backbone,
    trainable: &Trainable,
    cache: &ForwardCache,
    upstream: f64,
    grads: &mut Trainable,
) {
    let scale = cfg.adapter.scale;
    let t = cache.layout.len();
    let rows = cache.layout.predicting_rows();

    // d logp / d logits = onehot - softmax on each predicting row.
    let mut d_logits = cache.next_probs.mapv(|p| -p * upstream);
    for (r, &tok) in cache.layout.response.iter().enumerate() {
        d_logits[[r, tok]] += upstream;
    }
    let mut dh = Array2::<f64>::zeros((t, cfg.width));
    dh.slice_mut(s![rows.clone(), ..]).assign(&d_logits.dot(&cache.head_w.t()));
    if let Some(hl) = trainable.head.as_ref() {
        let d_head = cache.final_hidden.slice(s![rows, ..]).t().dot(&d_logits);
        accumulate_lora(&mut grads.head, Some(hl), &d_head, scale);
    }

    let heads = cfg.heads;
    let dh_dim = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh_dim as f64).sqrt();
    for li in (0..backbone.layers.len()).rev() {
        let lc = &cache.layers[li];
        let w = &cache.weights[li];
        let ad = &trainable.layers[li];
        let g = &mut grads.layers[li];

        // MLP block.
        let d_act = dh.dot(&w.w_down.t());
        accumulate_lora(&mut g.down, ad.down.as_ref(), &lc.act.t().dot(&dh), scale);
        let d_pre = &d_act * &lc.pre_act.mapv(gelu_grad);
        accumulate_lora(&mut g.up, ad.up.as_ref(), &lc.mid.t().dot(&d_pre), scale);
        let d_mid = &dh + &d_pre.dot(&w.w_up.t());

        // Attention block.
        accumulate_lora(&mut g.o, ad.o.as_ref(), &lc.concat.t().dot(&d_mid), scale);
        let d_concat = d_mid.dot(&w.wo.t());
        let mut dq = Array2::<f64>::zeros(lc.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(lc.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(lc.v.raw_dim());
        for hd in 0..heads {
            let cols = s![.., hd * dh_dim..(hd + 1) * dh_dim];
            let p = &lc.probs[hd];
            let d_out = d_concat.slice(cols);
            let d_p = d_out.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = p * &(&d_p - &row_dot) * inv_sqrt;
            dq.slice_mut(cols).assign(&d_scores.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&lc.q.slice(cols)));
        }
        let x = &lc.input;
        accumulate_lora(&mut g.q, ad.q.as_ref(), &x.t().dot(&dq), scale);
        accumulate_lora(&mut g.k, ad.k.as_ref(), &x.t().dot(&dk), scale);
        accumulate_lora(&mut g.v, ad.v.as_ref(), &x.t().dot(&dv), scale);
        dh = d_mid + dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    }

    // Input embeddings: only the projector path is trainable.
    for (p, slot) in cache.layout.slots.iter().enumerate() {
        let (feat, gw, gb) = match *slot {
            Slot::Audio(id) => (backbone.audio_feat.row(id), &mut grads.audio_proj, &mut grads.audio_proj_b),
            Slot::Video(id) => (backbone.video_feat.row(id), &mut grads.video_proj, &mut grads.video_proj_b),
            _ => continue,
        };
        let drow = dh.row(p);
        for (i, &f) in feat.iter().enumerate() {
            gw.row_mut(i).scaled_add(f, &drow);
        }
        gb.row_mut(0).scaled_add(1.0, &drow);
    }
}
