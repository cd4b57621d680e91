//! Parameter containers. Every tensor is a 2-D `f64` matrix (biases are `1×n`).

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{AdapterTarget, ScorerConfig};

pub type Mat = Array2<f64>;

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Frozen weights: embeddings, modality feature tables, transformer layers and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub text_emb: Mat,
    pub tag_emb: Mat,
    pub seg_emb: Mat,
    pub pos_emb: Mat,
    /// Codebook vectors of the audio stream, consumed through the trainable projector.
    pub audio_feat: Mat,
    pub video_feat: Mat,
    pub layers: Vec<Layer>,
    pub head_w: Mat,
    pub head_b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w_up: Mat,
    pub b_up: Mat,
    pub w_down: Mat,
    pub b_down: Mat,
}

/// Low-rank update `scale · A · B` added to a frozen `in×out` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerAdapters {
    pub q: Option<Lora>,
    pub k: Option<Lora>,
    pub v: Option<Lora>,
    pub o: Option<Lora>,
    pub up: Option<Lora>,
    pub down: Option<Lora>,
}

/// Everything the optimizer may touch: modality projectors and adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub audio_proj: Mat,
    pub audio_proj_b: Mat,
    pub video_proj: Mat,
    pub video_proj_b: Mat,
    pub layers: Vec<LayerAdapters>,
    pub head: Option<Lora>,
}

impl Backbone {
    pub(crate) fn init(cfg: &ScorerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let f = cfg.mlp_width;
        let w_std = 1.0 / (d as f64).sqrt();
        let text_emb = normal(rng, cfg.text_vocab, d, 0.5);
        let tag_emb = normal(rng, 3, d, 0.5);
        let seg_emb = normal(rng, 3, d, 0.5);
        let pos_emb = normal(rng, cfg.max_len, d, 0.1);
        let audio_feat = normal(rng, cfg.audio_vocab, d, 0.5);
        let video_feat = normal(rng, cfg.video_vocab, d, 0.5);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: normal(rng, d, d, w_std),
                wk: normal(rng, d, d, w_std),
                wv: normal(rng, d, d, w_std),
                wo: normal(rng, d, d, w_std),
                w_up: normal(rng, d, f, w_std),
                b_up: Array2::zeros((1, f)),
                w_down: normal(rng, f, d, 1.0 / (f as f64).sqrt()),
                b_down: Array2::zeros((1, d)),
            })
            .collect();
        let head_w = if cfg.zero_head { Array2::zeros((d, cfg.text_vocab)) } else { normal(rng, d, cfg.text_vocab, w_std) };
        let head_b = Array2::zeros((1, cfg.text_vocab));
        Self { text_emb, tag_emb, seg_emb, pos_emb, audio_feat, video_feat, layers, head_w, head_b }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("text_emb".to_string(), &self.text_emb),
            ("tag_emb".to_string(), &self.tag_emb),
            ("seg_emb".to_string(), &self.seg_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("audio_feat".to_string(), &self.audio_feat),
            ("video_feat".to_string(), &self.video_feat),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w_up", &l.w_up),
                ("b_up", &l.b_up),
                ("w_down", &l.w_down),
                ("b_down", &l.b_down),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("text_emb".to_string(), &mut self.text_emb),
            ("tag_emb".to_string(), &mut self.tag_emb),
            ("seg_emb".to_string(), &mut self.seg_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("audio_feat".to_string(), &mut self.audio_feat),
            ("video_feat".to_string(), &mut self.video_feat),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in [
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("w_up", &mut l.w_up),
                ("b_up", &mut l.b_up),
                ("w_down", &mut l.w_down),
                ("b_down", &mut l.b_down),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }
}

impl Lora {
    fn init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize) -> Self {
        // B starts at zero so the adapted weight equals the frozen one.
        Lora { a: normal(rng, rows, rank, 1.0 / (rows as f64).sqrt()), b: Array2::zeros((rank, cols)) }
    }

    fn zeros_like(&self) -> Self {
        Lora { a: Array2::zeros(self.a.raw_dim()), b: Array2::zeros(self.b.raw_dim()) }
    }

    /// `base + scale · A · B`.
    pub fn apply(&self, base: &Mat, scale: f64) -> Mat {
        base + &(self.a.dot(&self.b) * scale)
    }
}

impl Trainable {
    pub(crate) fn init(cfg: &ScorerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let f = cfg.mlp_width;
        let r = cfg.adapter.rank;
        let std = 1.0 / (d as f64).sqrt();
        let audio_proj = normal(rng, d, d, std);
        let video_proj = normal(rng, d, d, std);
        let ad = &cfg.adapter;
        let pick = |t: AdapterTarget, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            ad.targets(t).then(|| Lora::init(rng, rows, cols, r))
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerAdapters {
                q: pick(AdapterTarget::Query, d, d, rng),
                k: pick(AdapterTarget::Key, d, d, rng),
                v: pick(AdapterTarget::Value, d, d, rng),
                o: pick(AdapterTarget::Output, d, d, rng),
                up: pick(AdapterTarget::MlpUp, d, f, rng),
                down: pick(AdapterTarget::MlpDown, f, d, rng),
            })
            .collect();
        let head = pick(AdapterTarget::Head, d, cfg.text_vocab, rng);
        Self {
            audio_proj,
            audio_proj_b: Array2::zeros((1, d)),
            video_proj,
            video_proj_b: Array2::zeros((1, d)),
            layers,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            audio_proj: Array2::zeros(self.audio_proj.raw_dim()),
            audio_proj_b: Array2::zeros(self.audio_proj_b.raw_dim()),
            video_proj: Array2::zeros(self.video_proj.raw_dim()),
            video_proj_b: Array2::zeros(self.video_proj_b.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: l.q.as_ref().map(Lora::zeros_like),
                    k: l.k.as_ref().map(Lora::zeros_like),
                    v: l.v.as_ref().map(Lora::zeros_like),
                    o: l.o.as_ref().map(Lora::zeros_like),
                    up: l.up.as_ref().map(Lora::zeros_like),
                    down: l.down.as_ref().map(Lora::zeros_like),
                })
                .collect(),
            head: self.head.as_ref().map(Lora::zeros_like),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("audio_proj".to_string(), &self.audio_proj),
            ("audio_proj_b".to_string(), &self.audio_proj_b),
            ("video_proj".to_string(), &self.video_proj),
            ("video_proj_b".to_string(), &self.video_proj_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, lora) in [("q", &l.q), ("k", &l.k), ("v", &l.v), ("o", &l.o), ("up", &l.up), ("down", &l.down)] {
                if let Some(lora) = lora {
                    out.push((format!("layers.{i}.lora_{n}.a"), &lora.a));
                    out.push((format!("layers.{i}.lora_{n}.b"), &lora.b));
                }
            }
        }
        if let Some(h) = &self.head {
            out.push(("head.lora.a".to_string(), &h.a));
            out.push(("head.lora.b".to_string(), &h.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("audio_proj".to_string(), &mut self.audio_proj),
            ("audio_proj_b".to_string(), &mut self.audio_proj_b),
            ("video_proj".to_string(), &mut self.video_proj),
            ("video_proj_b".to_string(), &mut self.video_proj_b),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, lora) in [
                ("q", &mut l.q),
                ("k", &mut l.k),
                ("v", &mut l.v),
                ("o", &mut l.o),
                ("up", &mut l.up),
                ("down", &mut l.down),
            ] {
                if let Some(lora) = lora {
                    out.push((format!("layers.{i}.lora_{n}.a"), &mut lora.a));
                    out.push((format!("layers.{i}.lora_{n}.b"), &mut lora.b));
                }
            }
        }
        if let Some(h) = &mut self.head {
            out.push(("head.lora.a".to_string(), &mut h.a));
            out.push(("head.lora.b".to_string(), &mut h.b));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += k · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Trainable, k: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(k, src);
        }
    }

    /// Euclidean norm over every tensor.
    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Flattened copy in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    /// Randomizes every adapter `B` factor; used to move away from the
    /// degenerate zero-update point in tests and diagnostics.
    pub fn perturb_adapters(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        for (name, t) in self.tensors_mut() {
            if name.ends_with(".b") {
                t.mapv_inplace(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                });
            }
        }
    }
}
