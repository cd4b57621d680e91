//! Training loop: frozen reference, cached text-prior scores, gradient
//! accumulation, SGD with momentum, checkpointing and preference tracking.

pub mod planted;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};
use crate::losses::{avem_dpo_loss_with_grad, LossConfig, LossError, ScoredSequences};
use crate::prefdata::PreferenceRecord;
use crate::scorer::{
    encode_all, init_models, restore_into, AdapterConfig, AdapterTarget, Checkpoint, CheckpointError, FrozenGuard,
    GuardReport, ModelSet, ScorerConfig, ScorerError, TokenStreams, Trainable,
};
use crate::text::Vocabulary;
use crate::types::{ModalityTag, PmpMask};
use crate::world::{item_rng, AvStore};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {id}: {message}")]
    Record { id: String, message: String },
    #[error("non-finite loss at step {step} on record {id}: {source}{}", dump.as_ref().map(|p| format!(" (state dumped to {})", p.display())).unwrap_or_default())]
    NonFinite { step: u64, id: String, source: LossError, dump: Option<PathBuf> },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Loss-term switches matching the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drops the input-side preference term (`lambda_av = 0`).
    NoPmp,
    /// Keeps only the video-relevant rejection (`beta_vr = 1, beta_er = 0`).
    NoErp,
    /// Drops the text-prior penalty (`gamma_tpd = 0`).
    NoTpd,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoPmp, Ablation::NoErp, Ablation::NoTpd];

    pub fn apply(self, cfg: LossConfig) -> LossConfig {
        let r = match self {
            Ablation::Full => Ok(cfg),
            Ablation::NoPmp => cfg.with_lambda_av(0.0),
            Ablation::NoErp => cfg.with_rejection_weights(1.0, 0.0),
            Ablation::NoTpd => cfg.with_gamma_tpd(0.0),
        };
        r.expect("ablation settings are valid loss weights")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPmp => "no_pmp",
            Ablation::NoErp => "no_erp",
            Ablation::NoTpd => "no_tpd",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescales each accumulated gradient to at most this Euclidean norm.
    pub max_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub scorer: ScorerConfig,
    /// Optimizer steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Small-scale profile used by the test suite: a two-layer scorer with
    /// an adapted output head and a sharper DPO temperature.
    pub fn toy() -> Self {
        let mut scorer = ScorerConfig { width: 32, layers: 2, heads: 4, mlp_width: 64, ..ScorerConfig::default() };
        scorer.adapter.targets.push(AdapterTarget::Head);
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            max_grad_norm: Some(5.0),
            batch_size: 8,
            grad_accum_steps: 1,
            epochs: 20,
            max_steps: Some(500),
            seed: 0,
            loss: LossConfig::published_defaults().with_beta(0.5).expect("valid temperature"),
            ablation: Ablation::Full,
            scorer,
            checkpoint_every: 100,
        }
    }

    /// Published recipe: learning rate 5e-7, batch 2, 4 accumulation steps, one epoch.
    pub fn published_recipe() -> Self {
        Self {
            learning_rate: 5e-7,
            momentum: 0.0,
            max_grad_norm: None,
            batch_size: 2,
            grad_accum_steps: 4,
            epochs: 1,
            max_steps: None,
            checkpoint_every: 0,
            loss: LossConfig::published_defaults(),
            scorer: ScorerConfig::default(),
            ..Self::toy()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "published" => Some(Self::published_recipe()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("max_grad_norm must be finite and > 0, got {c}"));
            }
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.epochs == 0 {
            return bad("batch_size, grad_accum_steps and epochs must be >= 1".into());
        }
        self.scorer.validate()?;
        Ok(())
    }

    /// Loss weights after applying the ablation switch.
    pub fn effective_loss(&self) -> LossConfig {
        self.ablation.apply(self.loss)
    }
}

/// Flat key-value form of [`TrainConfig`], layered over a named profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatTrainConfig {
    pub profile: Option<String>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub batch_size: Option<usize>,
    pub grad_accum_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub ablation: Option<Ablation>,
    pub beta: Option<f64>,
    pub beta_vr: Option<f64>,
    pub beta_er: Option<f64>,
    pub gamma_tpd: Option<f64>,
    pub lambda_av: Option<f64>,
    pub adapter_rank: Option<usize>,
    pub adapter_scale: Option<f64>,
    pub adapter_targets: Option<Vec<AdapterTarget>>,
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_width: Option<usize>,
    pub max_len: Option<usize>,
    pub text_vocab: Option<usize>,
    pub scorer_seed: Option<u64>,
}

impl FlatTrainConfig {
    pub fn resolve(&self) -> Result<TrainConfig, TrainError> {
        let name = self.profile.as_deref().unwrap_or("toy");
        let mut c = TrainConfig::profile(name).ok_or_else(|| TrainError::Config(format!("unknown profile `{name}`")))?;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            learning_rate => c.learning_rate,
            momentum => c.momentum,
            batch_size => c.batch_size,
            grad_accum_steps => c.grad_accum_steps,
            epochs => c.epochs,
            seed => c.seed,
            checkpoint_every => c.checkpoint_every,
            ablation => c.ablation,
            width => c.scorer.width,
            layers => c.scorer.layers,
            heads => c.scorer.heads,
            mlp_width => c.scorer.mlp_width,
            max_len => c.scorer.max_len,
            text_vocab => c.scorer.text_vocab,
            scorer_seed => c.scorer.seed,
        );
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if self.max_grad_norm.is_some() {
            c.max_grad_norm = self.max_grad_norm;
        }
        let AdapterConfig { rank, scale, targets } = c.scorer.adapter.clone();
        c.scorer.adapter = AdapterConfig {
            rank: self.adapter_rank.unwrap_or(rank),
            scale: self.adapter_scale.unwrap_or(scale),
            targets: self.adapter_targets.clone().unwrap_or(targets),
        };
        let l = c.loss;
        c.loss = LossConfig::new(
            self.beta.unwrap_or(l.beta()),
            self.beta_vr.unwrap_or(l.beta_vr()),
            self.beta_er.unwrap_or(l.beta_er()),
            self.gamma_tpd.unwrap_or(l.gamma_tpd()),
            self.lambda_av.unwrap_or(l.lambda_av()),
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// A preference record turned into the four policy inputs it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRecord {
    pub id: String,
    pub tag: ModalityTag,
    pub mask: PmpMask,
    /// Chosen response under the chosen input.
    pub w: TokenStreams,
    pub vr: TokenStreams,
    pub er: TokenStreams,
    /// Chosen response under the rejected input.
    pub w_neg: TokenStreams,
}

/// Vocabulary over every prompt and response of `records`.
pub fn record_vocabulary(records: &[PreferenceRecord]) -> Vocabulary {
    Vocabulary::build(records.iter().flat_map(|r| [r.prompt.as_str(), r.y_w.as_str(), r.y_l_vr.as_str(), r.y_l_er.as_str()]))
}

pub fn tokenize_records(records: &[PreferenceRecord], store: &AvStore, vocab: &Vocabulary) -> Result<Vec<TokenizedRecord>, TrainError> {
    records
        .iter()
        .map(|r| {
            let err = |message: String| TrainError::Record { id: r.id.clone(), message };
            r.validate().map_err(|e| err(e.to_string()))?;
            let chosen = store.get(&r.chosen_av_ref).ok_or_else(|| err(format!("unknown clip {}", r.chosen_av_ref)))?;
            let rejected = store.get(&r.rejected_av_ref).ok_or_else(|| err(format!("unknown clip {}", r.rejected_av_ref)))?;
            let base = TokenStreams {
                audio_tokens: chosen.audio_tokens.clone(),
                video_tokens: chosen.video_tokens.clone(),
                prompt_tokens: vocab.encode(&r.prompt),
                response_tokens: vocab.encode(&r.y_w),
                modality_tag: r.modality_tag,
            };
            Ok(TokenizedRecord {
                id: r.id.clone(),
                tag: r.modality_tag,
                mask: r.pmp_mask,
                vr: base.with_response(vocab.encode(&r.y_l_vr)),
                er: base.with_response(vocab.encode(&r.y_l_er)),
                w_neg: base.with_av(rejected.audio_tokens.clone(), rejected.video_tokens.clone()),
                w: base,
            })
        })
        .collect()
}

/// Reference and text-prior log-likelihoods; constant for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenScores {
    pub ref_w: f64,
    pub ref_vr: f64,
    pub ref_er: f64,
    pub ref_w_neg: f64,
    pub text_w: f64,
    pub text_vr: f64,
    pub text_er: f64,
}

/// Tokenized records plus their cached frozen scores.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub records: Vec<TokenizedRecord>,
    pub frozen: Vec<FrozenScores>,
}

impl TrainData {
    pub fn prepare(models: &ModelSet, records: Vec<TokenizedRecord>) -> Result<Self, TrainError> {
        let frozen = records
            .iter()
            .map(|r| {
                let (m, t) = (&models.reference, &models.text_prior);
                Ok(FrozenScores {
                    ref_w: m.sequence_log_prob(&r.w)?,
                    ref_vr: m.sequence_log_prob(&r.vr)?,
                    ref_er: m.sequence_log_prob(&r.er)?,
                    ref_w_neg: m.sequence_log_prob(&r.w_neg)?,
                    text_w: t.sequence_log_prob(&r.w)?,
                    text_vr: t.sequence_log_prob(&r.vr)?,
                    text_er: t.sequence_log_prob(&r.er)?,
                })
            })
            .collect::<Result<Vec<_>, ScorerError>>()?;
        Ok(Self { records, frozen })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn scored(policy: [f64; 4], f: &FrozenScores) -> ScoredSequences {
    ScoredSequences {
        logp_policy_w: policy[0],
        logp_ref_w: f.ref_w,
        logp_policy_vr: policy[1],
        logp_ref_vr: f.ref_vr,
        logp_policy_er: policy[2],
        logp_ref_er: f.ref_er,
        logp_policy_w_neg: policy[3],
        logp_ref_w_neg: f.ref_w_neg,
        logp_text_w: Some(f.text_w),
        logp_text_vr: Some(f.text_vr),
        logp_text_er: Some(f.text_er),
    }
}

/// Implicit-reward margins of one record against each rejection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub vr: f64,
    pub er: f64,
    pub av: f64,
}

impl Margins {
    fn of(s: &ScoredSequences, beta: f64) -> Self {
        let dw = s.logp_policy_w - s.logp_ref_w;
        Margins {
            vr: beta * (dw - (s.logp_policy_vr - s.logp_ref_vr)),
            er: beta * (dw - (s.logp_policy_er - s.logp_ref_er)),
            av: beta * (dw - (s.logp_policy_w_neg - s.logp_ref_w_neg)),
        }
    }

    /// 1 when both response margins are positive, 0.5 on an exact tie at zero, else 0.
    pub fn preference_score(&self) -> f64 {
        sign_score(self.vr.min(self.er))
    }

    pub fn av_score(&self) -> f64 {
        sign_score(self.av)
    }
}

fn sign_score(m: f64) -> f64 {
    if m > 0.0 {
        1.0
    } else if m == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// One micro-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Optimizer steps completed after this micro-batch.
    pub step: u64,
    pub micro: u64,
    pub epoch: usize,
    pub updated: bool,
    pub loss: f64,
    pub tpd_term: f64,
    pub pmp_term: f64,
    pub reward_margin: f64,
    pub preference_accuracy: f64,
    pub av_accuracy: f64,
}

/// Policy weights plus optimizer and data-order position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub models: ModelSet,
    pub velocity: Trainable,
    pub grad: Trainable,
    pub step: u64,
    pub micro: u64,
    pub epoch: usize,
    /// Next position within the current epoch's order.
    pub cursor: usize,
    guard: FrozenGuard,
}

impl TrainState {
    pub fn new(models: ModelSet) -> Self {
        let zeros = models.policy.trainable().expect("policy has adapters").zeros_like();
        Self { guard: FrozenGuard::capture(&models), velocity: zeros.clone(), grad: zeros, models, step: 0, micro: 0, epoch: 0, cursor: 0 }
    }

    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self::new(init_models(&cfg.scorer)?))
    }

    /// Checks that reference, text prior and the policy backbone have not moved.
    pub fn apply_adapter_step_guard(&self) -> Result<GuardReport, TrainError> {
        Ok(self.guard.check(&self.models)?)
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, vocab: Option<&Vocabulary>) -> Checkpoint {
        let mut ck = Checkpoint::from_models(&self.models, self.step);
        ck.extra.insert("velocity".into(), encode_all(self.velocity.tensors()));
        ck.vocabulary = vocab.map(|v| v.words().to_vec()).unwrap_or_default();
        ck.meta = serde_json::json!({
            "micro": self.micro,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "train_config": cfg,
        });
        ck
    }

    /// Restores weights, optimizer state and data position.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut state = Self::new(ck.to_models()?);
        let velocity = ck.extra.get("velocity").ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        restore_into(state.velocity.tensors_mut(), velocity)?;
        let field = |k: &str| ck.meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| TrainError::Config(format!("checkpoint meta lacks `{k}`")));
        state.step = ck.step;
        state.micro = field("micro")?;
        state.epoch = field("epoch")? as usize;
        state.cursor = field("cursor")? as usize;
        Ok(state)
    }
}

/// Training configuration stored in a checkpoint, if any.
pub fn checkpoint_train_config(ck: &Checkpoint) -> Option<TrainConfig> {
    ck.meta.get("train_config").and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn policy_scores(models: &ModelSet, r: &TokenizedRecord) -> Result<[f64; 4], ScorerError> {
    let p = &models.policy;
    Ok([p.sequence_log_prob(&r.w)?, p.sequence_log_prob(&r.vr)?, p.sequence_log_prob(&r.er)?, p.sequence_log_prob(&r.w_neg)?])
}

/// Scores one micro-batch, accumulates mean-reduced gradients, and applies an
/// SGD-with-momentum update once every `grad_accum_steps` micro-batches.
pub fn train_step(state: &mut TrainState, data: &TrainData, batch: &[usize], cfg: &TrainConfig) -> Result<StepLog, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let loss_cfg = cfg.effective_loss();
    let upstream_scale = 1.0 / (batch.len() * cfg.grad_accum_steps) as f64;
    let n = batch.len() as f64;
    let (mut loss, mut tpd, mut pmp, mut margin, mut pref, mut av) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &i in batch {
        let r = &data.records[i];
        let s = scored(policy_scores(&state.models, r)?, &data.frozen[i]);
        let (l, g) = avem_dpo_loss_with_grad(&s, r.tag, r.mask, &loss_cfg)
            .map_err(|source| TrainError::NonFinite { step: state.step, id: r.id.clone(), source, dump: None })?;
        if !l.total.is_finite() {
            return Err(TrainError::NonFinite {
                step: state.step,
                id: r.id.clone(),
                source: LossError::NonFinite { field: "total", value: l.total },
                dump: None,
            });
        }
        for (ts, dl) in [(&r.w, g.w), (&r.vr, g.vr), (&r.er, g.er), (&r.w_neg, g.w_neg)] {
            if dl != 0.0 {
                state.models.policy.log_prob_with_grad(ts, dl * upstream_scale, &mut state.grad)?;
            }
        }
        let m = Margins::of(&s, loss_cfg.beta());
        loss += l.total;
        tpd += l.tpd_term;
        pmp += l.pmp_term;
        let d_w = s.logp_policy_w - s.logp_ref_w;
        let d_vr = s.logp_policy_vr - s.logp_ref_vr;
        let d_er = s.logp_policy_er - s.logp_ref_er;
        margin += loss_cfg.beta() * (d_w - loss_cfg.beta_vr() * d_vr - loss_cfg.beta_er() * d_er);
        pref += m.preference_score();
        av += m.av_score();
    }
    state.micro += 1;
    let updated = state.micro.is_multiple_of(cfg.grad_accum_steps as u64);
    if updated {
        if let Some(c) = cfg.max_grad_norm {
            let n = state.grad.norm();
            if n > c {
                state.grad.scale(c / n);
            }
        }
        state.velocity.scale(cfg.momentum);
        state.velocity.add_scaled(&state.grad, 1.0);
        state.models.policy.trainable_mut()?.add_scaled(&state.velocity, -cfg.learning_rate);
        state.grad.scale(0.0);
        state.step += 1;
    }
    Ok(StepLog {
        step: state.step,
        micro: state.micro,
        epoch: state.epoch,
        updated,
        loss: loss / n,
        tpd_term: tpd / n,
        pmp_term: pmp / n,
        reward_margin: margin / n,
        preference_accuracy: pref / n,
        av_accuracy: av / n,
    })
}

/// Maximum-likelihood fitting of the chosen responses, returning a set whose
/// policy and reference both start from the fitted weights.
pub fn supervised_warm_start(models: &ModelSet, records: &[TokenizedRecord], cfg: &TrainConfig, steps: u64) -> Result<ModelSet, TrainError> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut policy = models.policy.clone();
    let mut velocity = policy.trainable().ok_or(TrainError::Scorer(ScorerError::Frozen(policy.role())))?.zeros_like();
    let mut grad = velocity.clone();
    let mut order = Vec::new();
    let mut epoch = 0;
    for _ in 0..steps {
        let take = cfg.batch_size.min(records.len());
        if order.len() < take {
            order.extend(epoch_order(cfg.seed, epoch, records.len()));
            epoch += 1;
        }
        let batch: Vec<usize> = order.drain(..take).collect();
        for &i in &batch {
            policy.log_prob_with_grad(&records[i].w, -1.0 / take as f64, &mut grad)?;
        }
        velocity.scale(cfg.momentum);
        velocity.add_scaled(&grad, 1.0);
        policy.trainable_mut()?.add_scaled(&velocity, -cfg.learning_rate);
        grad.scale(0.0);
    }
    let fitted = policy.trainable().expect("policy is trainable").clone();
    Ok(ModelSet::from_parts(models.policy.config().clone(), models.reference.backbone().clone(), fitted.clone(), fitted))
}

/// Record order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut item_rng(seed, &format!("epoch:{epoch}")));
    order
}

/// Whole-dataset preference metrics of the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefMetrics {
    pub step: u64,
    pub loss: f64,
    pub preference_accuracy: f64,
    pub av_accuracy: f64,
    pub mean_margin_vr: f64,
    pub mean_margin_er: f64,
    pub mean_margin_av: f64,
}

pub fn evaluate_preferences(models: &ModelSet, data: &TrainData, cfg: &LossConfig, step: u64) -> Result<PrefMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = data.len() as f64;
    let mut out = PrefMetrics { step, loss: 0.0, preference_accuracy: 0.0, av_accuracy: 0.0, mean_margin_vr: 0.0, mean_margin_er: 0.0, mean_margin_av: 0.0 };
    for (r, f) in data.records.iter().zip(&data.frozen) {
        let s = scored(policy_scores(models, r)?, f);
        let l = avem_dpo_loss_with_grad(&s, r.tag, r.mask, cfg)
            .map_err(|source| TrainError::NonFinite { step, id: r.id.clone(), source, dump: None })?
            .0;
        let m = Margins::of(&s, cfg.beta());
        out.loss += l.total;
        out.preference_accuracy += m.preference_score();
        out.av_accuracy += m.av_score();
        out.mean_margin_vr += m.vr;
        out.mean_margin_er += m.er;
        out.mean_margin_av += m.av;
    }
    for v in [
        &mut out.loss,
        &mut out.preference_accuracy,
        &mut out.av_accuracy,
        &mut out.mean_margin_vr,
        &mut out.mean_margin_er,
        &mut out.mean_margin_av,
    ] {
        *v /= n;
    }
    Ok(out)
}

/// Optional side effects of [`train_loop`].
#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Directory for periodic checkpoints and non-finite dumps.
    pub out_dir: Option<PathBuf>,
    /// Evaluate on the full dataset every this many optimizer steps (and at step 0).
    pub eval_every: Option<u64>,
    pub vocabulary: Option<Vocabulary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepLog>,
    pub evals: Vec<PrefMetrics>,
    pub guard_reports: Vec<GuardReport>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.json"))
}

/// Runs epochs from the state's current position until `epochs` or `max_steps` is reached.
pub fn train_loop(cfg: &TrainConfig, data: &TrainData, mut state: TrainState, opts: &LoopOptions) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let loss_cfg = cfg.effective_loss();
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut guard_reports = Vec::new();
    let done = |s: &TrainState| cfg.max_steps.is_some_and(|m| s.step >= m);
    if let Some(every) = opts.eval_every {
        if every > 0 && state.step.is_multiple_of(every) {
            evals.push(evaluate_preferences(&state.models, data, &loss_cfg, state.step)?);
        }
    }
    while state.epoch < cfg.epochs && !done(&state) {
        let order = epoch_order(cfg.seed, state.epoch, data.len());
        while state.cursor < order.len() && !done(&state) {
            let end = (state.cursor + cfg.batch_size).min(order.len());
            let batch = order[state.cursor..end].to_vec();
            state.cursor = end;
            let log = match train_step(&mut state, data, &batch, cfg) {
                Ok(log) => log,
                Err(TrainError::NonFinite { step, id, source, .. }) => {
                    let dump = match &opts.out_dir {
                        Some(dir) => {
                            let p = dir.join(format!("nonfinite-dump-{step:06}.json"));
                            state.checkpoint(cfg, opts.vocabulary.as_ref()).save(&p)?;
                            Some(p)
                        }
                        None => None,
                    };
                    return Err(TrainError::NonFinite { step, id, source, dump });
                }
                Err(e) => return Err(e),
            };
            let updated = log.updated;
            log::debug!("step {} loss {:.6} pref {:.3}", log.step, log.loss, log.preference_accuracy);
            history.push(log);
            if updated {
                if let Some(every) = opts.eval_every.filter(|&e| e > 0) {
                    if state.step.is_multiple_of(every) {
                        evals.push(evaluate_preferences(&state.models, data, &loss_cfg, state.step)?);
                    }
                }
                if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                    guard_reports.push(state.apply_adapter_step_guard()?);
                    if let Some(dir) = &opts.out_dir {
                        state.checkpoint(cfg, opts.vocabulary.as_ref()).save(&checkpoint_path(dir, state.step))?;
                    }
                }
            }
        }
        if state.cursor >= order.len() {
            state.epoch += 1;
            state.cursor = 0;
        }
    }
    guard_reports.push(state.apply_adapter_step_guard()?);
    Ok(TrainOutcome { state, history, evals, guard_reports })
}

pub fn write_history(path: &Path, history: &[StepLog]) -> Result<(), IoError> {
    io::write_jsonl(path, history)
}

pub fn read_history(path: &Path) -> Result<Vec<StepLog>, IoError> {
    io::read_jsonl(path)
}
