//! Preference objectives over precomputed sequence log-likelihoods.
//!
//! Every objective here has the form `-log σ(z)` where `z` is an affine
//! function of the policy log-likelihoods. They are evaluated as
//! `softplus(-z)`, never as `ln(sigmoid(z))`, so arguments of magnitude in
//! the hundreds stay finite.
//!
//! Notation used in field names: `w` is the chosen response, `vr` the
//! video-relevant rejection (spurious cue), `er` the emotion-relevant
//! rejection (hallucinated cue), and `w_neg` the chosen response scored
//! under the rejected audiovisual input.

use serde::{Deserialize, Serialize};

use crate::types::{ModalityTag, PmpMask};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("non-finite value {value} in field `{field}`")]
    NonFinite { field: &'static str, value: f64 },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("rejected input mask {mask:?} does not match prompt modality {tag}")]
    MaskMismatch { tag: ModalityTag, mask: PmpMask },
    #[error("missing text-prior log-likelihood `{0}`")]
    MissingTextPrior(&'static str),
}

/// Hyperparameters of the objective family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLossConfig", into = "RawLossConfig")]
pub struct LossConfig {
    beta: f64,
    beta_vr: f64,
    beta_er: f64,
    gamma_tpd: f64,
    lambda_av: f64,
}

/// Slack allowed on `beta_vr + beta_er = 1` for decimal weights such as 0.3/0.7.
const WEIGHT_SUM_TOL: f64 = 1e-12;

impl LossConfig {
    pub fn new(beta: f64, beta_vr: f64, beta_er: f64, gamma_tpd: f64, lambda_av: f64) -> Result<Self, LossError> {
        let all = [("beta", beta), ("beta_vr", beta_vr), ("beta_er", beta_er), ("gamma_tpd", gamma_tpd), ("lambda_av", lambda_av)];
        for (name, v) in all {
            if !v.is_finite() {
                return Err(LossError::InvalidConfig(format!("{name} must be finite, got {v}")));
            }
        }
        if beta <= 0.0 {
            return Err(LossError::InvalidConfig(format!("beta must be > 0, got {beta}")));
        }
        if !(0.0..=1.0).contains(&beta_vr) || !(0.0..=1.0).contains(&beta_er) {
            return Err(LossError::InvalidConfig(format!(
                "rejection weights must lie in [0, 1], got beta_vr={beta_vr}, beta_er={beta_er}"
            )));
        }
        if (beta_vr + beta_er - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(LossError::InvalidConfig(format!(
                "beta_vr + beta_er must equal 1, got {}",
                beta_vr + beta_er
            )));
        }
        if gamma_tpd < 0.0 {
            return Err(LossError::InvalidConfig(format!("gamma_tpd must be >= 0, got {gamma_tpd}")));
        }
        if lambda_av < 0.0 {
            return Err(LossError::InvalidConfig(format!("lambda_av must be >= 0, got {lambda_av}")));
        }
        Ok(Self { beta, beta_vr, beta_er, gamma_tpd, lambda_av })
    }

    /// β = 0.1, β_vr = β_er = 0.5, γ_TPD = 0.2, λ_av = 1.0.
    pub fn published_defaults() -> Self {
        Self { beta: 0.1, beta_vr: 0.5, beta_er: 0.5, gamma_tpd: 0.2, lambda_av: 1.0 }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn beta_vr(&self) -> f64 {
        self.beta_vr
    }
    pub fn beta_er(&self) -> f64 {
        self.beta_er
    }
    pub fn gamma_tpd(&self) -> f64 {
        self.gamma_tpd
    }
    pub fn lambda_av(&self) -> f64 {
        self.lambda_av
    }

    pub fn with_beta(self, beta: f64) -> Result<Self, LossError> {
        Self::new(beta, self.beta_vr, self.beta_er, self.gamma_tpd, self.lambda_av)
    }
    pub fn with_rejection_weights(self, beta_vr: f64, beta_er: f64) -> Result<Self, LossError> {
        Self::new(self.beta, beta_vr, beta_er, self.gamma_tpd, self.lambda_av)
    }
    pub fn with_gamma_tpd(self, gamma_tpd: f64) -> Result<Self, LossError> {
        Self::new(self.beta, self.beta_vr, self.beta_er, gamma_tpd, self.lambda_av)
    }
    pub fn with_lambda_av(self, lambda_av: f64) -> Result<Self, LossError> {
        Self::new(self.beta, self.beta_vr, self.beta_er, self.gamma_tpd, lambda_av)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::published_defaults()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawLossConfig {
    beta: f64,
    beta_vr: f64,
    beta_er: f64,
    gamma_tpd: f64,
    lambda_av: f64,
}

impl TryFrom<RawLossConfig> for LossConfig {
    type Error = LossError;
    fn try_from(r: RawLossConfig) -> Result<Self, Self::Error> {
        LossConfig::new(r.beta, r.beta_vr, r.beta_er, r.gamma_tpd, r.lambda_av)
    }
}

impl From<LossConfig> for RawLossConfig {
    fn from(c: LossConfig) -> Self {
        RawLossConfig { beta: c.beta, beta_vr: c.beta_vr, beta_er: c.beta_er, gamma_tpd: c.gamma_tpd, lambda_av: c.lambda_av }
    }
}

/// Log-likelihoods of one chosen and one rejected response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub policy_chosen: f64,
    pub ref_chosen: f64,
    pub policy_rejected: f64,
    pub ref_rejected: f64,
}

impl PairScores {
    fn validate(&self) -> Result<(), LossError> {
        check("policy_chosen", self.policy_chosen)?;
        check("ref_chosen", self.ref_chosen)?;
        check("policy_rejected", self.policy_rejected)?;
        check("ref_rejected", self.ref_rejected)?;
        Ok(())
    }
}

/// Every sequence log-likelihood one training record needs.
///
/// Text-prior entries are optional because only the debiased objectives
/// read them; they are constants with respect to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequences {
    pub logp_policy_w: f64,
    pub logp_ref_w: f64,
    pub logp_policy_vr: f64,
    pub logp_ref_vr: f64,
    pub logp_policy_er: f64,
    pub logp_ref_er: f64,
    pub logp_policy_w_neg: f64,
    pub logp_ref_w_neg: f64,
    pub logp_text_w: Option<f64>,
    pub logp_text_vr: Option<f64>,
    pub logp_text_er: Option<f64>,
}

impl ScoredSequences {
    /// Chosen vs. the video-relevant rejection.
    pub fn pair_vr(&self) -> PairScores {
        PairScores {
            policy_chosen: self.logp_policy_w,
            ref_chosen: self.logp_ref_w,
            policy_rejected: self.logp_policy_vr,
            ref_rejected: self.logp_ref_vr,
        }
    }

    /// Chosen vs. the emotion-relevant rejection.
    pub fn pair_er(&self) -> PairScores {
        PairScores {
            policy_chosen: self.logp_policy_w,
            ref_chosen: self.logp_ref_w,
            policy_rejected: self.logp_policy_er,
            ref_rejected: self.logp_ref_er,
        }
    }

    /// Chosen response under the chosen vs. the rejected audiovisual input.
    pub fn pair_av(&self) -> PairScores {
        PairScores {
            policy_chosen: self.logp_policy_w,
            ref_chosen: self.logp_ref_w,
            policy_rejected: self.logp_policy_w_neg,
            ref_rejected: self.logp_ref_w_neg,
        }
    }
}

/// Partial derivatives with respect to the four policy log-likelihoods.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrad {
    pub w: f64,
    pub vr: f64,
    pub er: f64,
    pub w_neg: f64,
}

impl PolicyGrad {
    fn scaled(self, k: f64) -> Self {
        PolicyGrad { w: self.w * k, vr: self.vr * k, er: self.er * k, w_neg: self.w_neg * k }
    }

    fn add(self, o: Self) -> Self {
        PolicyGrad { w: self.w + o.w, vr: self.vr + o.vr, er: self.er + o.er, w_neg: self.w_neg + o.w_neg }
    }
}

/// Total objective plus its logged components (`tpd_term`, `pmp_term`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvemLoss {
    pub total: f64,
    pub tpd_term: f64,
    pub pmp_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn reduce(self, values: &[f64]) -> f64 {
        let sum: f64 = values.iter().sum();
        match self {
            Reduction::Sum => sum,
            Reduction::Mean if values.is_empty() => 0.0,
            Reduction::Mean => sum / values.len() as f64,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check(field: &'static str, v: f64) -> Result<f64, LossError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite { field, value: v })
    }
}

/// A Bradley-Terry logit `z` and its gradient with respect to policy log-probs.
#[derive(Debug, Clone, Copy)]
struct Logit {
    z: f64,
    dz: PolicyGrad,
}

impl Logit {
    /// Returns `softplus(-z)` and `d softplus(-z) / d logp`.
    fn loss(self) -> (f64, PolicyGrad) {
        (softplus(-self.z), self.dz.scaled(-sigmoid(-self.z)))
    }
}

fn pair_logit(p: &PairScores, beta: f64) -> f64 {
    let delta_w = p.policy_chosen - p.ref_chosen;
    let delta_l = p.policy_rejected - p.ref_rejected;
    beta * (delta_w - delta_l)
}

fn av_logit(s: &ScoredSequences, cfg: &LossConfig) -> Result<Logit, LossError> {
    check("logp_policy_w", s.logp_policy_w)?;
    check("logp_ref_w", s.logp_ref_w)?;
    check("logp_policy_w_neg", s.logp_policy_w_neg)?;
    check("logp_ref_w_neg", s.logp_ref_w_neg)?;
    let delta_w = s.logp_policy_w - s.logp_ref_w;
    let delta_neg = s.logp_policy_w_neg - s.logp_ref_w_neg;
    Ok(Logit {
        z: cfg.beta * (delta_w - delta_neg),
        dz: PolicyGrad { w: cfg.beta, w_neg: -cfg.beta, ..Default::default() },
    })
}

fn response_logit(s: &ScoredSequences, cfg: &LossConfig) -> Result<Logit, LossError> {
    check("logp_policy_w", s.logp_policy_w)?;
    check("logp_ref_w", s.logp_ref_w)?;
    check("logp_policy_vr", s.logp_policy_vr)?;
    check("logp_ref_vr", s.logp_ref_vr)?;
    check("logp_policy_er", s.logp_policy_er)?;
    check("logp_ref_er", s.logp_ref_er)?;
    let delta_w = s.logp_policy_w - s.logp_ref_w;
    let delta_vr = s.logp_policy_vr - s.logp_ref_vr;
    let delta_er = s.logp_policy_er - s.logp_ref_er;
    let b = cfg.beta;
    Ok(Logit {
        z: b * (delta_w - (cfg.beta_vr * delta_vr + cfg.beta_er * delta_er)),
        dz: PolicyGrad { w: b, vr: -b * cfg.beta_vr, er: -b * cfg.beta_er, w_neg: 0.0 },
    })
}

fn tpd_logit(s: &ScoredSequences, cfg: &LossConfig) -> Result<Logit, LossError> {
    let mut logit = response_logit(s, cfg)?;
    let tw = check("logp_text_w", s.logp_text_w.ok_or(LossError::MissingTextPrior("logp_text_w"))?)?;
    let tvr = check("logp_text_vr", s.logp_text_vr.ok_or(LossError::MissingTextPrior("logp_text_vr"))?)?;
    let ter = check("logp_text_er", s.logp_text_er.ok_or(LossError::MissingTextPrior("logp_text_er"))?)?;
    // The text-prior gap is not scaled by beta.
    logit.z -= cfg.gamma_tpd * (tw - (cfg.beta_vr * tvr + cfg.beta_er * ter));
    Ok(logit)
}

fn check_mask(tag: ModalityTag, mask: PmpMask) -> Result<(), LossError> {
    if PmpMask::for_tag(tag) == mask {
        Ok(())
    } else {
        Err(LossError::MaskMismatch { tag, mask })
    }
}

/// Single-rejection objective `-log σ(β(Δ_w - Δ_l))`.
pub fn naive_dpo_loss(p: &PairScores, cfg: &LossConfig) -> Result<f64, LossError> {
    p.validate()?;
    Ok(softplus(-pair_logit(p, cfg.beta)))
}

/// Implicit reward gap `β(Δ_w - Δ_l)`.
pub fn reward_margin(p: &PairScores, cfg: &LossConfig) -> Result<f64, LossError> {
    p.validate()?;
    Ok(pair_logit(p, cfg.beta))
}

/// Input-side preference: the chosen response under chosen vs. rejected audiovisual input.
/// Only reads the `w` and `w_neg` entries.
pub fn av_preference_loss(s: &ScoredSequences, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(av_logit(s, cfg)?.loss().0)
}

/// Same arithmetic as [`av_preference_loss`], after checking that the rejected
/// input was masked according to the prompt's modality.
pub fn pmp_loss(s: &ScoredSequences, tag: ModalityTag, mask: PmpMask, cfg: &LossConfig) -> Result<f64, LossError> {
    check_mask(tag, mask)?;
    av_preference_loss(s, cfg)
}

/// Weighted two-rejection objective.
pub fn response_preference_loss(s: &ScoredSequences, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(response_logit(s, cfg)?.loss().0)
}

/// Two-rejection objective with the text-prior penalty.
pub fn tpd_response_loss(s: &ScoredSequences, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(tpd_logit(s, cfg)?.loss().0)
}

/// `tpd_response_loss + λ_av · pmp_loss`.
pub fn avem_dpo_loss(s: &ScoredSequences, tag: ModalityTag, mask: PmpMask, cfg: &LossConfig) -> Result<AvemLoss, LossError> {
    avem_dpo_loss_with_grad(s, tag, mask, cfg).map(|(l, _)| l)
}

/// Loss value and its gradient with respect to the four policy log-likelihoods.
pub fn avem_dpo_loss_with_grad(
    s: &ScoredSequences,
    tag: ModalityTag,
    mask: PmpMask,
    cfg: &LossConfig,
) -> Result<(AvemLoss, PolicyGrad), LossError> {
    check_mask(tag, mask)?;
    let (tpd_term, g_tpd) = tpd_logit(s, cfg)?.loss();
    let (pmp_term, g_pmp) = av_logit(s, cfg)?.loss();
    let total = tpd_term + cfg.lambda_av * pmp_term;
    Ok((AvemLoss { total, tpd_term, pmp_term }, g_tpd.add(g_pmp.scaled(cfg.lambda_av))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_margin() -> ScoredSequences {
        ScoredSequences {
            logp_policy_w: -3.0,
            logp_ref_w: -3.0,
            logp_policy_vr: -4.0,
            logp_ref_vr: -4.0,
            logp_policy_er: -5.0,
            logp_ref_er: -5.0,
            logp_policy_w_neg: -6.0,
            logp_ref_w_neg: -6.0,
            logp_text_w: Some(-7.0),
            logp_text_vr: Some(-7.0),
            logp_text_er: Some(-7.0),
        }
    }

    // ln(1 + e^(-0.2)) and ln(1 + e^(0.2)).
    const SP_NEG: f64 = 0.598_138_869_381_591_8;
    const SP_POS: f64 = 0.798_138_869_381_591_8;
    const LN2: f64 = std::f64::consts::LN_2;

    fn cfg(beta: f64, gamma: f64, lambda: f64) -> LossConfig {
        LossConfig::new(beta, 0.5, 0.5, gamma, lambda).unwrap()
    }

    /// Policy log-probs shifted from a fixed reference by the given margins.
    fn margins(dw: f64, dvr: f64, der: f64, dneg: f64) -> ScoredSequences {
        ScoredSequences {
            logp_policy_w: -3.0 + dw,
            logp_policy_vr: -4.0 + dvr,
            logp_policy_er: -5.0 + der,
            logp_policy_w_neg: -6.0 + dneg,
            ..zero_margin()
        }
    }

    #[test]
    fn naive_dpo_examples() {
        let c = LossConfig::published_defaults();
        let p = PairScores { policy_chosen: -2.0, ref_chosen: -2.0, policy_rejected: -2.0, ref_rejected: -2.0 };
        assert!((naive_dpo_loss(&p, &c).unwrap() - LN2).abs() < 1e-12);
        let p = PairScores { policy_chosen: -1.0, ref_chosen: -2.0, policy_rejected: -3.0, ref_rejected: -2.0 };
        assert!((naive_dpo_loss(&p, &c).unwrap() - SP_NEG).abs() < 1e-12);
        assert!((reward_margin(&p, &c).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn av_preference_examples() {
        let c = LossConfig::published_defaults();
        assert!((av_preference_loss(&zero_margin(), &c).unwrap() - LN2).abs() < 1e-12);
        let s = margins(2.0, 0.0, 0.0, 0.0);
        assert!((av_preference_loss(&s, &c).unwrap() - SP_NEG).abs() < 1e-12);
        // Rejected-response entries are never read.
        let mut junk = s;
        junk.logp_policy_vr = f64::NAN;
        junk.logp_ref_er = f64::INFINITY;
        assert_eq!(av_preference_loss(&junk, &c).unwrap(), av_preference_loss(&s, &c).unwrap());
    }

    #[test]
    fn response_preference_examples() {
        let c = cfg(0.1, 0.2, 1.0);
        assert!((response_preference_loss(&zero_margin(), &c).unwrap() - LN2).abs() < 1e-12);
        let s = margins(1.0, -1.0, -1.0, 0.0);
        assert!((response_preference_loss(&s, &c).unwrap() - SP_NEG).abs() < 1e-12);
        let collapsed = LossConfig::new(0.1, 1.0, 0.0, 0.2, 1.0).unwrap();
        assert_eq!(response_preference_loss(&s, &collapsed).unwrap(), naive_dpo_loss(&s.pair_vr(), &collapsed).unwrap());
    }

    #[test]
    fn tpd_examples() {
        let mut s = margins(1.0, -1.0, -1.0, 0.0);
        s.logp_text_w = Some(-2.0);
        s.logp_text_vr = Some(-4.0);
        s.logp_text_er = Some(-4.0);
        assert!((tpd_response_loss(&s, &cfg(0.1, 0.2, 1.0)).unwrap() - SP_POS).abs() < 1e-12);
        assert_eq!(tpd_response_loss(&s, &cfg(0.1, 0.0, 1.0)).unwrap(), response_preference_loss(&s, &cfg(0.1, 0.0, 1.0)).unwrap());
    }

    #[test]
    fn combined_examples() {
        let l = avem_dpo_loss(&zero_margin(), ModalityTag::AudioVisual, PmpMask::None, &LossConfig::published_defaults()).unwrap();
        assert!((l.total - 2.0 * LN2).abs() < 1e-12);
        let s = margins(0.7, -0.3, 0.4, -1.1);
        let c = cfg(0.3, 0.2, 0.0);
        let l = avem_dpo_loss(&s, ModalityTag::Audio, PmpMask::KeepVideo, &c).unwrap();
        assert_eq!(l.total, tpd_response_loss(&s, &c).unwrap());
    }

    fn arb_scores() -> impl proptest::strategy::Strategy<Value = ScoredSequences> {
        use proptest::prelude::*;
        (prop::array::uniform8(-30.0f64..0.0), prop::array::uniform3(-30.0f64..0.0)).prop_map(|(p, t)| ScoredSequences {
            logp_policy_w: p[0],
            logp_ref_w: p[1],
            logp_policy_vr: p[2],
            logp_ref_vr: p[3],
            logp_policy_er: p[4],
            logp_ref_er: p[5],
            logp_policy_w_neg: p[6],
            logp_ref_w_neg: p[7],
            logp_text_w: Some(t[0]),
            logp_text_vr: Some(t[1]),
            logp_text_er: Some(t[2]),
        })
    }

    proptest::proptest! {
        #[test]
        fn reductions_hold(s in arb_scores(), beta in 0.01f64..2.0, bvr in 0.0f64..=1.0, gamma in 0.0f64..1.0) {
            let c = LossConfig::new(beta, bvr, 1.0 - bvr, 0.0, 0.0).unwrap();
            let r = response_preference_loss(&s, &c).unwrap();
            proptest::prop_assert!((tpd_response_loss(&s, &c).unwrap() - r).abs() < 1e-12);
            let l = avem_dpo_loss(&s, ModalityTag::Visual, PmpMask::KeepAudio, &c.with_gamma_tpd(gamma).unwrap()).unwrap();
            proptest::prop_assert!((l.total - l.tpd_term).abs() < 1e-12);
            let one = LossConfig::new(beta, 1.0, 0.0, 0.0, 0.0).unwrap();
            proptest::prop_assert!((response_preference_loss(&s, &one).unwrap() - naive_dpo_loss(&s.pair_vr(), &one).unwrap()).abs() < 1e-12);
            proptest::prop_assert!(r > 0.0 && l.total > 0.0);
        }
    }

    #[test]
    fn config_rejects_bad_weights() {
        assert!(LossConfig::new(0.1, 0.6, 0.5, 0.2, 1.0).is_err());
        assert!(LossConfig::new(0.0, 0.5, 0.5, 0.2, 1.0).is_err());
        assert!(LossConfig::new(0.1, 0.5, 0.5, -0.1, 1.0).is_err());
        assert!(LossConfig::new(0.1, 0.5, 0.5, 0.2, -1.0).is_err());
        assert!(LossConfig::new(0.1, 1.2, -0.2, 0.2, 1.0).is_err());
        assert!(LossConfig::new(0.1, 0.3, 0.7, 0.0, 0.0).is_ok());
    }

    #[test]
    fn config_deserialization_validates() {
        let bad = r#"{"beta":0.1,"beta_vr":0.9,"beta_er":0.9,"gamma_tpd":0.2,"lambda_av":1.0}"#;
        assert!(serde_json::from_str::<LossConfig>(bad).is_err());
        let good = serde_json::to_string(&LossConfig::published_defaults()).unwrap();
        assert_eq!(serde_json::from_str::<LossConfig>(&good).unwrap(), LossConfig::published_defaults());
    }

    #[test]
    fn non_finite_input_names_field() {
        let mut s = zero_margin();
        s.logp_policy_er = f64::NAN;
        let err = response_preference_loss(&s, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, LossError::NonFinite { field: "logp_policy_er", .. }), "{err}");
    }

    #[test]
    fn missing_text_prior_is_rejected() {
        let mut s = zero_margin();
        s.logp_text_vr = None;
        assert_eq!(
            tpd_response_loss(&s, &LossConfig::default()).unwrap_err(),
            LossError::MissingTextPrior("logp_text_vr")
        );
    }

    #[test]
    fn pmp_rejects_mask_mismatch() {
        let s = zero_margin();
        let cfg = LossConfig::default();
        assert!(pmp_loss(&s, ModalityTag::Audio, PmpMask::KeepVideo, &cfg).is_ok());
        assert!(matches!(
            pmp_loss(&s, ModalityTag::Audio, PmpMask::KeepAudio, &cfg),
            Err(LossError::MaskMismatch { .. })
        ));
        assert_eq!(
            pmp_loss(&s, ModalityTag::AudioVisual, PmpMask::None, &cfg).unwrap(),
            av_preference_loss(&s, &cfg).unwrap()
        );
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn reduction_modes() {
        assert_eq!(Reduction::Mean.reduce(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(Reduction::Sum.reduce(&[1.0, 2.0, 3.0]), 6.0);
        assert_eq!(Reduction::Mean.reduce(&[]), 0.0);
    }

    #[test]
    fn analytic_grad_matches_finite_differences() {
        let s = ScoredSequences {
            logp_policy_w: -2.3,
            logp_ref_w: -2.9,
            logp_policy_vr: -3.1,
            logp_ref_vr: -2.2,
            logp_policy_er: -4.4,
            logp_ref_er: -4.0,
            logp_policy_w_neg: -2.0,
            logp_ref_w_neg: -2.5,
            logp_text_w: Some(-3.0),
            logp_text_vr: Some(-5.0),
            logp_text_er: Some(-1.5),
        };
        let cfg = LossConfig::new(0.7, 0.3, 0.7, 0.4, 1.5).unwrap();
        let (_, g) = avem_dpo_loss_with_grad(&s, ModalityTag::Visual, PmpMask::KeepAudio, &cfg).unwrap();
        let f = |s: &ScoredSequences| avem_dpo_loss(s, ModalityTag::Visual, PmpMask::KeepAudio, &cfg).unwrap().total;
        let h = 1e-6;
        let fd = |set: &dyn Fn(&mut ScoredSequences, f64)| {
            let mut p = s;
            set(&mut p, h);
            let mut m = s;
            set(&mut m, -h);
            (f(&p) - f(&m)) / (2.0 * h)
        };
        let gw = fd(&|x, d| x.logp_policy_w += d);
        let gvr = fd(&|x, d| x.logp_policy_vr += d);
        let ger = fd(&|x, d| x.logp_policy_er += d);
        let gneg = fd(&|x, d| x.logp_policy_w_neg += d);
        for (a, n) in [(g.w, gw), (g.vr, gvr), (g.er, ger), (g.w_neg, gneg)] {
            assert!((a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
        }
    }
}
