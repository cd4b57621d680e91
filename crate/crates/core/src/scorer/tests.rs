use super::*;
use ndarray::Array2;

fn streams(tag: ModalityTag) -> TokenStreams {
    TokenStreams {
        audio_tokens: vec![1, 5, 9],
        video_tokens: vec![2, 7, 3, 11],
        prompt_tokens: vec![4, 8, 15],
        response_tokens: vec![16, 23, 42],
        modality_tag: tag,
    }
}

fn perturbed(cfg: &ScorerConfig) -> ModelSet {
    let mut m = init_models(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    m.policy.trainable_mut().unwrap().perturb_adapters(&mut rng, 0.2);
    m
}

#[test]
fn zero_head_gives_uniform_next_token() {
    let cfg = ScorerConfig { text_vocab: 16, zero_head: true, ..ScorerConfig::default() };
    let m = init_models(&cfg).unwrap();
    let ts = TokenStreams { prompt_tokens: vec![1, 2], response_tokens: vec![3], ..streams(ModalityTag::AudioVisual) };
    let lp = m.policy.sequence_log_prob(&ts).unwrap();
    assert!((lp - (1.0f64 / 16.0).ln()).abs() < 1e-12);
    assert!((lp + 2.772589).abs() < 1e-6);
}

#[test]
fn reference_matches_policy_at_init() {
    let m = init_models(&ScorerConfig::default()).unwrap();
    for tag in ModalityTag::ALL {
        let ts = streams(tag);
        assert_eq!(m.policy.sequence_log_prob(&ts).unwrap(), m.reference.sequence_log_prob(&ts).unwrap());
    }
    assert!(m.text_prior.shares_backbone_with(&m.reference));
    assert!(!m.policy.shares_backbone_with(&m.reference));
}

#[test]
fn text_prior_ignores_audio_and_video() {
    let m = init_models(&ScorerConfig::default()).unwrap();
    let ts = streams(ModalityTag::Visual);
    let a = m.text_prior.sequence_log_prob(&ts).unwrap();
    let b = m.text_prior.sequence_log_prob(&ts.with_av(vec![31, 0], vec![])).unwrap();
    assert_eq!(a, b);
    let full = m.reference.sequence_log_prob(&ts).unwrap();
    let swapped = m.reference.sequence_log_prob(&ts.with_av(vec![31, 0], vec![6])).unwrap();
    assert_ne!(full, swapped);
}

#[test]
fn same_seed_is_bit_identical() {
    let cfg = ScorerConfig::default();
    let a = init_models(&cfg).unwrap();
    let b = init_models(&cfg).unwrap();
    assert_eq!(a.reference.backbone(), b.reference.backbone());
    assert_eq!(a.policy.trainable(), b.policy.trainable());
    let c = init_models(&ScorerConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(a.reference.backbone(), c.reference.backbone());
}

#[test]
fn frozen_roles_reject_mutation() {
    let mut m = init_models(&ScorerConfig::default()).unwrap();
    assert_eq!(m.reference.trainable_mut().unwrap_err(), ScorerError::Frozen(ModelRole::Reference));
    assert_eq!(m.text_prior.trainable_mut().unwrap_err(), ScorerError::Frozen(ModelRole::TextPrior));
    let mut g = m.policy.trainable().unwrap().zeros_like();
    assert!(m.text_prior.log_prob_with_grad(&streams(ModalityTag::AudioVisual), 1.0, &mut g).is_err());
}

#[test]
fn input_validation() {
    let m = init_models(&ScorerConfig::default()).unwrap();
    let ts = streams(ModalityTag::AudioVisual);
    assert_eq!(m.policy.sequence_log_prob(&ts.with_response(vec![])).unwrap_err(), ScorerError::EmptyResponse);
    assert!(matches!(
        m.policy.sequence_log_prob(&ts.with_response(vec![64])),
        Err(ScorerError::TokenOutOfRange { stream: "response", .. })
    ));
    assert!(matches!(m.policy.sequence_log_prob(&ts.with_av(vec![32], vec![])), Err(ScorerError::TokenOutOfRange { .. })));
    assert!(matches!(m.policy.sequence_log_prob(&ts.with_response(vec![1; 40])), Err(ScorerError::TooLong { .. })));
    let bad = ScorerConfig { width: 15, ..ScorerConfig::default() };
    assert!(init_models(&bad).is_err());
}

/// Scores every vocabulary entry as the final token and normalizes by brute force.
#[test]
fn next_token_distribution_matches_brute_force() {
    let m = perturbed(&ScorerConfig::default());
    let ts = streams(ModalityTag::AudioVisual);
    let probs = m.policy.next_token_distributions(&ts).unwrap();
    let prefix = &ts.response_tokens[..2];
    let scores: Vec<f64> = (0..64u32)
        .map(|tok| {
            let mut r = prefix.to_vec();
            r.push(tok);
            let with = m.policy.sequence_log_prob(&ts.with_response(r)).unwrap();
            let base = m.policy.sequence_log_prob(&ts.with_response(prefix.to_vec())).unwrap();
            with - base
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    assert!((z - 1.0).abs() < 1e-6);
    for (tok, s) in scores.iter().enumerate() {
        assert!((probs[[2, tok]] - s.exp()).abs() < 1e-9);
    }
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn log_prob_is_sum_of_row_log_probs() {
    let m = perturbed(&ScorerConfig::default());
    let ts = streams(ModalityTag::Audio);
    let probs = m.policy.next_token_distributions(&ts).unwrap();
    let direct: f64 = ts.response_tokens.iter().enumerate().map(|(r, &t)| probs[[r, t as usize]].ln()).sum();
    assert!((direct - m.policy.sequence_log_prob(&ts).unwrap()).abs() < 1e-12);
}

#[test]
fn attention_share_sums_to_hundred() {
    let m = init_models(&ScorerConfig { layers: 2, ..ScorerConfig::default() }).unwrap();
    let s = m.policy.attention_share(&streams(ModalityTag::AudioVisual)).unwrap();
    assert!((s.audio_pct + s.video_pct + s.text_pct - 100.0).abs() < 1e-9);
    let (a, v) = s.within_multimodal();
    assert!((a + v - 100.0).abs() < 1e-9);
}

#[test]
fn attention_share_of_planted_map() {
    // Ten columns: one audio, three video, six text. Uniform rows give 10/30/60.
    let segments = [0, 1, 1, 1, 2, 2, 2, 2, 2, 2];
    let map = Array2::from_elem((10, 10), 0.1);
    let s = aggregate_attention_share([&map], &segments, 0..10);
    assert!((s.audio_pct - 10.0).abs() < 1e-9);
    assert!((s.video_pct - 30.0).abs() < 1e-9);
    assert!((s.text_pct - 60.0).abs() < 1e-9);
    let (a, v) = s.within_multimodal();
    assert!((a - 25.0).abs() < 1e-9 && (v - 75.0).abs() < 1e-9);
}

#[test]
fn attention_share_equals_direct_average() {
    let m = perturbed(&ScorerConfig { layers: 2, ..ScorerConfig::default() });
    let ts = streams(ModalityTag::AudioVisual);
    let (maps, segments, rows) = m.policy.attention_maps(&ts).unwrap();
    assert_eq!(maps.len(), 4);
    let mut per_seg = [0.0; 3];
    let mut n = 0.0;
    for map in &maps {
        for i in rows.clone() {
            for j in 0..=i {
                per_seg[segments[j]] += map[[i, j]];
            }
            n += 1.0;
        }
    }
    let s = m.policy.attention_share(&ts).unwrap();
    assert!((s.audio_pct - 100.0 * per_seg[0] / n).abs() < 1e-9);
    assert!((s.video_pct - 100.0 * per_seg[1] / n).abs() < 1e-9);
    assert!((s.text_pct - 100.0 * per_seg[2] / n).abs() < 1e-9);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ScorerConfig {
        layers: 2,
        adapter: AdapterConfig {
            rank: 2,
            scale: 4.0,
            targets: vec![
                AdapterTarget::Query,
                AdapterTarget::Key,
                AdapterTarget::Value,
                AdapterTarget::Output,
                AdapterTarget::MlpUp,
                AdapterTarget::MlpDown,
                AdapterTarget::Head,
            ],
        },
        ..ScorerConfig::default()
    };
    let mut m = perturbed(&cfg);
    let ts = streams(ModalityTag::AudioVisual);
    let mut grads = m.policy.trainable().unwrap().zeros_like();
    m.policy.log_prob_with_grad(&ts, 1.0, &mut grads).unwrap();

    let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, name) in names.iter().enumerate() {
        let shape = grads.tensors()[ti].1.dim();
        for &(i, j) in &[(0, 0), (shape.0 - 1, shape.1 - 1), (shape.0 / 2, shape.1 / 2)] {
            let analytic = grads.tensors()[ti].1[[i, j]];
            let mut eval = |delta: f64| {
                let tr = m.policy.trainable_mut().unwrap();
                tr.tensors_mut()[ti].1[[i, j]] += delta;
                let lp = m.policy.sequence_log_prob(&ts).unwrap();
                m.policy.trainable_mut().unwrap().tensors_mut()[ti].1[[i, j]] -= delta;
                lp
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - analytic).abs() / (1.0 + numeric.abs());
            assert!(err < 1e-6, "{name}[{i},{j}]: analytic {analytic} numeric {numeric}");
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-6);
}

#[test]
fn upstream_scales_gradient_linearly() {
    let m = perturbed(&ScorerConfig::default());
    let ts = streams(ModalityTag::Visual);
    let mut g1 = m.policy.trainable().unwrap().zeros_like();
    let mut g2 = g1.clone();
    m.policy.log_prob_with_grad(&ts, 1.0, &mut g1).unwrap();
    m.policy.log_prob_with_grad(&ts, -2.5, &mut g2).unwrap();
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert!((a * -2.5 - b).abs() < 1e-12);
    }
}

#[test]
fn guard_detects_frozen_drift() {
    let mut m = init_models(&ScorerConfig::default()).unwrap();
    let guard = FrozenGuard::capture(&m);
    let r = guard.check(&m).unwrap();
    assert_eq!(r.policy_trainable_change, 0.0);
    m.policy.trainable_mut().unwrap().audio_proj[[0, 0]] += 0.5;
    let r = guard.check(&m).unwrap();
    assert!((r.policy_trainable_change - 0.5).abs() < 1e-12);

    let mut backbone = m.reference.backbone().clone();
    backbone.text_emb[[0, 0]] += 1e-9;
    let tr = m.reference.trainable().unwrap().clone();
    let drifted = ModelSet::from_parts(m.policy.config().clone(), backbone, m.policy.trainable().unwrap().clone(), tr);
    assert!(matches!(guard.check(&drifted), Err(ScorerError::FrozenDrift(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = perturbed(&ScorerConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut ck = Checkpoint::from_models(&m, 7);
    ck.vocabulary = vec!["<unk>".into(), "happy".into()];
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let back = loaded.to_models().unwrap();
    assert_eq!(back.policy.trainable(), m.policy.trainable());
    assert_eq!(back.reference.trainable(), m.reference.trainable());
    assert_eq!(back.reference.backbone(), m.reference.backbone());
    let ts = streams(ModalityTag::AudioVisual);
    assert_eq!(back.policy.sequence_log_prob(&ts).unwrap(), m.policy.sequence_log_prob(&ts).unwrap());
}

#[test]
fn checkpoint_rejects_tampered_tensor() {
    let m = init_models(&ScorerConfig::default()).unwrap();
    let mut ck = Checkpoint::from_models(&m, 0);
    ck.policy[0].rows += 1;
    assert!(matches!(ck.to_models(), Err(CheckpointError::Tensor { .. })));
    let mut ck = Checkpoint::from_models(&m, 0);
    ck.backbone.pop();
    assert!(ck.to_models().is_err());
}

#[test]
fn greedy_decode_follows_argmax() {
    let m = perturbed(&ScorerConfig::default());
    let ts = TokenStreams { response_tokens: vec![5], ..streams(ModalityTag::AudioVisual) };
    let out = m.policy.greedy_decode(&ts, 3).unwrap();
    assert_eq!(out.len(), 3);
    let mut resp = ts.response_tokens.clone();
    resp.extend(&out);
    let probs = m.policy.next_token_distributions(&ts.with_response(resp)).unwrap();
    for (k, &tok) in out.iter().enumerate() {
        let row = probs.row(k + 1);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(row[tok as usize], max);
    }
}
