use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reftrack::bbox::NormBox;
use reftrack::nn::{Tape, Tensor};
use reftrack::tracker::{
    assign_targets, composite_suite, cosine_rows, displacement, extrapolate, load_checkpoint, match_cost, save_checkpoint, step,
    tiny_config, tiny_video, tolerance, track_prompt, train, GtTarget, Model, ReferHead, SgmVariant,
    TrackState, TrackerConfig, TrainConfig,
};

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn composite_gradients_match_finite_differences() {
    for e in composite_suite(3).unwrap() {
        assert!(
            e.report.max_rel_err < tolerance(e.name),
            "{}: {:?}",
            e.name,
            e.report
        );
    }
}

#[test]
fn zeroed_encoder_text_path_ignores_text() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone()).unwrap();
    let video = tiny_video(&cfg, 0);
    let run = |m: &Model, prompt: &str| {
        let mut tape = Tape::new();
        let text = m.text(&mut tape, prompt).unwrap();
        let e = m.fuse_encode(&mut tape, &video.features[0], &text).unwrap();
        tape.value(e).clone()
    };
    assert!(max_diff(&run(&model, "the black cars"), &run(&model, "the white vehicles which are parked")) > 1e-6);
    model.zero_encoder_text_paths();
    assert_eq!(run(&model, "the black cars"), run(&model, "the white vehicles which are parked"));
}

#[test]
fn zeroed_sgm_text_path_reduces_to_query_stage() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone()).unwrap();
    model.zero_sgm_text_path();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(&[cfg.n_det, cfg.d_model], 1.0, &mut rng);
    let refs = model.anchors().to_vec();
    let run = |prompt: &str| {
        let mut tape = Tape::new();
        let text = model.text(&mut tape, prompt).unwrap();
        let qv = tape.constant(q.clone());
        let pos = model.query_pos(&mut tape, &refs);
        let out = model.sgm(&mut tape, qv, pos, text.s_emb, cfg.n_det).unwrap();
        let stage = model.sgm_query_stage(&mut tape, qv, pos).unwrap();
        (tape.value(out).clone(), tape.value(stage).clone())
    };
    let (a, stage) = run("the black cars");
    assert_eq!(a, stage);
    assert_eq!(a, run("the vehicles which are turning left").0);
}

#[test]
fn sgm_is_permutation_equivariant() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = cfg.n_det;
    let q = Tensor::randn(&[n, cfg.d_model], 1.0, &mut rng);
    let refs = model.anchors().to_vec();
    let perm = [2, 0, 3, 1];
    let run = |order: &[usize]| {
        let mut tape = Tape::new();
        let text = model.text(&mut tape, "the black cars which are moving").unwrap();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| q.row(i).to_vec()).collect();
        let qv = tape.constant(Tensor::from_rows(&rows).unwrap());
        let r: Vec<_> = order.iter().map(|&i| refs[i]).collect();
        let pos = model.query_pos(&mut tape, &r);
        let out = model.sgm(&mut tape, qv, pos, text.s_emb, n).unwrap();
        tape.value(out).clone()
    };
    let base = run(&[0, 1, 2, 3]);
    let permuted = run(&perm);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in permuted.row(k).iter().zip(base.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_head_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Tensor::randn(&[1, 7], 1.0, &mut rng);
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let rows = vec![s.row(0).to_vec(), s.row(0).iter().map(|v| v * 3.5).collect(), vec![0.0; 7]];
    let a = tape.constant(Tensor::from_rows(&rows).unwrap());
    let c = cosine_rows(&mut tape, a, sv).unwrap();
    let c = tape.value(c).clone();
    assert!((c.data()[0] - 1.0).abs() < 1e-12);
    assert!((c.data()[1] - 1.0).abs() < 1e-12);
    assert_eq!(c.data()[2], 0.0);
    for _ in 0..1000 {
        let a = tape.constant(Tensor::randn(&[3, 7], rng.random_range(0.01..100.0), &mut rng));
        let c = cosine_rows(&mut tape, a, sv).unwrap();
        assert!(tape.value(c).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn scb_score_is_scale_invariant_in_query_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Tensor::randn(&[1, 9], 1.0, &mut rng);
    let a = Tensor::randn(&[4, 9], 1.0, &mut rng);
    let score = |scale: f64| {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let av = tape.constant(a.clone());
        let av = tape.scale(av, scale).unwrap();
        let c = cosine_rows(&mut tape, av, sv).unwrap();
        tape.value(c).clone()
    };
    assert!(max_diff(&score(1.0), &score(17.0)) < 1e-12);
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
    ]
}

fn brute_min(cost: &[Vec<f64>]) -> f64 {
    // rows are queries, columns objects; every object must be covered when
    // there are at least as many queries, otherwise every query is used
    fn rec(c: usize, cost: &[Vec<f64>], used: &mut Vec<bool>, acc: f64, best: &mut f64, need: usize, got: usize) {
        let m = cost.first().map_or(0, Vec::len);
        if c == m {
            if got == need && acc < *best {
                *best = acc;
            }
            return;
        }
        if m - c > need - got {
            rec(c + 1, cost, used, acc, best, need, got);
        }
        for r in 0..cost.len() {
            if !used[r] && got < need {
                used[r] = true;
                rec(c + 1, cost, used, acc + cost[r][c], best, need, got + 1);
                used[r] = false;
            }
        }
    }
    let need = cost.len().min(cost.first().map_or(0, Vec::len));
    let mut best = f64::INFINITY;
    rec(0, cost, &mut vec![false; cost.len()], 0.0, &mut best, need, 0);
    if need == 0 {
        0.0
    } else {
        best
    }
}

#[test]
fn assignment_matches_enumeration_up_to_5x5() {
    let cfg = TrackerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..500 {
        let nq = rng.random_range(0..=5);
        let ng = rng.random_range(0..=5);
        let logits: Vec<f64> = (0..nq).map(|_| rng.random_range(-4.0..4.0)).collect();
        let boxes: Vec<[f64; 4]> = (0..nq).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<GtTarget> = (0..ng)
            .map(|k| GtTarget {
                id: k as u32 + 1,
                bbox: NormBox::from_slice(&random_box(&mut rng)),
            })
            .collect();
        let ids = vec![None; nq];
        let got = assign_targets(&logits, &boxes, &ids, &gt, &cfg);
        let cost: Vec<Vec<f64>> = (0..nq)
            .map(|q| gt.iter().map(|g| match_cost(logits[q], &boxes[q], &g.bbox, &cfg)).collect())
            .collect();
        let total: f64 = got.iter().enumerate().filter_map(|(q, g)| g.map(|g| cost[q][g])).sum();
        assert_eq!(got.iter().flatten().count(), nq.min(ng));
        let want = brute_min(&cost);
        assert!((total - want).abs() < 1e-9, "{total} vs {want}");
    }
}

#[test]
fn track_queries_keep_their_identity() {
    let cfg = TrackerConfig::default();
    let gt = vec![
        GtTarget {
            id: 7,
            bbox: NormBox::from_slice(&[0.5, 0.5, 0.1, 0.1]),
        },
        GtTarget {
            id: 9,
            bbox: NormBox::from_slice(&[0.2, 0.2, 0.1, 0.1]),
        },
    ];
    // the detect query sits right on object 7, the track query far away
    let boxes = vec![[0.5, 0.5, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1], [0.2, 0.2, 0.1, 0.1]];
    let ids = vec![None, Some(7), Some(4)];
    let got = assign_targets(&[3.0, -3.0, 0.0], &boxes, &ids, &gt, &cfg);
    assert_eq!(got, vec![Some(1), Some(0), None]);
}

#[test]
fn inference_respects_thresholds_and_patience() {
    let cfg = tiny_config();
    let video = tiny_video(&cfg, 1);
    let mut quiet = Model::new(cfg.clone()).unwrap();
    quiet.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = -50.0;
    let preds = track_prompt(&quiet, &video, "the black cars").unwrap();
    assert!(preds.iter().all(|p| p.objects.is_empty()));

    let mut loud = Model::new(cfg.clone()).unwrap();
    loud.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = 50.0;
    let mut state = TrackState::new();
    let first = step(&loud, "the black cars", &video.features[0], &mut state).unwrap();
    assert!(!first.objects.is_empty());
    let mut ids: Vec<u32> = first.objects.iter().map(|o| o.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), first.objects.len());
    // no reported pair overlaps beyond the duplicate threshold
    for (i, a) in first.objects.iter().enumerate() {
        for b in &first.objects[i + 1..] {
            assert!(a.bbox.iou(&b.bbox) <= cfg.dedup_iou);
        }
        assert!((-1.0..=1.0).contains(&a.refer_score));
    }
    let second = step(&loud, "the black cars", &video.features[1], &mut state).unwrap();
    for id in &ids {
        assert!(second.objects.iter().any(|o| o.id == *id), "track {id} lost");
    }
    // switch detection off: tracks survive miss_patience - 1 frames, then go
    loud.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = -50.0;
    for k in 1..=cfg.miss_patience {
        step(&loud, "the black cars", &video.features[2], &mut state).unwrap();
        assert_eq!(state.tracks.is_empty(), k == cfg.miss_patience);
    }
}

#[test]
fn motion_prior_extrapolates_centres_only() {
    let prev = [0.40, 0.50, 0.10, 0.08];
    let next = [0.43, 0.48, 0.12, 0.07];
    let v = displacement(&prev, &next);
    assert!((v[0] - 0.03).abs() < 1e-12 && (v[1] + 0.02).abs() < 1e-12);
    assert_eq!(extrapolate(&next, v, 0.0), next);
    let r = extrapolate(&next, v, 0.5);
    assert!((r[0] - 0.445).abs() < 1e-12 && (r[1] - 0.47).abs() < 1e-12);
    assert_eq!(&r[2..], &next[2..]);
}

#[test]
fn motion_and_refresh_keep_ids_unique() {
    let cfg = TrackerConfig {
        motion: 1.0,
        track_refresh: true,
        ..tiny_config()
    };
    let video = tiny_video(&cfg, 4);
    let mut m = Model::new(cfg).unwrap();
    m.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = 50.0;
    let preds = track_prompt(&m, &video, "the white cars").unwrap();
    assert_eq!(preds.len(), video.num_frames());
    for p in &preds {
        let mut ids: Vec<u32> = p.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), p.objects.len());
    }
    // every track always fires, so identities from frame 0 persist
    let first: Vec<u32> = preds[0].objects.iter().map(|o| o.id).collect();
    assert!(!first.is_empty());
    for p in &preds[1..] {
        assert!(first.iter().all(|id| p.objects.iter().any(|o| o.id == *id)));
    }
}

#[test]
fn referred_set_shrinks_as_threshold_rises() {
    let cfg = tiny_config();
    let video = tiny_video(&cfg, 2);
    let mut m = Model::new(cfg).unwrap();
    m.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = 50.0;
    let preds = track_prompt(&m, &video, "the black cars").unwrap();
    let mut prev = usize::MAX;
    for beta in [0.05, 0.3, 0.4, 0.5, 0.6, 0.95] {
        let n: usize = preds.iter().map(|p| p.referred(beta).count()).sum();
        assert!(n <= prev);
        prev = n;
    }
}

fn tiny_train(cfg: &TrackerConfig, seed: u64) -> Model {
    let video = tiny_video(cfg, 0);
    let mut m = Model::new(cfg.clone()).unwrap();
    let tc = TrainConfig {
        seed,
        steps: 4,
        clip_len: 2,
        log_every: 0,
        ..TrainConfig::default()
    };
    train(&mut m, &[video], &tc).unwrap();
    m
}

#[test]
fn training_is_bit_identical_per_seed() {
    let cfg = tiny_config();
    let a = tiny_train(&cfg, 5);
    let b = tiny_train(&cfg, 5);
    let c = tiny_train(&cfg, 6);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_ne!(a.params, Model::new(cfg).unwrap().params);
}

#[test]
fn single_clean_group_ignores_noise_level() {
    let base = TrackerConfig {
        denoise_groups: 1,
        denoise_variance: 0.0,
        ..tiny_config()
    };
    let noisy = TrackerConfig {
        denoise_variance: 0.3,
        ..base.clone()
    };
    assert_eq!(tiny_train(&base, 1).params, tiny_train(&noisy, 1).params);
}

#[test]
fn frozen_text_table_never_moves() {
    let cfg = tiny_config();
    let before = Model::new(cfg.clone()).unwrap();
    let after = tiny_train(&cfg, 2);
    assert_eq!(before.params.get("frozen_text.embed"), after.params.get("frozen_text.embed"));
    assert_ne!(before.params.get("text.embed"), after.params.get("text.embed"));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let m = tiny_train(&cfg, 3);
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&m, &path).unwrap();
    assert!(dir.path().join("model.toml").is_file());
    let back = load_checkpoint(&path).unwrap();
    let video = tiny_video(&cfg, 9);
    assert_eq!(
        track_prompt(&m, &video, "the black cars").unwrap(),
        track_prompt(&back, &video, "the black cars").unwrap()
    );
}

#[test]
fn every_variant_builds_and_runs() {
    let video = tiny_video(&tiny_config(), 4);
    for sgm in [SgmVariant::Full, SgmVariant::OnlyDet, SgmVariant::OnlyCrossAttn, SgmVariant::None] {
        for head in [ReferHead::Scb, ReferHead::Ffn, ReferHead::ConcatMlp, ReferHead::CrossAttn, ReferHead::Contrast] {
            let cfg = TrackerConfig {
                sgm,
                refer_head: head,
                ..tiny_config()
            };
            let mut m = Model::new(cfg.clone()).unwrap();
            m.params.get_mut("heads.class.bias").unwrap().data_mut()[0] = 50.0;
            let p = track_prompt(&m, &video, "the white cars which are parked").unwrap();
            assert_eq!(p.len(), video.num_frames());
            let tm = tiny_train(&cfg, 0);
            assert!(tm.params.iter().all(|(_, t)| t.is_finite()));
        }
    }
}

#[test]
fn config_round_trips_and_names_bad_fields() {
    let cfg = TrackerConfig {
        sgm: SgmVariant::OnlyDet,
        refer_head: ReferHead::ConcatMlp,
        locality: 0.0,
        motion: 0.5,
        track_refresh: true,
        ..TrackerConfig::default()
    };
    assert_eq!(TrackerConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    let err = TrackerConfig::from_toml_str("motion = 2.0").unwrap_err().to_string();
    assert!(err.contains("motion"), "{err}");
    let err = TrackerConfig::from_toml_str("heads = 3").unwrap_err().to_string();
    assert!(err.contains("heads"), "{err}");
    let err = TrackerConfig::from_toml_str("beta_ref = 1.5").unwrap_err().to_string();
    assert!(err.contains("beta_ref"), "{err}");
    assert!(TrackerConfig::from_toml_str("bogus = 1").is_err());
}

#[test]
fn zero_weights_give_zero_loss_and_no_update() {
    let cfg = TrackerConfig {
        lambda_cls: 0.0,
        lambda_l1: 0.0,
        lambda_giou: 0.0,
        lambda_ref: 0.0,
        ..tiny_config()
    };
    let video = tiny_video(&cfg, 0);
    let mut m = Model::new(cfg.clone()).unwrap();
    let before = m.params.clone();
    let tc = TrainConfig {
        steps: 3,
        clip_len: 2,
        log_every: 0,
        ..TrainConfig::default()
    };
    let rep = train(&mut m, &[video], &tc).unwrap();
    assert!(rep.losses.iter().all(|&l| l == 0.0));
    assert_eq!(m.params, before);
}
