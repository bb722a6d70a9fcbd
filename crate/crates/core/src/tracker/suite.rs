//! Finite-difference checks of the composite tracker blocks on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrackerConfig;
use super::data::{PreparedPrompt, PreparedVideo};
use super::model::{Model, RefBox};
use super::targets::{assign_targets, frame_loss, GtTarget};
use super::text::TextVars;
use crate::bbox::NormBox;
use crate::error::Result;
use crate::nn::{grad_check_many, grad_check_params, SuiteEntry, Tape, Tensor, Var, SUITE_EPS};
use crate::promptlang::ReferralMap;

/// Tolerance on the composite blocks.
pub const BLOCK_TOL: f64 = 1e-4;
/// Tolerance on the full per-frame loss (matching is held fixed by the
/// perturbation only up to ties, so this is looser).
pub const LOSS_TOL: f64 = 1e-3;

/// A deliberately small configuration for gradient checks and unit tests.
pub fn tiny_config() -> TrackerConfig {
    TrackerConfig {
        d_model: 8,
        n_det: 4,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 12,
        grid: (4, 3),
        num_colors: 2,
        frozen_dim: 40,
        oov_buckets: 4,
        denoise_groups: 2,
        ..TrackerConfig::default()
    }
}

fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// A three-frame synthetic video for the tiny model.
pub fn tiny_video(cfg: &TrackerConfig, seed: u64) -> PreparedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = cfg.grid.0 * cfg.grid.1;
    let ch = cfg.feature_channels();
    let frames = 3;
    let features = (0..frames)
        .map(|_| (0..cells * ch).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let targets = (0..frames)
        .map(|t| {
            vec![
                GtTarget {
                    id: 1,
                    bbox: NormBox {
                        cx: 0.3 + 0.05 * t as f64,
                        cy: 0.4,
                        w: 0.2,
                        h: 0.15,
                    },
                },
                GtTarget {
                    id: 2,
                    bbox: NormBox {
                        cx: 0.7,
                        cy: 0.6 - 0.04 * t as f64,
                        w: 0.1,
                        h: 0.25,
                    },
                },
            ]
        })
        .collect();
    let mut referral = ReferralMap::empty(frames);
    for f in referral.frames.iter_mut() {
        f.insert(1);
    }
    PreparedVideo {
        name: "tiny".into(),
        image: (80.0, 60.0),
        features,
        targets,
        prompts: vec![PreparedPrompt {
            id: "0001".into(),
            text: "the black cars which are moving".into(),
            referral,
        }],
    }
}

/// Check fuse_encode, sgm, decode and the similarity head against finite
/// differences of their inputs, plus the full per-frame loss against 20
/// random parameter coordinates.
pub fn composite_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cfg = tiny_config();
    let model = Model::new(TrackerConfig {
        init_seed: seed,
        ..cfg.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = cfg.d_model;
    let cells = model.tokens();
    let ch = cfg.feature_channels();
    let n_q = cfg.n_det + 2;
    let words = 6;
    let mut refs = model.anchors().to_vec();
    refs.extend([[0.3, 0.4, 0.2, 0.15], [0.7, 0.6, 0.1, 0.25]]);
    let mut out = Vec::new();

    let feats = Tensor::uniform(&[cells, ch], 1.0, &mut rng);
    let s_emb = Tensor::randn(&[words, d], 1.0, &mut rng);
    let r = grad_check_many(
        |t, x| {
            let e = model.fuse_encode_var(t, x[0], x[1])?;
            contract(t, e, 11)
        },
        &[feats, s_emb.clone()],
        SUITE_EPS,
    )?;
    out.push(SuiteEntry {
        name: "fuse_encode",
        report: r,
    });

    let queries = Tensor::randn(&[n_q, d], 1.0, &mut rng);
    let r = grad_check_many(
        |t, x| {
            let pos = model.query_pos(t, &refs);
            let q = model.sgm(t, x[0], pos, x[1], cfg.n_det)?;
            contract(t, q, 12)
        },
        &[queries.clone(), s_emb.clone()],
        SUITE_EPS,
    )?;
    out.push(SuiteEntry { name: "sgm", report: r });

    let e_t = Tensor::randn(&[cells, d], 1.0, &mut rng);
    let r = grad_check_many(
        |t, x| {
            let pos = model.query_pos(t, &refs);
            let y = model.decode(t, x[0], pos, x[1], &refs)?;
            contract(t, y, 13)
        },
        &[queries.clone(), e_t],
        SUITE_EPS,
    )?;
    out.push(SuiteEntry {
        name: "decode",
        report: r,
    });

    let s_frozen = Tensor::randn(&[words, cfg.frozen_dim], 1.0, &mut rng);
    let r = grad_check_many(
        |t, x| {
            let tv = TextVars {
                s_emb: x[1],
                s_frozen: x[2],
            };
            let (z, _) = model.refer_score(t, x[0], &tv)?;
            contract(t, z, 14)
        },
        &[queries, s_emb, s_frozen],
        SUITE_EPS,
    )?;
    out.push(SuiteEntry {
        name: "scb_score",
        report: r,
    });

    let video = tiny_video(&cfg, seed);
    let names: Vec<(String, usize)> = model
        .params
        .iter()
        .filter(|(n, _)| !model.params.is_frozen(n))
        .map(|(n, t)| (n.to_string(), t.len()))
        .collect();
    let coords: Vec<(String, usize)> = (0..20)
        .map(|_| {
            let (n, len) = &names[rng.random_range(0..names.len())];
            (n.clone(), rng.random_range(0..*len))
        })
        .collect();
    // One frame with two live track queries; references are inputs, so the
    // detached reference path does not enter the check.
    let track_content = Tensor::randn(&[2, d], 1.0, &mut rng);
    let track_refs = [[0.32, 0.41, 0.18, 0.16], [0.69, 0.58, 0.12, 0.22]];
    let r = grad_check_params(
        &model.params,
        &coords,
        |t, ps| {
            let mut m = model.clone();
            m.params = ps.clone();
            per_frame_loss(&m, t, &video, &track_content, &track_refs)
        },
        SUITE_EPS,
    )?;
    out.push(SuiteEntry {
        name: "frame_loss",
        report: r,
    });
    Ok(out)
}

/// Loss of frame 1 of `video` with track queries for ids 1 and 2.
fn per_frame_loss(
    model: &Model,
    tape: &mut Tape,
    video: &PreparedVideo,
    content: &Tensor,
    refs: &[RefBox],
) -> Result<Var> {
    let cfg = &model.config;
    let p = &video.prompts[0];
    let text = model.text(tape, &p.text)?;
    let e_t = model.fuse_encode(tape, &video.features[1], &text)?;
    let c = tape.constant(content.clone());
    let (out, _) = model.frame_heads(tape, e_t, &text, Some(c), refs)?;
    let logits = tape.value(out.class_logits).data().to_vec();
    let boxes: Vec<[f64; 4]> = tape.value(out.boxes).data().chunks(4).map(|b| [b[0], b[1], b[2], b[3]]).collect();
    let mut ids = vec![None; cfg.n_det];
    ids.extend([Some(1), Some(2)]);
    let gt = &video.targets[1];
    let a = assign_targets(&logits, &boxes, &ids, gt, cfg);
    Ok(frame_loss(tape, &out, &a, gt, &p.referral.frames[1], cfg)?.0)
}

/// Tolerance applying to a suite entry name.
pub fn tolerance(name: &str) -> f64 {
    if name == "frame_loss" {
        LOSS_TOL
    } else {
        BLOCK_TOL
    }
}
