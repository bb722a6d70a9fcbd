//! Clip-level training with track-query propagation and denoising groups.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::data::PreparedVideo;
use super::model::{displacement, extrapolate, Model, RefBox};
use super::targets::{assign_targets, frame_loss, LossParts};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamGrads, Tape, Tensor, Var};

/// Track queries alive during a training clip.
struct ClipTracks {
    ids: Vec<u32>,
    content: Option<Var>,
    last: Vec<RefBox>,
    velocity: Vec<[f64; 2]>,
}

impl ClipTracks {
    fn refs(&self, motion: f64) -> Vec<RefBox> {
        self.last.iter().zip(&self.velocity).map(|(b, v)| extrapolate(b, *v, motion)).collect()
    }
}

fn box_rows(t: &Tensor) -> Vec<[f64; 4]> {
    t.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

/// Loss of one clip of `len` frames starting at `start`, for prompt `prompt`.
/// Builds the whole clip on `tape` so gradients flow through track queries.
/// Each matched query is kept as a track for the next frame with probability
/// `1 - track_drop`; dropped objects must be found again by detect queries.
#[allow(clippy::too_many_arguments)]
pub fn clip_loss(
    model: &Model,
    tape: &mut Tape,
    video: &PreparedVideo,
    prompt: usize,
    start: usize,
    len: usize,
    track_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossParts)> {
    let cfg = &model.config;
    let p = video
        .prompts
        .get(prompt)
        .ok_or_else(|| Error::Validation(format!("video {} has no prompt #{prompt}", video.name)))?;
    if start + len > video.num_frames() || len == 0 {
        return Err(Error::Validation(format!(
            "clip {start}+{len} outside video {} ({} frames)",
            video.name,
            video.num_frames()
        )));
    }
    let text = model.text(tape, &p.text)?;
    let groups = cfg.denoise_groups;
    let std = cfg.denoise_variance.sqrt();
    let mut tracks = ClipTracks {
        ids: Vec::new(),
        content: None,
        last: Vec::new(),
        velocity: Vec::new(),
    };
    let mut total: Option<Var> = None;
    let mut parts = LossParts::default();
    for t in start..start + len {
        let e_t = model.fuse_encode(tape, &video.features[t], &text)?;
        let gt = &video.targets[t];
        let referred = &p.referral.frames[t];
        let mut track_ids: Vec<Option<u32>> = vec![None; cfg.n_det];
        track_ids.extend(tracks.ids.iter().map(|&i| Some(i)));
        let refs = tracks.refs(cfg.motion);
        let mut frame_total: Option<Var> = None;
        let mut kept = None;
        for g in 0..groups {
            let content = match tracks.content {
                Some(c) if g > 0 && std > 0.0 => {
                    let noise = Tensor::randn(tape.shape(c), std, rng);
                    let noise = tape.constant(noise);
                    Some(tape.add(c, noise)?)
                }
                other => other,
            };
            let (out, _) = model.frame_heads(tape, e_t, &text, content, &refs)?;
            let logits = tape.value(out.class_logits).data().to_vec();
            let boxes = box_rows(tape.value(out.boxes));
            let assignment = assign_targets(&logits, &boxes, &track_ids, gt, cfg);
            let (loss, lp) = frame_loss(tape, &out, &assignment, gt, referred, cfg)?;
            parts.add(&lp, 1.0 / groups as f64);
            frame_total = Some(match frame_total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
            if g == 0 {
                kept = Some((out, boxes, assignment));
            }
        }
        let frame_loss = tape.scale(frame_total.expect("at least one group"), 1.0 / groups as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, frame_loss)?,
            None => frame_loss,
        });
        // Propagate group 0: matched track queries continue, matched detect
        // queries start new tracks; everything else is dropped.
        let (out, boxes, assignment) = kept.expect("group 0 ran");
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        let mut last = Vec::new();
        let mut velocity = Vec::new();
        for q in (cfg.n_det..assignment.len()).chain(0..cfg.n_det) {
            if let Some(g) = assignment[q] {
                if track_drop > 0.0 && rng.random_bool(track_drop) {
                    continue;
                }
                rows.push(q);
                ids.push(gt[g].id);
                velocity.push(match q.checked_sub(cfg.n_det) {
                    Some(k) => displacement(&tracks.last[k], &boxes[q]),
                    None => [0.0; 2],
                });
                last.push(boxes[q]);
            }
        }
        tracks = ClipTracks {
            content: if rows.is_empty() { None } else { Some(tape.gather_rows(out.d, &rows)?) },
            ids,
            last,
            velocity,
        };
    }
    let loss = tape.scale(total.expect("clip has frames"), 1.0 / len as f64)?;
    let mut scaled = LossParts::default();
    scaled.add(&parts, 1.0 / len as f64);
    Ok((loss, scaled))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Loss of every step.
    pub losses: Vec<f64>,
    /// Mean loss components over the last tenth of training.
    pub final_parts: LossParts,
    pub seconds: f64,
}

impl TrainReport {
    /// Mean loss over a window of steps.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let w = &self.losses[from.min(self.losses.len())..to.min(self.losses.len())];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Train `model` on clips sampled from `videos`. Sampling and noise come from
/// `tc.seed`, so repeated runs produce bit-identical parameters.
pub fn train(model: &mut Model, videos: &[PreparedVideo], tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    let pool: Vec<(usize, usize)> = videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.num_frames() >= tc.clip_len && !v.prompts.is_empty())
        .map(|(i, v)| (i, v.num_frames() - tc.clip_len + 1))
        .collect();
    if pool.is_empty() {
        return Err(Error::Validation(format!(
            "no training video has prompts and at least {} frames",
            tc.clip_len
        )));
    }
    let starts: usize = pool.iter().map(|p| p.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(tc.lr);
    opt.weight_decay = tc.weight_decay;
    let decay_at = tc.steps * 4 / 5;
    let timer = Instant::now();
    let mut losses = Vec::with_capacity(tc.steps);
    let mut final_parts = LossParts::default();
    let tail = (tc.steps / 10).max(1);
    for step in 0..tc.steps {
        if step == decay_at {
            opt.lr = tc.lr * 0.1;
        }
        // Uniform over clip start positions across videos, then a uniform prompt.
        let mut k = rng.random_range(0..starts);
        let (vi, start) = pool
            .iter()
            .find_map(|&(vi, n)| {
                if k < n {
                    Some((vi, k))
                } else {
                    k -= n;
                    None
                }
            })
            .expect("k below total");
        let video = &videos[vi];
        let prompt = rng.random_range(0..video.prompts.len());
        let mut tape = Tape::new();
        let (loss, parts) = clip_loss(model, &mut tape, video, prompt, start, tc.clip_len, tc.track_drop, &mut rng)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let mut pg = ParamGrads::new();
        pg.accumulate(&tape, &grads);
        drop(tape);
        pg.clip_norm(tc.grad_clip);
        opt.step(&mut model.params, &pg);
        losses.push(value);
        if step + tail >= tc.steps {
            final_parts.add(&parts, 1.0 / tail as f64);
        }
        if tc.log_every > 0 && (step + 1) % tc.log_every == 0 {
            let from = (step + 1).saturating_sub(tc.log_every);
            let mean = losses[from..].iter().sum::<f64>() / (step + 1 - from) as f64;
            log::info!(
                "step {:>6}  loss {mean:.4}  ({:.1}s)",
                step + 1,
                timer.elapsed().as_secs_f64()
            );
        }
    }
    Ok(TrainReport {
        steps: tc.steps,
        losses,
        final_parts,
        seconds: timer.elapsed().as_secs_f64(),
    })
}

/// Write the parameters to `path` and the model config beside it
/// (`path` with a `.toml` extension).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model.params.save(path)?;
    let side = path.with_extension("toml");
    std::fs::write(&side, model.config.to_toml()).map_err(|e| Error::io(&side, e))
}

/// Inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let cfg = super::config::TrackerConfig::from_file(&path.with_extension("toml"))?;
    Model::load(cfg, path)
}
