//! Online inference: one prompt, one frame at a time.

use std::path::Path;

use super::data::{prepare, PreparedVideo};
use super::model::{displacement, extrapolate, Model, RefBox};
use crate::bbox::NormBox;
use crate::dataset::{prediction_path, write_predictions, Benchmark, PredRow};
use crate::error::Result;
use crate::nn::{sigmoid, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u32,
    /// Decoder output of the previous frame, reused as query content.
    pub content: Vec<f64>,
    /// Last reported box.
    pub last_box: RefBox,
    /// Centre displacement at the last refresh.
    pub velocity: [f64; 2],
    pub misses: usize,
}

/// Live tracks of one prompt over one video.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub tracks: Vec<Track>,
    next_id: u32,
}

impl Default for TrackState {
    fn default() -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 1,
        }
    }
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// An object the tracker reports on a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    pub id: u32,
    pub bbox: NormBox,
    pub class_prob: f64,
    /// Calibrated referring probability.
    pub refer_prob: f64,
    /// Raw similarity in `[-1, 1]`.
    pub refer_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePrediction {
    pub objects: Vec<ObjectPrediction>,
}

impl FramePrediction {
    /// Objects whose calibrated referring probability exceeds `beta`.
    pub fn referred(&self, beta: f64) -> impl Iterator<Item = &ObjectPrediction> {
        self.objects.iter().filter(move |o| o.refer_prob > beta)
    }
}

/// Advance `state` by one frame. Tracks whose class probability clears
/// `tau_det` are reported; others accumulate misses and are dropped after
/// `miss_patience`. With `track_refresh`, a confident detect query that
/// overlaps a track (IoU above `dedup_iou`, one-to-one) replaces the track's
/// box and keeps it alive. Remaining confident detect queries that do not
/// duplicate a reported object start new identities.
pub fn step(model: &Model, prompt: &str, features: &[f64], state: &mut TrackState) -> Result<FramePrediction> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut tape = Tape::new();
    let text = model.text(&mut tape, prompt)?;
    let e_t = model.fuse_encode(&mut tape, features, &text)?;
    let n_tr = state.tracks.len();
    let content = if n_tr == 0 {
        None
    } else {
        let data: Vec<f64> = state.tracks.iter().flat_map(|t| t.content.iter().copied()).collect();
        Some(tape.constant(Tensor::new(&[n_tr, d], data)?))
    };
    let refs: Vec<RefBox> = state
        .tracks
        .iter()
        .map(|t| extrapolate(&t.last_box, t.velocity, cfg.motion))
        .collect();
    let (out, _) = model.frame_heads(&mut tape, e_t, &text, content, &refs)?;
    let logits = tape.value(out.class_logits).data().to_vec();
    let boxes = tape.value(out.boxes).data().to_vec();
    let refer = tape.value(out.refer_logits).data().to_vec();
    let cos = out.refer_cos.map(|c| tape.value(c).data().to_vec());
    let dv = tape.value(out.d).data().to_vec();
    let obj = |q: usize, id: u32| {
        let rp = sigmoid(refer[q]);
        ObjectPrediction {
            id,
            bbox: NormBox::from_slice(&boxes[q * 4..q * 4 + 4]),
            class_prob: sigmoid(logits[q]),
            refer_prob: rp,
            refer_score: cos.as_ref().map_or(2.0 * rp - 1.0, |c| c[q]),
        }
    };
    let n_det = cfg.n_det;
    let confident = |q: usize| sigmoid(logits[q]) > cfg.tau_det;
    let box_of = |q: usize| -> RefBox { [boxes[q * 4], boxes[q * 4 + 1], boxes[q * 4 + 2], boxes[q * 4 + 3]] };
    let mut cand: Vec<usize> = (0..n_det).filter(|&q| confident(q)).collect();
    cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));

    // Which detection, if any, refreshes each track's box.
    let mut refresh: Vec<Option<usize>> = vec![None; n_tr];
    if cfg.track_refresh && n_tr > 0 && !cand.is_empty() {
        let iou = |k: usize, q: usize| {
            let tb = NormBox::from_slice(&box_of(n_det + k));
            tb.iou(&NormBox::from_slice(&box_of(q)))
        };
        let cost: Vec<Vec<f64>> = (0..n_tr).map(|k| cand.iter().map(|&q| -iou(k, q)).collect()).collect();
        for (k, c) in crate::assign::solve(&cost).into_iter().enumerate() {
            if let Some(c) = c {
                if iou(k, cand[c]) > cfg.dedup_iou {
                    refresh[k] = Some(cand[c]);
                }
            }
        }
    }

    let mut objects = Vec::new();
    for (k, t) in state.tracks.iter_mut().enumerate() {
        let q = n_det + k;
        t.content = dv[q * d..(q + 1) * d].to_vec();
        let reported = match refresh[k] {
            Some(qd) if confident(q) => Some(ObjectPrediction {
                bbox: NormBox::from_slice(&box_of(qd)),
                ..obj(q, t.id)
            }),
            Some(qd) => Some(obj(qd, t.id)),
            None if confident(q) => Some(obj(q, t.id)),
            None => None,
        };
        match reported {
            Some(o) => {
                let b = o.bbox.to_array();
                t.velocity = displacement(&t.last_box, &b);
                t.last_box = b;
                t.misses = 0;
                objects.push(o);
            }
            None => t.misses += 1,
        }
    }
    state.tracks.retain(|t| t.misses < cfg.miss_patience);
    let used: Vec<usize> = refresh.iter().flatten().copied().collect();
    for q in cand {
        if used.contains(&q) {
            continue;
        }
        let o = obj(q, state.next_id);
        if objects.iter().any(|p| p.bbox.iou(&o.bbox) > cfg.dedup_iou) {
            continue;
        }
        state.tracks.push(Track {
            id: o.id,
            content: dv[q * d..(q + 1) * d].to_vec(),
            last_box: o.bbox.to_array(),
            velocity: [0.0; 2],
            misses: 0,
        });
        state.next_id += 1;
        objects.push(o);
    }
    Ok(FramePrediction { objects })
}

/// Run one prompt over a whole video.
pub fn track_prompt(model: &Model, video: &PreparedVideo, prompt: &str) -> Result<Vec<FramePrediction>> {
    let mut state = TrackState::new();
    video.features.iter().map(|f| step(model, prompt, f, &mut state)).collect()
}

/// Referred objects as prediction rows in pixel coordinates.
pub fn referred_rows(preds: &[FramePrediction], beta: f64, image: (f64, f64)) -> Vec<PredRow> {
    let mut rows = Vec::new();
    for (t, f) in preds.iter().enumerate() {
        for o in f.referred(beta) {
            rows.push(PredRow {
                frame: t,
                id: o.id,
                bbox: o.bbox.to_pixels(image.0, image.1),
                score: o.refer_score,
            });
        }
    }
    rows
}

/// Track every prompt of every video and write one prediction file each.
/// Returns the number of files written.
pub fn predict_benchmark(model: &Model, bench: &Benchmark, out_root: &Path) -> Result<usize> {
    let mut n = 0;
    for v in &bench.videos {
        let pv = prepare(v, &model.config)?;
        for p in &pv.prompts {
            let preds = track_prompt(model, &pv, &p.text)?;
            let rows = referred_rows(&preds, model.config.beta_ref, pv.image);
            write_predictions(&prediction_path(out_root, &pv.name, &p.id), &rows)?;
            n += 1;
        }
        log::info!("tracked {} prompts on {}", pv.prompts.len(), pv.name);
    }
    Ok(n)
}
