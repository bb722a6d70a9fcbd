//! Prompt-conditioned HOTA.
//!
//! Ground truth for a prompt is the set of boxes it refers to; anything else
//! a tracker outputs — including visible objects the prompt does not refer
//! to — is a false positive. Association scores come from a global
//! alignment over the whole sequence; per localization threshold α every
//! frame is matched optimally by (count, Σ alignment, Σ IoU) among pairs
//! with IoU ≥ α.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::{solve, Lex3};
use crate::bbox::BBox;
use crate::dataset::{prediction_path, read_predictions, Benchmark, PredRow};
use crate::error::{Error, Result};
use crate::promptlang::ReferralMap;
use crate::scenesim::GroundTruth;

/// Per-frame `(id, box)` lists.
pub type FrameBoxes = Vec<Vec<(u32, BBox)>>;

/// The canonical grid {0.05, 0.10, …, 0.95}.
pub fn default_alphas() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalInput {
    pub gt: FrameBoxes,
    pub pred: FrameBoxes,
    pub alphas: Vec<f64>,
}

impl EvalInput {
    pub fn new(gt: FrameBoxes, pred: FrameBoxes) -> Self {
        Self {
            gt,
            pred,
            alphas: default_alphas(),
        }
    }

    fn num_frames(&self) -> usize {
        self.gt.len().max(self.pred.len())
    }

    fn frame<'a>(v: &'a FrameBoxes, t: usize) -> &'a [(u32, BBox)] {
        v.get(t).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AlphaMetrics {
    pub alpha: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub det_re: f64,
    pub det_pr: f64,
    pub ass_re: f64,
    pub ass_pr: f64,
}

/// Final metrics: each the mean of its per-α values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub hota: f64,
    pub det_a: f64,
    pub ass_a: f64,
    pub det_re: f64,
    pub det_pr: f64,
    pub ass_re: f64,
    pub ass_pr: f64,
}

impl Summary {
    pub const NAMES: [&'static str; 7] = ["HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr"];

    pub fn values(&self) -> [f64; 7] {
        [self.hota, self.det_a, self.ass_a, self.det_re, self.det_pr, self.ass_re, self.ass_pr]
    }

    pub fn mean(items: impl Iterator<Item = [f64; 7]>) -> Self {
        let mut acc = [0.0; 7];
        let mut n = 0usize;
        for v in items {
            for k in 0..7 {
                acc[k] += v[k];
            }
            n += 1;
        }
        let d = n.max(1) as f64;
        Summary {
            hota: acc[0] / d,
            det_a: acc[1] / d,
            ass_a: acc[2] / d,
            det_re: acc[3] / d,
            det_pr: acc[4] / d,
            ass_re: acc[5] / d,
            ass_pr: acc[6] / d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HotaResult {
    pub per_alpha: Vec<AlphaMetrics>,
    pub summary: Summary,
}

impl AlphaMetrics {
    fn values(&self) -> [f64; 7] {
        [self.hota, self.det_a, self.ass_a, self.det_re, self.det_pr, self.ass_re, self.ass_pr]
    }
}

/// Result of matching one frame at one α.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(gt index, pred index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

const ALPHA_EPS: f64 = f64::EPSILON;

/// Optimal matching of one frame: maximize the number of pairs, then the sum
/// of association scores, then the sum of IoUs, over pairs with IoU ≥ α.
pub fn match_frame(gt: &[BBox], pred: &[BBox], alpha: f64, assoc: &[Vec<f64>]) -> FrameMatch {
    let iou: Vec<Vec<f64>> = gt.iter().map(|g| pred.iter().map(|p| g.iou(p)).collect()).collect();
    match_with_iou(&iou, pred.len(), alpha, assoc)
}

fn match_with_iou(iou: &[Vec<f64>], m: usize, alpha: f64, assoc: &[Vec<f64>]) -> FrameMatch {
    let n = iou.len();
    let cost: Vec<Vec<Lex3>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if iou[i][j] >= alpha - ALPHA_EPS {
                        Lex3([-1.0, -assoc[i][j], -iou[i][j]])
                    } else {
                        Lex3([0.0; 3])
                    }
                })
                .collect()
        })
        .collect();
    let sol = if n == 0 || m == 0 { vec![None; n] } else { solve(&cost) };
    let mut out = FrameMatch::default();
    let mut pred_used = vec![false; m];
    for (i, c) in sol.into_iter().enumerate() {
        match c {
            Some(j) if iou[i][j] >= alpha - ALPHA_EPS => {
                out.matches.push((i, j));
                pred_used[j] = true;
            }
            _ => out.unmatched_gt.push(i),
        }
    }
    out.unmatched_pred = (0..m).filter(|&j| !pred_used[j]).collect();
    out
}

/// Dense re-indexing of the ids of one side.
fn index_ids(frames: &FrameBoxes) -> BTreeMap<u32, usize> {
    let mut ids: Vec<u32> = frames.iter().flatten().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
}

/// Per-frame IoU matrices plus per-id detection counts and the global
/// alignment score between every gt id and every predicted id.
struct Alignment {
    iou: Vec<Vec<Vec<f64>>>,
    gt_idx: Vec<Vec<usize>>,
    pr_idx: Vec<Vec<usize>>,
    gt_count: Vec<f64>,
    pr_count: Vec<f64>,
    score: Vec<Vec<f64>>,
}

fn align(input: &EvalInput) -> Alignment {
    let gmap = index_ids(&input.gt);
    let pmap = index_ids(&input.pred);
    let (ng, np) = (gmap.len(), pmap.len());
    let mut potential = vec![vec![0.0; np]; ng];
    let mut gt_count = vec![0.0; ng];
    let mut pr_count = vec![0.0; np];
    let mut a = Alignment {
        iou: Vec::new(),
        gt_idx: Vec::new(),
        pr_idx: Vec::new(),
        gt_count: Vec::new(),
        pr_count: Vec::new(),
        score: Vec::new(),
    };
    for t in 0..input.num_frames() {
        let g = EvalInput::frame(&input.gt, t);
        let p = EvalInput::frame(&input.pred, t);
        let gi: Vec<usize> = g.iter().map(|(id, _)| gmap[id]).collect();
        let pi: Vec<usize> = p.iter().map(|(id, _)| pmap[id]).collect();
        let sim: Vec<Vec<f64>> = g.iter().map(|(_, gb)| p.iter().map(|(_, pb)| gb.iou(pb)).collect()).collect();
        let row: Vec<f64> = sim.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..p.len()).map(|j| sim.iter().map(|r| r[j]).sum()).collect();
        for i in 0..g.len() {
            for j in 0..p.len() {
                let denom = row[i] + col[j] - sim[i][j];
                if denom > f64::EPSILON {
                    potential[gi[i]][pi[j]] += sim[i][j] / denom;
                }
            }
        }
        for &i in &gi {
            gt_count[i] += 1.0;
        }
        for &j in &pi {
            pr_count[j] += 1.0;
        }
        a.iou.push(sim);
        a.gt_idx.push(gi);
        a.pr_idx.push(pi);
    }
    a.score = (0..ng)
        .map(|i| {
            (0..np)
                .map(|j| potential[i][j] / (gt_count[i] + pr_count[j] - potential[i][j]))
                .collect()
        })
        .collect();
    a.gt_count = gt_count;
    a.pr_count = pr_count;
    a
}

/// Turn per-α match counts into the metric family.
fn finish(
    alpha: f64,
    matches: &BTreeMap<(usize, usize), f64>,
    gt_count: &[f64],
    pr_count: &[f64],
) -> AlphaMetrics {
    let gt_dets: f64 = gt_count.iter().sum();
    let pr_dets: f64 = pr_count.iter().sum();
    let tp: f64 = matches.values().sum();
    let (fn_, fp) = (gt_dets - tp, pr_dets - tp);
    let (mut ass_a, mut ass_re, mut ass_pr) = (0.0, 0.0, 0.0);
    for (&(i, j), &c) in matches {
        ass_a += c * c / (gt_count[i] + pr_count[j] - c);
        ass_re += c * c / gt_count[i].max(1.0);
        ass_pr += c * c / pr_count[j].max(1.0);
    }
    let d = tp.max(1.0);
    let (ass_a, ass_re, ass_pr) = (ass_a / d, ass_re / d, ass_pr / d);
    let det_a = tp / (tp + fn_ + fp).max(1.0);
    AlphaMetrics {
        alpha,
        tp: tp as usize,
        fn_: fn_ as usize,
        fp: fp as usize,
        hota: (det_a * ass_a).sqrt(),
        det_a,
        ass_a,
        det_re: tp / (tp + fn_).max(1.0),
        det_pr: tp / (tp + fp).max(1.0),
        ass_re,
        ass_pr,
    }
}

fn summarize(per_alpha: Vec<AlphaMetrics>) -> HotaResult {
    let summary = Summary::mean(per_alpha.iter().map(AlphaMetrics::values));
    HotaResult { per_alpha, summary }
}

/// HOTA and its sub-metrics for one prompt.
pub fn hota(input: &EvalInput) -> HotaResult {
    let a = align(input);
    let mut per_alpha = Vec::with_capacity(input.alphas.len());
    for &alpha in &input.alphas {
        let mut matches: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for t in 0..a.iou.len() {
            let (gi, pi) = (&a.gt_idx[t], &a.pr_idx[t]);
            if gi.is_empty() || pi.is_empty() {
                continue;
            }
            let assoc: Vec<Vec<f64>> = gi.iter().map(|&i| pi.iter().map(|&j| a.score[i][j]).collect()).collect();
            for (r, c) in match_with_iou(&a.iou[t], pi.len(), alpha, &assoc).matches {
                *matches.entry((gi[r], pi[c])).or_default() += 1.0;
            }
        }
        per_alpha.push(finish(alpha, &matches, &a.gt_count, &a.pr_count));
    }
    summarize(per_alpha)
}

/// Exhaustive reference for small instances (≤ 4 ids per side, ≤ 6 frames):
/// recomputes the alignment with plain maps and enumerates every partial
/// matching of every frame.
pub fn brute_force_hota(input: &EvalInput) -> Result<HotaResult> {
    let frames = input.num_frames();
    let gids: std::collections::BTreeSet<u32> = input.gt.iter().flatten().map(|x| x.0).collect();
    let pids: std::collections::BTreeSet<u32> = input.pred.iter().flatten().map(|x| x.0).collect();
    if frames > 6 || gids.len() > 4 || pids.len() > 4 {
        return Err(Error::TooLarge(format!(
            "{frames} frames, {} gt ids, {} predicted ids (limits 6, 4, 4)",
            gids.len(),
            pids.len()
        )));
    }
    let mut potential: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut gcount: BTreeMap<u32, f64> = BTreeMap::new();
    let mut pcount: BTreeMap<u32, f64> = BTreeMap::new();
    for t in 0..frames {
        let g = EvalInput::frame(&input.gt, t);
        let p = EvalInput::frame(&input.pred, t);
        for (gid, gb) in g {
            *gcount.entry(*gid).or_default() += 1.0;
            for (pid, pb) in p {
                let s = gb.iou(pb);
                let rs: f64 = p.iter().map(|(_, b)| gb.iou(b)).sum();
                let cs: f64 = g.iter().map(|(_, b)| b.iou(pb)).sum();
                let denom = rs + cs - s;
                if denom > f64::EPSILON {
                    *potential.entry((*gid, *pid)).or_default() += s / denom;
                }
            }
        }
        for (pid, _) in p {
            *pcount.entry(*pid).or_default() += 1.0;
        }
    }
    let score = |g: u32, p: u32| {
        let pm = potential.get(&(g, p)).copied().unwrap_or(0.0);
        pm / (gcount[&g] + pcount[&p] - pm)
    };

    let gl: Vec<u32> = gids.iter().copied().collect();
    let pl: Vec<u32> = pids.iter().copied().collect();
    let gc: Vec<f64> = gl.iter().map(|g| gcount[g]).collect();
    let pc: Vec<f64> = pl.iter().map(|p| pcount[p]).collect();
    let mut per_alpha = Vec::new();
    for &alpha in &input.alphas {
        let mut matches: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for t in 0..frames {
            let g = EvalInput::frame(&input.gt, t);
            let p = EvalInput::frame(&input.pred, t);
            let mut best: (usize, f64, f64, Vec<(usize, usize)>) = (0, 0.0, 0.0, Vec::new());
            let mut used = vec![false; p.len()];
            let mut cur = Vec::new();
            enumerate(0, g, p, alpha, &score, &mut used, &mut cur, &mut best);
            for (i, j) in best.3 {
                let gi = gl.iter().position(|x| *x == g[i].0).unwrap();
                let pj = pl.iter().position(|x| *x == p[j].0).unwrap();
                *matches.entry((gi, pj)).or_default() += 1.0;
            }
        }
        per_alpha.push(finish(alpha, &matches, &gc, &pc));
    }
    Ok(summarize(per_alpha))
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    i: usize,
    g: &[(u32, BBox)],
    p: &[(u32, BBox)],
    alpha: f64,
    score: &dyn Fn(u32, u32) -> f64,
    used: &mut Vec<bool>,
    cur: &mut Vec<(usize, usize)>,
    best: &mut (usize, f64, f64, Vec<(usize, usize)>),
) {
    if i == g.len() {
        let n = cur.len();
        let sa: f64 = cur.iter().map(|&(a, b)| score(g[a].0, p[b].0)).sum();
        let si: f64 = cur.iter().map(|&(a, b)| g[a].1.iou(&p[b].1)).sum();
        if (n, sa, si) > (best.0, best.1, best.2) {
            *best = (n, sa, si, cur.clone());
        }
        return;
    }
    enumerate(i + 1, g, p, alpha, score, used, cur, best);
    for j in 0..p.len() {
        if !used[j] && g[i].1.iou(&p[j].1) >= alpha - ALPHA_EPS {
            used[j] = true;
            cur.push((i, j));
            enumerate(i + 1, g, p, alpha, score, used, cur, best);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Ground-truth boxes of the objects a prompt refers to.
pub fn referral_boxes(gt: &GroundTruth, referral: &ReferralMap) -> FrameBoxes {
    gt.frames
        .iter()
        .zip(&referral.frames)
        .map(|(frame, ids)| {
            frame
                .iter()
                .filter(|e| ids.contains(&e.id))
                .map(|e| (e.id, e.bbox))
                .collect()
        })
        .collect()
}

/// Every ground-truth box, ignoring the prompt.
pub fn all_boxes(gt: &GroundTruth) -> FrameBoxes {
    gt.frames
        .iter()
        .map(|f| f.iter().map(|e| (e.id, e.bbox)).collect())
        .collect()
}

/// Group prediction rows into frames (rows past `num_frames` are ignored
/// with a warning).
pub fn rows_to_frames(rows: &[PredRow], num_frames: usize) -> FrameBoxes {
    let mut out = vec![Vec::new(); num_frames];
    let mut dropped = 0;
    for r in rows {
        match out.get_mut(r.frame) {
            Some(f) => f.push((r.id, r.bbox)),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} predicted boxes lie beyond the last frame and were ignored");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub video: String,
    pub prompt_id: String,
    pub text: String,
    pub result: HotaResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub prompts: Vec<PromptResult>,
    /// Mean over prompts of each α-averaged metric.
    pub mean: Summary,
}

impl MetricsReport {
    pub fn from_prompts(prompts: Vec<PromptResult>) -> Self {
        let mean = Summary::mean(prompts.iter().map(|p| p.result.summary.values()));
        Self { prompts, mean }
    }

    /// Plain-text table with one row per prompt plus the mean.
    pub fn table(&self) -> String {
        let mut s = format!("{:<28}", "prompt");
        for n in Summary::NAMES {
            let _ = write!(s, " {n:>6}");
        }
        s.push('\n');
        let row = |s: &mut String, name: &str, v: [f64; 7]| {
            let _ = write!(s, "{name:<28}");
            for x in v {
                let _ = write!(s, " {x:>6.3}");
            }
            s.push('\n');
        };
        for p in &self.prompts {
            row(&mut s, &format!("{}/{}", p.video, p.prompt_id), p.result.summary.values());
        }
        row(&mut s, "mean", self.mean.values());
        s
    }

    /// `key = value` lines: `mean.<metric>`, `prompts`, and
    /// `<video>/<prompt>.<metric>` for every prompt.
    pub fn key_values(&self) -> String {
        let mut s = format!("prompts = {}\n", self.prompts.len());
        for (n, v) in Summary::NAMES.iter().zip(self.mean.values()) {
            let _ = writeln!(s, "mean.{n} = {v:.12}");
        }
        for p in &self.prompts {
            for (n, v) in Summary::NAMES.iter().zip(p.result.summary.values()) {
                let _ = writeln!(s, "{}/{}.{n} = {v:.12}", p.video, p.prompt_id);
            }
        }
        s
    }
}

/// Evaluate every prompt of `bench` against `<pred_root>/<video>/<prompt>.txt`.
/// A missing file counts as empty predictions.
pub fn evaluate_benchmark(bench: &Benchmark, pred_root: &Path) -> Result<MetricsReport> {
    let mut out = Vec::new();
    for v in &bench.videos {
        for (p, r) in v.prompts.iter().zip(&v.referrals) {
            let path = prediction_path(pred_root, &v.name, &p.id);
            let rows = if path.is_file() {
                read_predictions(&path)?
            } else {
                log::warn!("no predictions at {}; treating as empty", path.display());
                Vec::new()
            };
            let input = EvalInput::new(referral_boxes(&v.gt, r), rows_to_frames(&rows, v.num_frames()));
            out.push(PromptResult {
                video: v.name.clone(),
                prompt_id: p.id.clone(),
                text: p.text.clone(),
                result: hota(&input),
            });
        }
    }
    Ok(MetricsReport::from_prompts(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, 10.0, 10.0)
    }

    #[test]
    fn half_hota_case() {
        let gt = vec![vec![(1, b(0.0))], vec![(1, b(0.0))]];
        let pred = vec![vec![(7, b(0.0))], vec![]];
        let input = EvalInput::new(gt, pred);
        let r = hota(&input);
        for a in &r.per_alpha {
            assert_eq!((a.tp, a.fn_, a.fp), (1, 1, 0));
            assert_eq!(a.det_a, 0.5);
            assert_eq!(a.ass_a, 0.5);
        }
        assert!((r.summary.hota - 0.5).abs() < 1e-15);
        assert_eq!(brute_force_hota(&input).unwrap(), r);
    }

    #[test]
    fn perfect_and_empty() {
        let gt = vec![vec![(1, b(0.0)), (2, b(30.0))], vec![(1, b(2.0))]];
        let r = hota(&EvalInput::new(gt.clone(), gt.clone()));
        assert_eq!(r.summary.hota, 1.0);
        assert_eq!(r.summary.det_a, 1.0);
        assert_eq!(r.summary.ass_a, 1.0);
        let r = hota(&EvalInput::new(gt.clone(), vec![vec![], vec![]]));
        assert_eq!(r.summary.hota, 0.0);
        let r = hota(&EvalInput::new(vec![vec![]], vec![vec![]]));
        assert_eq!(r.summary.hota, 0.0);
    }

    #[test]
    fn disjoint_frame_is_all_misses() {
        let m = match_frame(&[b(0.0), b(20.0)], &[b(50.0)], 0.5, &[vec![1.0], vec![1.0]]);
        assert!(m.matches.is_empty());
        assert_eq!(m.unmatched_gt, vec![0, 1]);
        assert_eq!(m.unmatched_pred, vec![0]);
    }
}
