//! Query-to-object assignment and the per-frame training loss.

use std::collections::BTreeSet;

use super::config::TrackerConfig;
use super::model::HeadOut;
use crate::assign::solve;
use crate::bbox::NormBox;
use crate::error::Result;
use crate::nn::{focal_loss, focal_match_cost, giou_loss, l1_box, Tape, Tensor, Var};

/// A visible object on one frame, normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTarget {
    pub id: u32,
    pub bbox: NormBox,
}

/// Cost of explaining `gt` with a query predicting (`logit`, `bbox`).
pub fn match_cost(logit: f64, bbox: &[f64; 4], gt: &NormBox, cfg: &TrackerConfig) -> f64 {
    let p = NormBox::from_slice(bbox);
    let l1 = (p.cx - gt.cx).abs() + (p.cy - gt.cy).abs() + (p.w - gt.w).abs() + (p.h - gt.h).abs();
    cfg.lambda_cls * focal_match_cost(logit, cfg.focal_alpha, cfg.focal_gamma)
        + cfg.lambda_l1 * l1
        + cfg.lambda_giou * (1.0 - p.giou(gt))
}

/// Assign ground-truth objects to queries.
///
/// `track_ids[i]` is the identity a track query carries (`None` for detect
/// queries). A track query is tied to its own object while that object is
/// visible; every remaining object goes to a detect query by minimum total
/// [`match_cost`]. Returns, per query, the index into `gt`.
pub fn assign_targets(
    logits: &[f64],
    boxes: &[[f64; 4]],
    track_ids: &[Option<u32>],
    gt: &[GtTarget],
    cfg: &TrackerConfig,
) -> Vec<Option<usize>> {
    let n = logits.len();
    let mut out = vec![None; n];
    let mut taken = vec![false; gt.len()];
    for (q, tid) in track_ids.iter().enumerate() {
        if let Some(id) = tid {
            if let Some(g) = gt.iter().position(|t| t.id == *id) {
                if !taken[g] {
                    out[q] = Some(g);
                    taken[g] = true;
                }
            }
        }
    }
    let free_gt: Vec<usize> = (0..gt.len()).filter(|&g| !taken[g]).collect();
    let det: Vec<usize> = (0..n).filter(|&q| track_ids[q].is_none()).collect();
    if free_gt.is_empty() || det.is_empty() {
        return out;
    }
    let cost: Vec<Vec<f64>> = det
        .iter()
        .map(|&q| free_gt.iter().map(|&g| match_cost(logits[q], &boxes[q], &gt[g].bbox, cfg)).collect())
        .collect();
    for (r, c) in solve(&cost).into_iter().enumerate() {
        if let Some(c) = c {
            out[det[r]] = Some(free_gt[c]);
        }
    }
    out
}

/// Loss components of one frame, already weighted and normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub refer: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou + self.refer
    }

    pub fn add(&mut self, o: &LossParts, w: f64) {
        self.cls += w * o.cls;
        self.l1 += w * o.l1;
        self.giou += w * o.giou;
        self.refer += w * o.refer;
    }
}

/// Weighted detection + referring loss for one frame, normalized by the
/// number of visible objects. Unmatched queries are background with refer
/// target 0.
pub fn frame_loss(
    tape: &mut Tape,
    out: &HeadOut,
    assignment: &[Option<usize>],
    gt: &[GtTarget],
    referred: &BTreeSet<u32>,
    cfg: &TrackerConfig,
) -> Result<(Var, LossParts)> {
    let n = assignment.len();
    let norm = 1.0 / gt.len().max(1) as f64;
    let cls_t: Vec<f64> = assignment.iter().map(|a| if a.is_some() { 1.0 } else { 0.0 }).collect();
    let ref_t: Vec<f64> = assignment
        .iter()
        .map(|a| match a {
            Some(g) if referred.contains(&gt[*g].id) => 1.0,
            _ => 0.0,
        })
        .collect();
    // Terms with zero weight stay off the tape, so they send no gradient.
    let mut terms = Vec::new();
    let mut parts = LossParts::default();
    if cfg.lambda_cls > 0.0 {
        let cls = focal_loss(tape, out.class_logits, &Tensor::new(&[n, 1], cls_t)?, cfg.focal_alpha, cfg.focal_gamma)?;
        let cls = tape.scale(cls, cfg.lambda_cls * norm)?;
        parts.cls = tape.value(cls).item();
        terms.push(cls);
    }
    if cfg.lambda_ref > 0.0 {
        let refer = focal_loss(tape, out.refer_logits, &Tensor::new(&[n, 1], ref_t)?, 1.0, 0.0)?;
        let refer = tape.scale(refer, cfg.lambda_ref * norm)?;
        parts.refer = tape.value(refer).item();
        terms.push(refer);
    }
    let rows: Vec<usize> = (0..n).filter(|&q| assignment[q].is_some()).collect();
    if !rows.is_empty() && (cfg.lambda_l1 > 0.0 || cfg.lambda_giou > 0.0) {
        let target: Vec<f64> = rows
            .iter()
            .flat_map(|&q| gt[assignment[q].expect("matched")].bbox.to_array())
            .collect();
        let target = Tensor::new(&[rows.len(), 4], target)?;
        let pred = tape.gather_rows(out.boxes, &rows)?;
        if cfg.lambda_l1 > 0.0 {
            let l1 = l1_box(tape, pred, &target)?;
            let l1 = tape.scale(l1, cfg.lambda_l1 * norm)?;
            parts.l1 = tape.value(l1).item();
            terms.push(l1);
        }
        if cfg.lambda_giou > 0.0 {
            let g = giou_loss(tape, pred, &target)?;
            let g = tape.scale(g, cfg.lambda_giou * norm)?;
            parts.giou = tape.value(g).item();
            terms.push(g);
        }
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1.min(terms.len())..] {
        total = tape.add(total, t)?;
    }
    Ok((total, parts))
}
