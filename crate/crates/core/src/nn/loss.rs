//! Detection losses on `(cx, cy, w, h)` normalized boxes.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Summed sigmoid focal loss.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let per = tape.focal(logits, targets, alpha, gamma)?;
    tape.sum(per)
}

/// Summed absolute coordinate error between `pred` (`n×4`) and fixed targets.
pub fn l1_box(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_boxes(tape.value(pred), "l1_box")?;
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim(
            "l1_box",
            format!("pred {:?} vs target {:?}", tape.shape(pred), target.shape()),
        ));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d)?;
    tape.sum(a)
}

fn check_boxes(t: &Tensor, op: &'static str) -> Result<()> {
    let (_, m) = t.dims2()?;
    if m != 4 {
        return Err(Error::dim(op, format!("boxes need 4 columns, got {m}")));
    }
    for (i, row) in t.data().chunks(4).enumerate() {
        if row[2] <= 0.0 || row[3] <= 0.0 {
            return Err(Error::Validation(format!(
                "{op}: box {i} has nonpositive size ({}, {})",
                row[2], row[3]
            )));
        }
    }
    Ok(())
}

/// Row-wise GIoU between `pred` and fixed `target`, as an `n×1` node.
pub fn giou(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_boxes(tape.value(pred), "giou_loss")?;
    check_boxes(target, "giou_loss")?;
    if tape.shape(pred) != target.shape() {
        return Err(Error::dim(
            "giou_loss",
            format!("pred {:?} vs target {:?}", tape.shape(pred), target.shape()),
        ));
    }
    let t = tape.constant(target.clone());
    let (p1x, p1y, p2x, p2y, pa) = corners(tape, pred)?;
    let (t1x, t1y, t2x, t2y, ta) = corners(tape, t)?;

    let ix1 = tape.maximum(p1x, t1x)?;
    let iy1 = tape.maximum(p1y, t1y)?;
    let ix2 = tape.minimum(p2x, t2x)?;
    let iy2 = tape.minimum(p2y, t2y)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let areas = tape.add(pa, ta)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(p1x, t1x)?;
    let ey1 = tape.minimum(p1y, t1y)?;
    let ex2 = tape.maximum(p2x, t2x)?;
    let ey2 = tape.maximum(p2y, t2y)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let hull = tape.mul(ew, eh)?;
    let gap = tape.sub(hull, union)?;
    let frac = tape.div(gap, hull)?;
    tape.sub(iou, frac)
}

fn corners(tape: &mut Tape, b: Var) -> Result<(Var, Var, Var, Var, Var)> {
    let cx = tape.slice(b, 1, 0, 1)?;
    let cy = tape.slice(b, 1, 1, 1)?;
    let w = tape.slice(b, 1, 2, 1)?;
    let h = tape.slice(b, 1, 3, 1)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let x1 = tape.sub(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let x2 = tape.add(cx, hw)?;
    let y2 = tape.add(cy, hh)?;
    let area = tape.mul(w, h)?;
    Ok((x1, y1, x2, y2, area))
}

/// Summed `1 − GIoU`.
pub fn giou_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let g = giou(tape, pred, target)?;
    let n = tape.value(g).rows() as f64;
    let s = tape.sum(g)?;
    let neg = tape.scale(s, -1.0)?;
    tape.add_scalar(neg, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_zero_giou_loss() {
        let mut tape = Tape::new();
        let b = Tensor::from_rows(&[vec![0.5, 0.5, 0.2, 0.1], vec![0.3, 0.6, 0.05, 0.4]]).unwrap();
        let p = tape.leaf(b.clone());
        let l = giou_loss(&mut tape, p, &b).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn disjoint_unit_squares_giou() {
        // corner boxes (0,0,1,1) and (2,0,1,1) => centers (0.5,0.5), (2.5,0.5)
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5, 1.0, 1.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![2.5, 0.5, 1.0, 1.0]]).unwrap();
        let g = giou(&mut tape, p, &t).unwrap();
        assert!((tape.value(g).item() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_size_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5, 0.0, 1.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![0.5, 0.5, 1.0, 1.0]]).unwrap();
        assert!(matches!(giou_loss(&mut tape, p, &t), Err(Error::Validation(_))));
        assert!(l1_box(&mut tape, p, &t).is_err());
    }

    #[test]
    fn focal_with_gamma_zero_is_cross_entropy() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![-2.0, 0.3, 4.0]]).unwrap());
        let y = Tensor::from_rows(&[vec![0.0, 1.0, 1.0]]).unwrap();
        let l = focal_loss(&mut tape, x, &y, 1.0, 0.0).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let ce = -(1.0 - sig(-2.0)).ln() - sig(0.3).ln() - sig(4.0).ln();
        assert!((tape.value(l).item() - ce).abs() < 1e-12);
    }
}
