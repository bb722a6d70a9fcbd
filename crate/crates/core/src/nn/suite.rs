//! Finite-difference verification suite for every differentiable primitive.
//!
//! Each case maps random inputs through one op and contracts the result with
//! a fixed random weight tensor, so that no output coordinate cancels out
//! (plain `sum(softmax(x))` would have an identically zero gradient).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check_many, GradCheckReport};
use super::layers::MultiHeadAttention;
use super::loss::{focal_loss, giou_loss, l1_box};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const SUITE_EPS: f64 = 1e-5;
/// Relative-error bound every primitive must meet.
pub const PRIMITIVE_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type CaseFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Applied to the random inputs before checking (keeps points inside the domain).
    prep: fn(&mut Tensor, usize),
    f: CaseFn,
}

fn noop(_: &mut Tensor, _: usize) {}

/// Make input #1 strictly positive sizes for the box cases (columns 2, 3).
fn positive_sizes(t: &mut Tensor, _idx: usize) {
    for row in t.data_mut().chunks_mut(4) {
        row[2] = 0.05 + row[2].abs() * 0.2;
        row[3] = 0.05 + row[3].abs() * 0.2;
    }
}

fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.shape(y), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            shapes: &[&[3, 4], &[4, 5]],
            prep: noop,
            f: |t, x| {
                let y = t.matmul(x[0], x[1])?;
                contract(t, y, 1)
            },
        },
        Case {
            name: "matmul_t",
            shapes: &[&[3, 4], &[5, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.matmul_t(x[0], x[1])?;
                contract(t, y, 2)
            },
        },
        Case {
            name: "add",
            shapes: &[&[3, 4], &[3, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.add(x[0], x[1])?;
                contract(t, y, 3)
            },
        },
        Case {
            name: "add_row_broadcast",
            shapes: &[&[3, 4], &[1, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.add(x[0], x[1])?;
                contract(t, y, 4)
            },
        },
        Case {
            name: "sub_col_broadcast",
            shapes: &[&[3, 4], &[3, 1]],
            prep: noop,
            f: |t, x| {
                let y = t.sub(x[0], x[1])?;
                contract(t, y, 5)
            },
        },
        Case {
            name: "mul_scalar_broadcast",
            shapes: &[&[3, 4], &[1, 1]],
            prep: noop,
            f: |t, x| {
                let y = t.mul(x[0], x[1])?;
                contract(t, y, 6)
            },
        },
        Case {
            name: "div",
            shapes: &[&[3, 4], &[3, 4]],
            prep: noop,
            f: |t, x| {
                let sq = t.mul(x[1], x[1])?;
                let d = t.add_scalar(sq, 0.5)?;
                let y = t.div(x[0], d)?;
                contract(t, y, 7)
            },
        },
        Case {
            name: "minimum_maximum",
            shapes: &[&[3, 4], &[3, 4]],
            prep: noop,
            f: |t, x| {
                let a = t.minimum(x[0], x[1])?;
                let b = t.maximum(x[0], x[1])?;
                let y = t.concat(&[a, b], 0)?;
                contract(t, y, 8)
            },
        },
        Case {
            name: "scale",
            shapes: &[&[2, 3]],
            prep: noop,
            f: |t, x| {
                let y = t.scale(x[0], -1.7)?;
                let y = t.add_scalar(y, 0.3)?;
                contract(t, y, 9)
            },
        },
        Case {
            name: "concat",
            shapes: &[&[2, 3], &[4, 3], &[2, 2]],
            prep: noop,
            f: |t, x| {
                let rows = t.concat(&[x[0], x[1]], 0)?;
                let top = t.slice(rows, 0, 0, 2)?;
                let cols = t.concat(&[top, x[2]], 1)?;
                let a = contract(t, rows, 10)?;
                let b = contract(t, cols, 11)?;
                t.add(a, b)
            },
        },
        Case {
            name: "slice",
            shapes: &[&[4, 5]],
            prep: noop,
            f: |t, x| {
                let r = t.slice(x[0], 0, 1, 2)?;
                let c = t.slice(r, 1, 2, 3)?;
                contract(t, c, 12)
            },
        },
        Case {
            name: "transpose",
            shapes: &[&[3, 5]],
            prep: noop,
            f: |t, x| {
                let y = t.transpose(x[0])?;
                contract(t, y, 13)
            },
        },
        Case {
            name: "reshape",
            shapes: &[&[3, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.reshape(x[0], &[6, 2])?;
                contract(t, y, 14)
            },
        },
        Case {
            name: "relu",
            shapes: &[&[4, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.relu(x[0])?;
                contract(t, y, 15)
            },
        },
        Case {
            name: "sigmoid",
            shapes: &[&[4, 4]],
            prep: noop,
            f: |t, x| {
                let y = t.sigmoid(x[0])?;
                contract(t, y, 16)
            },
        },
        Case {
            name: "exp_log_sqrt",
            shapes: &[&[3, 3]],
            prep: noop,
            f: |t, x| {
                let e = t.exp(x[0])?;
                let l = t.log(e)?;
                let sq = t.mul(x[0], x[0])?;
                let p = t.add_scalar(sq, 0.25)?;
                let s = t.sqrt(p)?;
                let y = t.concat(&[e, l, s], 0)?;
                contract(t, y, 17)
            },
        },
        Case {
            name: "abs",
            shapes: &[&[3, 3]],
            prep: noop,
            f: |t, x| {
                let y = t.abs(x[0])?;
                contract(t, y, 18)
            },
        },
        Case {
            name: "layernorm",
            shapes: &[&[3, 6]],
            prep: noop,
            f: |t, x| {
                let y = t.layernorm(x[0], 1e-5)?;
                contract(t, y, 19)
            },
        },
        Case {
            name: "softmax_rows",
            shapes: &[&[3, 5]],
            prep: noop,
            f: |t, x| {
                let y = t.softmax(x[0], 1)?;
                contract(t, y, 20)
            },
        },
        Case {
            name: "softmax_cols",
            shapes: &[&[3, 5]],
            prep: noop,
            f: |t, x| {
                let y = t.softmax(x[0], 0)?;
                contract(t, y, 21)
            },
        },
        Case {
            name: "linear",
            shapes: &[&[3, 4], &[4, 2], &[1, 2]],
            prep: noop,
            f: |t, x| {
                let y = super::layers::linear(t, x[0], x[1], x[2])?;
                contract(t, y, 22)
            },
        },
        Case {
            name: "embedding_lookup",
            shapes: &[&[5, 3]],
            prep: noop,
            f: |t, x| {
                let y = t.gather_rows(x[0], &[4, 0, 4, 2])?;
                contract(t, y, 23)
            },
        },
        Case {
            name: "sum_mean_sum_axis",
            shapes: &[&[3, 4]],
            prep: noop,
            f: |t, x| {
                let r = t.sum_axis(x[0], 0)?;
                let c = t.sum_axis(x[0], 1)?;
                let a = contract(t, r, 24)?;
                let b = contract(t, c, 25)?;
                let m = t.mean(x[0])?;
                let s = t.add(a, b)?;
                t.add(s, m)
            },
        },
        Case {
            name: "focal_loss",
            shapes: &[&[4, 3]],
            prep: noop,
            f: |t, x| {
                let y = Tensor::new(&[4, 3], vec![1., 0., 0., 1., 1., 0., 0., 0., 1., 0., 1., 0.])?;
                focal_loss(t, x[0], &y, 0.25, 2.0)
            },
        },
        Case {
            name: "l1_box",
            shapes: &[&[3, 4]],
            prep: positive_sizes,
            f: |t, x| {
                let target = Tensor::from_rows(&[
                    vec![0.5, 0.5, 0.2, 0.1],
                    vec![0.1, 0.9, 0.3, 0.3],
                    vec![0.7, 0.2, 0.05, 0.4],
                ])?;
                l1_box(t, x[0], &target)
            },
        },
        Case {
            name: "giou_loss",
            shapes: &[&[3, 4]],
            prep: |b, _| {
                positive_sizes(b, 0);
                // keep centers near their targets so most pairs overlap
                let c = [[0.5, 0.5], [0.3, 0.6], [0.7, 0.3]];
                for (row, c) in b.data_mut().chunks_mut(4).zip(c) {
                    row[0] = c[0] + 0.1 * row[0];
                    row[1] = c[1] + 0.1 * row[1];
                }
            },
            f: |t, x| {
                let target = Tensor::from_rows(&[
                    vec![0.52, 0.47, 0.2, 0.1],
                    vec![0.3, 0.65, 0.15, 0.2],
                    vec![0.9, 0.9, 0.05, 0.04],
                ])?;
                giou_loss(t, x[0], &target)
            },
        },
    ]
}

/// Run every primitive case at `points` random inputs; the report per case
/// is the worst over its points.
pub fn primitive_suite(seed: u64, points: usize) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            coords_checked: 0,
        };
        for _ in 0..points {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = Tensor::randn(s, 1.0, &mut rng);
                    (case.prep)(&mut t, i);
                    t
                })
                .collect();
            let r = grad_check_many(case.f, &inputs, SUITE_EPS)?;
            worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
            worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
            worst.coords_checked += r.coords_checked;
        }
        out.push(SuiteEntry {
            name: case.name,
            report: worst,
        });
    }
    out.push(attention_entry(&mut rng, points)?);
    Ok(out)
}

/// Multi-head attention checked with respect to its three inputs.
fn attention_entry(rng: &mut ChaCha8Rng, points: usize) -> Result<SuiteEntry> {
    let mut ps = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut ps, "mha", "main", 8, 6, 2, rng)?;
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
    };
    for _ in 0..points {
        let inputs = vec![
            Tensor::randn(&[4, 8], 1.0, rng),
            Tensor::randn(&[3, 6], 1.0, rng),
            Tensor::randn(&[3, 6], 1.0, rng),
        ];
        let r = grad_check_many(
            |t, x| {
                let o = mha.forward(t, &ps, x[0], x[1], x[2], None)?;
                contract(t, o.output, 26)
            },
            &inputs,
            SUITE_EPS,
        )?;
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
        worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
        worst.coords_checked += r.coords_checked;
    }
    Ok(SuiteEntry {
        name: "multi_head_attention",
        report: worst,
    })
}
