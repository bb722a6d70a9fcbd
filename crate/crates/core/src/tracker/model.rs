//! Network blocks: early-fusion encoder, query guidance, decoder and heads.
//!
//! Every block works on one frame. Queries are rows; detect queries come
//! first, followed by track queries.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ReferHead, SgmVariant, TrackerConfig};
use super::text::{self, TextVars, FROZEN_EMBED, FROZEN_GROUP, TEXT_EMBED};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore, Tape, Tensor, Var};

const DET_CONTENT: &str = "queries.content";
const LOG_TEMP: &str = "refer.log_temp";
const REFER_BIAS: &str = "refer.bias";
/// Keeps reference boxes away from the sigmoid saturation points.
const REF_CLAMP: f64 = 1e-4;

/// Sinusoidal code of a normalized point, `dim/4` frequencies per axis.
pub fn point_code(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let k = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for i in 0..k {
        let f = std::f64::consts::PI * 2f64.powf(i as f64 / 2.0);
        out.extend([(x * f).sin(), (x * f).cos(), (y * f).sin(), (y * f).cos()]);
    }
    out
}

fn codes(points: &[(f64, f64)], dim: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = points.iter().map(|&(x, y)| point_code(x, y, dim)).collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, dim]);
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(REF_CLAMP, 1.0 - REF_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Anchor reference boxes for detect queries, spread on a near-square lattice.
pub fn anchor_boxes(n: usize, aspect: f64) -> Vec<[f64; 4]> {
    let cols = ((n as f64 * aspect).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    (0..n)
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            [
                (c as f64 + 0.5) / cols as f64,
                (r as f64 + 0.5) / rows as f64,
                1.0 / cols as f64,
                1.0 / rows as f64,
            ]
        })
        .collect()
}

/// Cosine of each row of `a` (`n×k`) with the single row `s` (`1×k`).
/// Zero vectors score 0; results are clamped to `[-1, 1]` against rounding.
pub fn cosine_rows(tape: &mut Tape, a: Var, s: Var) -> Result<Var> {
    let dot = tape.matmul_t(a, s)?;
    let a2 = tape.mul(a, a)?;
    let na = tape.sum_axis(a2, 1)?;
    let na = tape.add_scalar(na, 1e-24)?;
    let na = tape.sqrt(na)?;
    let s2 = tape.mul(s, s)?;
    let ns = tape.sum(s2)?;
    let ns = tape.add_scalar(ns, 1e-24)?;
    let ns = tape.sqrt(ns)?;
    let c = tape.div(dot, na)?;
    let c = tape.div(c, ns)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let c = tape.minimum(c, one)?;
    let neg = tape.constant(Tensor::scalar(-1.0));
    tape.maximum(c, neg)
}

fn mean_rows(tape: &mut Tape, a: Var) -> Result<Var> {
    let n = tape.value(a).rows().max(1);
    let s = tape.sum_axis(a, 0)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Repeat a `1×m` row `n` times.
fn tile_row(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    tape.matmul(ones, row)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    sa: MultiHeadAttention,
    ln2: LayerNorm,
    ca: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct SgmBlock {
    sa: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
    text_proj: Linear,
    ca: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    sa: MultiHeadAttention,
    ln2: LayerNorm,
    ca: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
enum ReferBlock {
    Cosine { proj: Linear, frozen: bool },
    Ffn(FeedForward),
    Concat(FeedForward),
    Cross { ca: MultiHeadAttention, out: Linear },
}

/// One query's reference box `(cx, cy, w, h)`, normalized.
pub type RefBox = [f64; 4];

/// Reference for a track's next frame: its last box shifted by `motion`
/// times its last centre displacement.
pub fn extrapolate(last: &RefBox, velocity: [f64; 2], motion: f64) -> RefBox {
    [last[0] + motion * velocity[0], last[1] + motion * velocity[1], last[2], last[3]]
}

/// Centre displacement from `prev` to `next`.
pub fn displacement(prev: &RefBox, next: &RefBox) -> [f64; 2] {
    [next[0] - prev[0], next[1] - prev[1]]
}

/// Per-frame head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadOut {
    /// Final decoder features `D_t` (`N×D`).
    pub d: Var,
    /// Class logits (`N×1`).
    pub class_logits: Var,
    /// Boxes `(cx, cy, w, h)` (`N×4`).
    pub boxes: Var,
    /// Calibrated refer logits (`N×1`).
    pub refer_logits: Var,
    /// Raw similarity `R ∈ [-1, 1]` for cosine heads (`N×1`); `None` for the others.
    pub refer_cos: Option<Var>,
}

/// The referring tracker network. Blocks hold parameter names; values live in
/// `params`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrackerConfig,
    pub params: ParamStore,
    input_proj: Linear,
    encoder: Vec<EncoderLayer>,
    sgm: SgmBlock,
    decoder: Vec<DecoderLayer>,
    out_norm: LayerNorm,
    class_head: Linear,
    box_head: FeedForward,
    refer: ReferBlock,
    anchors: Vec<RefBox>,
    cell_centers: Vec<(f64, f64)>,
    grid_code: Tensor,
}

impl Model {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut ps = ParamStore::new();
        let vocab = text::fixed_vocab_len() + c.oov_buckets;
        ps.insert(TEXT_EMBED, "text", Tensor::randn(&[vocab, d], 0.5, &mut rng))?;
        ps.insert(FROZEN_EMBED, FROZEN_GROUP, text::orthonormal_rows(vocab, c.frozen_dim, c.init_seed))?;
        ps.freeze_group(FROZEN_GROUP);

        let input_proj = Linear::new(&mut ps, "visual.proj", "visual", c.feature_channels(), d, &mut rng)?;
        let mut encoder = Vec::new();
        for l in 0..c.encoder_layers {
            let n = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                ln1: LayerNorm::new(&mut ps, &format!("{n}.ln1"), "encoder", d)?,
                sa: MultiHeadAttention::new(&mut ps, &format!("{n}.sa"), "encoder", d, d, c.heads, &mut rng)?,
                ln2: LayerNorm::new(&mut ps, &format!("{n}.ln2"), "encoder", d)?,
                ca: MultiHeadAttention::new(&mut ps, &format!("{n}.ca"), "encoder", d, d, c.heads, &mut rng)?,
                ln3: LayerNorm::new(&mut ps, &format!("{n}.ln3"), "encoder", d)?,
                ffn: FeedForward::new(&mut ps, &format!("{n}.ffn"), "encoder", d, c.ffn_dim, d, &mut rng)?,
            });
        }
        ps.insert(DET_CONTENT, "queries", Tensor::randn(&[c.n_det, d], 0.5, &mut rng))?;
        let sgm = SgmBlock {
            sa: MultiHeadAttention::new(&mut ps, "sgm.sa", "sgm", d, d, c.heads, &mut rng)?,
            ln1: LayerNorm::new(&mut ps, "sgm.ln1", "sgm", d)?,
            ffn: FeedForward::new(&mut ps, "sgm.ffn", "sgm", d, c.ffn_dim, d, &mut rng)?,
            ln2: LayerNorm::new(&mut ps, "sgm.ln2", "sgm", d)?,
            text_proj: Linear::new(&mut ps, "sgm.text_proj", "sgm", d, d, &mut rng)?,
            ca: MultiHeadAttention::new(&mut ps, "sgm.ca", "sgm", d, d, c.heads, &mut rng)?,
        };
        let mut decoder = Vec::new();
        for l in 0..c.decoder_layers {
            let n = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                ln1: LayerNorm::new(&mut ps, &format!("{n}.ln1"), "decoder", d)?,
                sa: MultiHeadAttention::new(&mut ps, &format!("{n}.sa"), "decoder", d, d, c.heads, &mut rng)?,
                ln2: LayerNorm::new(&mut ps, &format!("{n}.ln2"), "decoder", d)?,
                ca: MultiHeadAttention::new(&mut ps, &format!("{n}.ca"), "decoder", d, d, c.heads, &mut rng)?,
                ln3: LayerNorm::new(&mut ps, &format!("{n}.ln3"), "decoder", d)?,
                ffn: FeedForward::new(&mut ps, &format!("{n}.ffn"), "decoder", d, c.ffn_dim, d, &mut rng)?,
            });
        }
        let out_norm = LayerNorm::new(&mut ps, "decoder.out_norm", "decoder", d)?;
        let class_head = Linear::new(&mut ps, "heads.class", "heads", d, 1, &mut rng)?;
        // Low prior on "object" keeps the focal loss calm early on.
        ps.get_mut(&class_head.bias).expect("exists").data_mut()[0] = -2.0;
        let box_head = FeedForward::new(&mut ps, "heads.box", "heads", d, d, 4, &mut rng)?;
        box_head.fc2.zero(&mut ps);
        let refer = match c.refer_head {
            ReferHead::Scb => ReferBlock::Cosine {
                proj: Linear::new(&mut ps, "refer.proj", "refer", d, c.frozen_dim, &mut rng)?,
                frozen: true,
            },
            ReferHead::Contrast => ReferBlock::Cosine {
                proj: Linear::new(&mut ps, "refer.proj", "refer", d, d, &mut rng)?,
                frozen: false,
            },
            ReferHead::Ffn => ReferBlock::Ffn(FeedForward::new(&mut ps, "refer.ffn", "refer", d, d, 1, &mut rng)?),
            ReferHead::ConcatMlp => {
                ReferBlock::Concat(FeedForward::new(&mut ps, "refer.mlp", "refer", 2 * d, d, 1, &mut rng)?)
            }
            ReferHead::CrossAttn => ReferBlock::Cross {
                ca: MultiHeadAttention::new(&mut ps, "refer.ca", "refer", d, d, c.heads, &mut rng)?,
                out: Linear::new(&mut ps, "refer.out", "refer", d, 1, &mut rng)?,
            },
        };
        if matches!(refer, ReferBlock::Cosine { .. }) {
            ps.insert(LOG_TEMP, "refer", Tensor::scalar(5f64.ln()))?;
            ps.insert(REFER_BIAS, "refer", Tensor::scalar(0.0))?;
        }
        let (gw, gh) = c.grid;
        let cell_centers: Vec<(f64, f64)> = (0..gw * gh)
            .map(|i| ((i % gw) as f64 + 0.5) / gw as f64)
            .zip((0..gw * gh).map(|i| ((i / gw) as f64 + 0.5) / gh as f64))
            .collect();
        let grid_code = codes(&cell_centers, d);
        let anchors = anchor_boxes(c.n_det, gw as f64 / gh as f64);
        Ok(Self {
            config,
            params: ps,
            input_proj,
            encoder,
            sgm,
            decoder,
            out_norm,
            class_head,
            box_head,
            refer,
            anchors,
            cell_centers,
            grid_code,
        })
    }

    /// Build from a config and load parameters from a checkpoint.
    pub fn load(config: TrackerConfig, checkpoint: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.load(checkpoint)?;
        Ok(m)
    }

    pub fn anchors(&self) -> &[RefBox] {
        &self.anchors
    }

    pub fn tokens(&self) -> usize {
        self.cell_centers.len()
    }

    pub fn text(&self, tape: &mut Tape, prompt: &str) -> Result<TextVars> {
        let ids = text::tokenize(prompt, self.config.oov_buckets);
        if ids.is_empty() {
            return Err(Error::Validation("empty prompt".into()));
        }
        text::encode_text(tape, &self.params, &ids)
    }

    /// Zero the value paths of every text cross-attention in the encoder.
    pub fn zero_encoder_text_paths(&mut self) {
        for l in &self.encoder {
            l.ca.zero_value_path(&mut self.params);
        }
    }

    /// Zero the value path of the guidance cross-attention.
    pub fn zero_sgm_text_path(&mut self) {
        self.sgm.ca.zero_value_path(&mut self.params);
    }

    /// Zero the value paths of the decoder cross-attention into the visual tokens.
    pub fn zero_decoder_visual_paths(&mut self) {
        for l in &self.decoder {
            l.ca.zero_value_path(&mut self.params);
        }
    }

    /// Early fusion: project the feature grid (`cells × channels`, row-major)
    /// to tokens and run the encoder with text cross-attention. Returns `E_t`.
    pub fn fuse_encode(&self, tape: &mut Tape, features: &[f64], text: &TextVars) -> Result<Var> {
        let cells = self.tokens();
        let ch = self.config.feature_channels();
        if features.len() != cells * ch {
            return Err(Error::dim(
                "fuse_encode",
                format!("features have {} values, expected {cells}×{ch}", features.len()),
            ));
        }
        let f = tape.constant(Tensor::new(&[cells, ch], features.to_vec())?);
        self.fuse_encode_var(tape, f, text.s_emb)
    }

    /// [`Model::fuse_encode`] on an existing feature node.
    pub fn fuse_encode_var(&self, tape: &mut Tape, features: Var, s_emb: Var) -> Result<Var> {
        let ps = &self.params;
        let x = self.input_proj.forward(tape, ps, features)?;
        let pos = tape.constant(self.grid_code.clone());
        let mut x = tape.add(x, pos)?;
        for l in &self.encoder {
            let h = l.ln1.forward(tape, ps, x)?;
            let a = l.sa.forward(tape, ps, h, h, h, None)?.output;
            x = tape.add(x, a)?;
            let h = l.ln2.forward(tape, ps, x)?;
            let a = l.ca.forward(tape, ps, h, s_emb, s_emb, None)?.output;
            x = tape.add(x, a)?;
            let h = l.ln3.forward(tape, ps, x)?;
            let a = l.ffn.forward(tape, ps, h)?;
            x = tape.add(x, a)?;
        }
        Ok(x)
    }

    /// Positional codes of reference-box centres (`N×D`).
    pub fn query_pos(&self, tape: &mut Tape, refs: &[RefBox]) -> Var {
        let pts: Vec<(f64, f64)> = refs.iter().map(|r| (r[0], r[1])).collect();
        tape.constant(codes(&pts, self.config.d_model))
    }

    fn sgm_full(&self, tape: &mut Tape, x: Var, s_proj: Var, with_sa: bool) -> Result<Var> {
        let ps = &self.params;
        let g = &self.sgm;
        let q = if with_sa { self.query_stage(tape, x)? } else { x };
        let a = g.ca.forward(tape, ps, q, s_proj, s_proj, None)?.output;
        tape.add(q, a)
    }

    /// The self-attention stage of query guidance alone (`Q̂_t`), before the
    /// prompt cross-attention.
    pub fn sgm_query_stage(&self, tape: &mut Tape, queries: Var, pos: Var) -> Result<Var> {
        let x = tape.add(queries, pos)?;
        self.query_stage(tape, x)
    }

    fn query_stage(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = &self.sgm;
        let a = g.sa.forward(tape, &self.params, x, x, x, None)?.output;
        let q = tape.add(x, a)?;
        let q = g.ln1.forward(tape, &self.params, q)?;
        let f = g.ffn.forward(tape, &self.params, q)?;
        let q = tape.add(q, f)?;
        g.ln2.forward(tape, &self.params, q)
    }

    /// Query guidance: `queries` is `N×D` with the first `n_det` rows being
    /// detect queries; `pos` their positional codes.
    pub fn sgm(&self, tape: &mut Tape, queries: Var, pos: Var, s_emb: Var, n_det: usize) -> Result<Var> {
        let x = tape.add(queries, pos)?;
        let variant = self.config.sgm;
        if variant == SgmVariant::None {
            return Ok(x);
        }
        let s_proj = self.sgm.text_proj.forward(tape, &self.params, s_emb)?;
        match variant {
            SgmVariant::Full => self.sgm_full(tape, x, s_proj, true),
            SgmVariant::OnlyCrossAttn => self.sgm_full(tape, x, s_proj, false),
            SgmVariant::OnlyDet => {
                let n = tape.value(x).rows();
                if n == n_det {
                    return self.sgm_full(tape, x, s_proj, true);
                }
                let det = tape.slice(x, 0, 0, n_det)?;
                let det = self.sgm_full(tape, det, s_proj, true)?;
                let trk = tape.slice(x, 0, n_det, n - n_det)?;
                tape.concat(&[det, trk], 0)
            }
            SgmVariant::None => unreachable!(),
        }
    }

    fn locality_bias(&self, tape: &mut Tape, refs: &[RefBox]) -> Option<Var> {
        let s = self.config.locality;
        if s == 0.0 {
            return None;
        }
        let cells = &self.cell_centers;
        let mut data = Vec::with_capacity(refs.len() * cells.len());
        for r in refs {
            let (sx, sy) = (s * r[2].max(1e-3), s * r[3].max(1e-3));
            for &(x, y) in cells {
                let dx = (x - r[0]) / sx;
                let dy = (y - r[1]) / sy;
                data.push(-0.5 * (dx * dx + dy * dy));
            }
        }
        Some(tape.constant(Tensor::new(&[refs.len(), cells.len()], data).expect("shape")))
    }

    /// Decoder over guided queries against `E_t`. Returns `D_t` (`N×D`).
    pub fn decode(&self, tape: &mut Tape, queries: Var, pos: Var, e_t: Var, refs: &[RefBox]) -> Result<Var> {
        let ps = &self.params;
        let bias = self.locality_bias(tape, refs);
        let gpos = tape.constant(self.grid_code.clone());
        let keys = tape.add(e_t, gpos)?;
        let mut x = queries;
        for l in &self.decoder {
            let h = l.ln1.forward(tape, ps, x)?;
            let hp = tape.add(h, pos)?;
            let a = l.sa.forward(tape, ps, hp, hp, h, None)?.output;
            x = tape.add(x, a)?;
            let h = l.ln2.forward(tape, ps, x)?;
            let hp = tape.add(h, pos)?;
            let a = l.ca.forward(tape, ps, hp, keys, e_t, bias)?.output;
            x = tape.add(x, a)?;
            let h = l.ln3.forward(tape, ps, x)?;
            let a = l.ffn.forward(tape, ps, h)?;
            x = tape.add(x, a)?;
        }
        self.out_norm.forward(tape, ps, x)
    }

    /// Similarity head on `D_t`: calibrated refer logits and, for cosine
    /// heads, the raw similarity.
    pub fn refer_score(&self, tape: &mut Tape, d: Var, text: &TextVars) -> Result<(Var, Option<Var>)> {
        let ps = &self.params;
        let n = tape.value(d).rows();
        match &self.refer {
            ReferBlock::Cosine { proj, frozen } => {
                let p = proj.forward(tape, ps, d)?;
                let src = if *frozen { text.s_frozen } else { text.s_emb };
                let s = mean_rows(tape, src)?;
                let r = cosine_rows(tape, p, s)?;
                let lt = tape.param(ps, LOG_TEMP)?;
                let temp = tape.exp(lt)?;
                let z = tape.mul(r, temp)?;
                let b = tape.param(ps, REFER_BIAS)?;
                let z = tape.add(z, b)?;
                Ok((z, Some(r)))
            }
            ReferBlock::Ffn(f) => Ok((f.forward(tape, ps, d)?, None)),
            ReferBlock::Concat(f) => {
                let s = mean_rows(tape, text.s_emb)?;
                let s = tile_row(tape, s, n)?;
                let x = tape.concat(&[d, s], 1)?;
                Ok((f.forward(tape, ps, x)?, None))
            }
            ReferBlock::Cross { ca, out } => {
                let a = ca.forward(tape, ps, d, text.s_emb, text.s_emb, None)?.output;
                let h = tape.add(d, a)?;
                Ok((out.forward(tape, ps, h)?, None))
            }
        }
    }

    /// Class, box and refer heads on `D_t`.
    pub fn heads(&self, tape: &mut Tape, d: Var, refs: &[RefBox], text: &TextVars) -> Result<HeadOut> {
        let ps = &self.params;
        let class_logits = self.class_head.forward(tape, ps, d)?;
        let delta = self.box_head.forward(tape, ps, d)?;
        let inv: Vec<f64> = refs.iter().flat_map(|r| r.iter().map(|&v| inverse_sigmoid(v))).collect();
        let inv = tape.constant(Tensor::new(&[refs.len(), 4], inv)?);
        let z = tape.add(delta, inv)?;
        let boxes = tape.sigmoid(z)?;
        let (refer_logits, refer_cos) = self.refer_score(tape, d, text)?;
        Ok(HeadOut {
            d,
            class_logits,
            boxes,
            refer_logits,
            refer_cos,
        })
    }

    /// Detect-query content rows (`n_det × D`).
    pub fn detect_queries(&self, tape: &mut Tape) -> Result<Var> {
        tape.param(&self.params, DET_CONTENT)
    }

    /// Guidance, decoding and heads for one set of queries against `E_t`.
    /// `tracks` are extra content rows (`n_track × D`) with their references.
    pub fn frame_heads(
        &self,
        tape: &mut Tape,
        e_t: Var,
        text: &TextVars,
        tracks: Option<Var>,
        track_refs: &[RefBox],
    ) -> Result<(HeadOut, Vec<RefBox>)> {
        let det = self.detect_queries(tape)?;
        let q = match tracks {
            Some(t) => tape.concat(&[det, t], 0)?,
            None => det,
        };
        let mut refs = self.anchors.clone();
        refs.extend_from_slice(track_refs);
        if tape.value(q).rows() != refs.len() {
            return Err(Error::dim(
                "frame_heads",
                format!("{} queries but {} reference boxes", tape.value(q).rows(), refs.len()),
            ));
        }
        let pos = self.query_pos(tape, &refs);
        let qs = self.sgm(tape, q, pos, text.s_emb, self.config.n_det)?;
        let d = self.decode(tape, qs, pos, e_t, &refs)?;
        let out = self.heads(tape, d, &refs, text)?;
        Ok((out, refs))
    }
}
