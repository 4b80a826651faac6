//! Differentiable building blocks. Every layer registers its parameters in a
//! [`ModelParams`] at construction and replays them onto a [`Tape`] in
//! `forward`.
//!
//! Sequences are row-major `L×d` matrices. Several independent sequences of
//! the same length are stacked as `(B·L)×d` and processed together; layers
//! that mix rows (attention) take the block count explicitly.

use std::rc::Rc;

use rand::Rng;

use super::params::{ModelParams, ParamId};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ModelParams, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: params.add_weight(format!("{name}.w"), in_dim, out_dim, rng),
            b: Some(params.add_zeros(format!("{name}.b"), 1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(params: &mut ModelParams, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: params.add_weight(format!("{name}.w"), in_dim, out_dim, rng),
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &ModelParams, x: Var) -> Result<Var> {
        let w = t.param(p, self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(p, b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Standard LSTM cell with gate column order `[i, f, g, o]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(params: &mut ModelParams, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_x = params.add_weight(format!("{name}.w_x"), in_dim, 4 * hidden, rng);
        let w_h = params.add_weight(format!("{name}.w_h"), hidden, 4 * hidden, rng);
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.set(0, j, 1.0);
        }
        let b = params.add(format!("{name}.b"), bias);
        LstmCell {
            w_x,
            w_h,
            b,
            in_dim,
            hidden,
        }
    }

    /// One step for a batch of rows: `x` is `B×in`, `h` and `c` are `B×hidden`.
    pub fn step(&self, t: &mut Tape, p: &ModelParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let [_, in_dim] = t.shape(x);
        if in_dim != self.in_dim {
            return Err(Error::Shape {
                op: "lstm_cell input",
                lhs: t.shape(x).to_vec(),
                rhs: vec![self.in_dim],
            });
        }
        let wx = t.param(p, self.w_x);
        let b = t.param(p, self.b);
        let xp = t.matmul(x, wx)?;
        let xp = t.add_row(xp, b)?;
        self.step_projected(t, p, xp, h, c)
    }

    /// Step with the input projection `x·W_x + b` already computed.
    fn step_projected(&self, t: &mut Tape, p: &ModelParams, xp: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        if t.shape(h)[1] != hd || t.shape(c) != t.shape(h) {
            return Err(Error::Shape {
                op: "lstm_cell state",
                lhs: t.shape(h).to_vec(),
                rhs: t.shape(c).to_vec(),
            });
        }
        let wh = t.param(p, self.w_h);
        let hp = t.matmul(h, wh)?;
        let gates = t.add(xp, hp)?;
        let i = t.slice_cols(gates, 0, hd)?;
        let f = t.slice_cols(gates, hd, 2 * hd)?;
        let g = t.slice_cols(gates, 2 * hd, 3 * hd)?;
        let o = t.slice_cols(gates, 3 * hd, 4 * hd)?;
        let i = t.sigmoid(i);
        let f = t.sigmoid(f);
        let g = t.tanh(g);
        let o = t.sigmoid(o);
        let fc = t.mul(f, c)?;
        let ig = t.mul(i, g)?;
        let c_next = t.add(fc, ig)?;
        let tc = t.tanh(c_next);
        let h_next = t.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Runs over `steps` time-major steps of `batch` rows each
    /// (`xs` is `(steps·batch)×in`). Returns every hidden state stacked the
    /// same way, and the final hidden state.
    pub fn run(&self, t: &mut Tape, p: &ModelParams, xs: Var, steps: usize, batch: usize) -> Result<(Var, Var)> {
        let [rows, _] = t.shape(xs);
        if rows != steps * batch || steps == 0 {
            return Err(Error::Shape {
                op: "lstm sequence",
                lhs: t.shape(xs).to_vec(),
                rhs: vec![steps, batch],
            });
        }
        let wx = t.param(p, self.w_x);
        let b = t.param(p, self.b);
        let xp = t.matmul(xs, wx)?;
        let xp = t.add_row(xp, b)?;
        let mut h = t.constant(Tensor::zeros(batch, self.hidden));
        let mut c = t.constant(Tensor::zeros(batch, self.hidden));
        let mut all = Vec::with_capacity(steps);
        for s in 0..steps {
            let xs_t = t.slice_rows(xp, s * batch, (s + 1) * batch)?;
            (h, c) = self.step_projected(t, p, xs_t, h, c)?;
            all.push(h);
        }
        let stacked = t.concat_rows(&all)?;
        Ok((stacked, h))
    }
}

/// A stack of LSTM layers sharing the time-major batch layout.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmCell>,
}

impl Lstm {
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        in_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| {
                let d = if l == 0 { in_dim } else { hidden };
                LstmCell::new(params, &format!("{name}.{l}"), d, hidden, rng)
            })
            .collect();
        Lstm { layers }
    }

    /// Hidden states of the top layer at every step, `(steps·batch)×hidden`.
    pub fn sequence(&self, t: &mut Tape, p: &ModelParams, xs: Var, steps: usize, batch: usize) -> Result<Var> {
        let mut seq = xs;
        for cell in &self.layers {
            seq = cell.run(t, p, seq, steps, batch)?.0;
        }
        Ok(seq)
    }

    /// Final hidden state of the top layer, `batch×hidden`.
    pub fn final_state(&self, t: &mut Tape, p: &ModelParams, xs: Var, steps: usize, batch: usize) -> Result<Var> {
        let mut seq = xs;
        let mut last = xs;
        for cell in &self.layers {
            (seq, last) = cell.run(t, p, seq, steps, batch)?;
        }
        Ok(last)
    }
}

/// `H' = ReLU(Â H W)` applied to every `N`-row block of `H`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub w: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    pub fn new(params: &mut ModelParams, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        GcnLayer {
            w: params.add_weight(format!("{name}.w"), in_dim, out_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &ModelParams, h: Var, adj: &Rc<Tensor>) -> Result<Var> {
        if adj.rows() != adj.cols() {
            return Err(Error::Shape {
                op: "gcn adjacency (not square)",
                lhs: adj.shape().to_vec(),
                rhs: t.shape(h).to_vec(),
            });
        }
        let w = t.param(p, self.w);
        let hw = t.matmul(h, w)?;
        let ahw = t.propagate(hw, adj.clone())?;
        Ok(t.relu(ahw))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ModelParams, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: params.add_zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &ModelParams, x: Var) -> Result<Var> {
        let n = t.layer_norm(x, LAYER_NORM_EPS);
        let g = t.param(p, self.gamma);
        let b = t.param(p, self.beta);
        let y = t.mul_row(n, g)?;
        t.add_row(y, b)
    }
}

/// Scaled dot-product attention over `n_heads` subspaces.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    /// `(B·Lq)×d`.
    pub out: Var,
    /// Softmax weights, `Lq×Lk`, indexed `[block][head]`.
    pub weights: Vec<Vec<Var>>,
}

impl MultiHeadAttention {
    pub fn new(params: &mut ModelParams, name: &str, dim: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "indivisible head split: dim {dim} by {n_heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{name}.o"), dim, dim, rng),
            n_heads,
            dim,
        })
    }

    /// `queries` is `(B·Lq)×d`, `keys_values` is `(B·Lk)×d`; each of the
    /// `blocks` query blocks attends only to its own key block.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &ModelParams,
        queries: Var,
        keys_values: Var,
        blocks: usize,
    ) -> Result<AttentionOutput> {
        let [qr, qd] = t.shape(queries);
        let [kr, kd] = t.shape(keys_values);
        if qd != self.dim || kd != self.dim || blocks == 0 || qr % blocks != 0 || kr % blocks != 0 {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: vec![qr, qd],
                rhs: vec![kr, kd],
            });
        }
        let (lq, lk) = (qr / blocks, kr / blocks);
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = self.q.forward(t, p, queries)?;
        let k = self.k.forward(t, p, keys_values)?;
        let v = self.v.forward(t, p, keys_values)?;

        let mut block_out = Vec::with_capacity(blocks);
        let mut weights = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let qb = t.slice_rows(q, b * lq, (b + 1) * lq)?;
            let kb = t.slice_rows(k, b * lk, (b + 1) * lk)?;
            let vb = t.slice_rows(v, b * lk, (b + 1) * lk)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            let mut head_w = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = t.slice_cols(qb, h * dh, (h + 1) * dh)?;
                let kh = t.slice_cols(kb, h * dh, (h + 1) * dh)?;
                let vh = t.slice_cols(vb, h * dh, (h + 1) * dh)?;
                let kt = t.transpose(kh);
                let scores = t.matmul(qh, kt)?;
                let scores = t.scale(scores, scale);
                let a = t.softmax(scores)?;
                heads.push(t.matmul(a, vh)?);
                head_w.push(a);
            }
            block_out.push(if heads.len() == 1 {
                heads[0]
            } else {
                t.concat_cols(&heads)?
            });
            weights.push(head_w);
        }
        let joined = if block_out.len() == 1 {
            block_out[0]
        } else {
            t.concat_rows(&block_out)?
        };
        let out = self.out.forward(t, p, joined)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(params: &mut ModelParams, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            l1: Linear::new(params, &format!("{name}.1"), dim, hidden, rng),
            l2: Linear::new(params, &format!("{name}.2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &ModelParams, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, p, x)?;
        let h = t.relu(h);
        self.l2.forward(t, p, h)
    }
}

/// Post-norm encoder block: attention, residual, norm, feed-forward,
/// residual, norm.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        dim: usize,
        n_heads: usize,
        ff_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), dim, n_heads, rng)?,
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            ff: FeedForward::new(params, &format!("{name}.ff"), dim, ff_dim, rng),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &ModelParams, x: Var, blocks: usize) -> Result<Var> {
        let a = self.attn.forward(t, p, x, x, blocks)?.out;
        let a = t.dropout(a, self.dropout);
        let x1 = t.add(x, a)?;
        let x1 = self.norm1.forward(t, p, x1)?;
        let f = self.ff.forward(t, p, x1)?;
        let f = t.dropout(f, self.dropout);
        let x2 = t.add(x1, f)?;
        self.norm2.forward(t, p, x2)
    }
}

/// Tokens scaled by `√dim`, sinusoidal positional encoding added, then the
/// encoder blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
}

impl TransformerEncoder {
    pub fn new(
        params: &mut ModelParams,
        name: &str,
        dim: usize,
        n_heads: usize,
        layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| EncoderBlock::new(params, &format!("{name}.{l}"), dim, n_heads, 2 * dim, dropout, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { blocks, dim })
    }

    /// `x` holds `blocks` stacked sequences of equal length.
    pub fn forward(&self, t: &mut Tape, p: &ModelParams, x: Var, blocks: usize) -> Result<Var> {
        let [rows, d] = t.shape(x);
        if blocks == 0 || rows % blocks != 0 || d != self.dim {
            return Err(Error::Shape {
                op: "transformer_encoder",
                lhs: vec![rows, d],
                rhs: vec![blocks, self.dim],
            });
        }
        let len = rows / blocks;
        let pe = positional_encoding(len, d);
        let mut tiled = Vec::with_capacity(rows * d);
        for _ in 0..blocks {
            tiled.extend_from_slice(pe.data());
        }
        let pe = t.constant(Tensor::from_vec(rows, d, tiled)?);
        // token scale √d keeps the encoding from swamping small embeddings
        let x = t.scale(x, (d as f64).sqrt());
        let mut h = t.add(x, pe)?;
        for b in &self.blocks {
            h = b.forward(t, p, h, blocks)?;
        }
        Ok(h)
    }
}

/// `PE[pos][2i] = sin(pos / 10000^(2i/d))`, `PE[pos][2i+1] = cos(...)`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for pos in 0..len {
        for j in 0..dim {
            let i2 = (j - j % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / dim as f64);
            pe.set(pos, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
