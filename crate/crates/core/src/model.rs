//! Decoder-only causal transformer with hand-written reverse-mode gradients.
//!
//! GPT-2 family at desk scale: learned token and position embeddings,
//! pre-norm residual blocks (multi-head causal attention, GELU FFN), a final
//! layer norm, and an output projection tied to the token embedding. The
//! backward pass is written explicitly; its correctness is pinned by a
//! central finite-difference oracle in the test suite.
//!
//! Conventions: a batch is padded to its longest sequence with PAD as
//! trailing alignment only. The public [`ModelParams::forward`] returns, per
//! position `t`, the log-probabilities of the token at `t` given tokens
//! `< t`; position 0 has no prefix and reports the uniform distribution.

pub mod checkpoint;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqbuild::EncodedSequence;
use crate::tokenizer::VOCAB_SIZE;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// ~1M-parameter training preset.
    pub fn tiny() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            max_positions: 512,
        }
    }

    /// Small preset for verification (gradient checks, oracles).
    pub fn mini() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 256,
            max_positions: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ffn == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be {VOCAB_SIZE} for the byte tokenizer"
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidConfig("max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1: LayerNormParams<F>,
    /// Fused query/key/value projection, `[d_model, 3*d_model]`.
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
    pub ln2: LayerNormParams<F>,
    pub w_ffn1: Array2<F>,
    pub b_ffn1: Array1<F>,
    pub w_ffn2: Array2<F>,
    pub b_ffn2: Array1<F>,
}

/// All weights of the model. The output projection is the transpose of
/// `tok_emb` (tied embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub ln_f: LayerNormParams<F>,
}

/// Gradient container; same structure as the parameters.
pub type Gradients<F> = ModelParams<F>;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::from_f64(normal(rng) * std))
}

impl<F: Scalar> LayerNormParams<F> {
    fn identity(d: usize) -> Self {
        Self {
            gain: Array1::from_elem(d, F::one()),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Gaussian init, std 0.02, residual projections scaled by
    /// 1/sqrt(2*n_layers), zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = gaussian(&mut rng, config.vocab_size, d, INIT_STD);
        let pos_emb = gaussian(&mut rng, config.max_positions, d, INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1: LayerNormParams::identity(d),
                w_qkv: gaussian(&mut rng, d, 3 * d, INIT_STD),
                b_qkv: Array1::zeros(3 * d),
                w_out: gaussian(&mut rng, d, d, residual_std),
                b_out: Array1::zeros(d),
                ln2: LayerNormParams::identity(d),
                w_ffn1: gaussian(&mut rng, d, config.d_ffn, INIT_STD),
                b_ffn1: Array1::zeros(config.d_ffn),
                w_ffn2: gaussian(&mut rng, config.d_ffn, d, residual_std),
                b_ffn2: Array1::zeros(d),
            })
            .collect();
        let ln_f = LayerNormParams::identity(d);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
        })
    }

    /// Same shapes, all zeros. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let d = self.config.d_model;
        Self {
            config: self.config.clone(),
            tok_emb: Array2::zeros(self.tok_emb.dim()),
            pos_emb: Array2::zeros(self.pos_emb.dim()),
            layers: self
                .layers
                .iter()
                .map(|_| LayerParams {
                    ln1: LayerNormParams::zeros(d),
                    w_qkv: Array2::zeros((d, 3 * d)),
                    b_qkv: Array1::zeros(3 * d),
                    w_out: Array2::zeros((d, d)),
                    b_out: Array1::zeros(d),
                    ln2: LayerNormParams::zeros(d),
                    w_ffn1: Array2::zeros((d, self.config.d_ffn)),
                    b_ffn1: Array1::zeros(self.config.d_ffn),
                    w_ffn2: Array2::zeros((self.config.d_ffn, d)),
                    b_ffn2: Array1::zeros(d),
                })
                .collect(),
            ln_f: LayerNormParams::zeros(d),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, s)| s.len()).sum()
    }

    /// All tensors in a fixed order, flattened. The order defines the
    /// checkpoint layout and the coordinate numbering of gradient checks.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        fn push2<'a, F: Scalar>(
            out: &mut Vec<(String, Vec<usize>, &'a [F])>,
            name: String,
            a: &'a Array2<F>,
        ) {
            let (r, c) = a.dim();
            out.push((name, vec![r, c], a.as_slice().unwrap()));
        }
        fn push1<'a, F: Scalar>(
            out: &mut Vec<(String, Vec<usize>, &'a [F])>,
            name: String,
            a: &'a Array1<F>,
        ) {
            out.push((name, vec![a.len()], a.as_slice().unwrap()));
        }
        let mut out: Vec<(String, Vec<usize>, &[F])> = Vec::new();
        push2(&mut out, "tok_emb".into(), &self.tok_emb);
        push2(&mut out, "pos_emb".into(), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            push1(&mut out, format!("layer{i}.ln1.gain"), &l.ln1.gain);
            push1(&mut out, format!("layer{i}.ln1.bias"), &l.ln1.bias);
            push2(&mut out, format!("layer{i}.w_qkv"), &l.w_qkv);
            push1(&mut out, format!("layer{i}.b_qkv"), &l.b_qkv);
            push2(&mut out, format!("layer{i}.w_out"), &l.w_out);
            push1(&mut out, format!("layer{i}.b_out"), &l.b_out);
            push1(&mut out, format!("layer{i}.ln2.gain"), &l.ln2.gain);
            push1(&mut out, format!("layer{i}.ln2.bias"), &l.ln2.bias);
            push2(&mut out, format!("layer{i}.w_ffn1"), &l.w_ffn1);
            push1(&mut out, format!("layer{i}.b_ffn1"), &l.b_ffn1);
            push2(&mut out, format!("layer{i}.w_ffn2"), &l.w_ffn2);
            push1(&mut out, format!("layer{i}.b_ffn2"), &l.b_ffn2);
        }
        push1(&mut out, "ln_f.gain".into(), &self.ln_f.gain);
        push1(&mut out, "ln_f.bias".into(), &self.ln_f.bias);
        out
    }

    /// Flat read views in the same fixed order as [`named_tensors`].
    pub fn param_slices(&self) -> Vec<&[F]> {
        self.named_tensors().into_iter().map(|(_, _, s)| s).collect()
    }

    /// Mutable flat views in the same fixed order as [`named_tensors`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.tok_emb.as_slice_mut().unwrap());
        out.push(self.pos_emb.as_slice_mut().unwrap());
        for l in &mut self.layers {
            out.push(l.ln1.gain.as_slice_mut().unwrap());
            out.push(l.ln1.bias.as_slice_mut().unwrap());
            out.push(l.w_qkv.as_slice_mut().unwrap());
            out.push(l.b_qkv.as_slice_mut().unwrap());
            out.push(l.w_out.as_slice_mut().unwrap());
            out.push(l.b_out.as_slice_mut().unwrap());
            out.push(l.ln2.gain.as_slice_mut().unwrap());
            out.push(l.ln2.bias.as_slice_mut().unwrap());
            out.push(l.w_ffn1.as_slice_mut().unwrap());
            out.push(l.b_ffn1.as_slice_mut().unwrap());
            out.push(l.w_ffn2.as_slice_mut().unwrap());
            out.push(l.b_ffn2.as_slice_mut().unwrap());
        }
        out.push(self.ln_f.gain.as_slice_mut().unwrap());
        out.push(self.ln_f.bias.as_slice_mut().unwrap());
        out
    }
}

/// PAD-aligned batch plus the masked prediction sites.
struct PaddedBatch {
    /// Token ids, `batch * time`, PAD-filled.
    ids: Vec<usize>,
    batch: usize,
    time: usize,
    seq_lens: Vec<usize>,
    /// `(flat_row, target_id, seq_index)` for every masked position `t >= 1`;
    /// `flat_row` indexes the hidden state at `t - 1`.
    targets: Vec<(usize, usize, usize)>,
    /// Masked positions at `t == 0` per sequence (scored as uniform).
    mask0: Vec<usize>,
}

impl PaddedBatch {
    fn new(seqs: &[EncodedSequence], max_positions: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        let time = seqs.iter().map(EncodedSequence::len).max().unwrap();
        if time == 0 {
            return Err(Error::Model("empty sequence in batch".into()));
        }
        if time > max_positions {
            return Err(Error::Model(format!(
                "sequence of length {time} exceeds max_positions {max_positions}"
            )));
        }
        let batch = seqs.len();
        let mut ids = vec![crate::tokenizer::PAD as usize; batch * time];
        let mut targets = Vec::new();
        let mut mask0 = vec![0usize; batch];
        for (b, seq) in seqs.iter().enumerate() {
            debug_assert_eq!(seq.tokens.len(), seq.loss_mask.len());
            for (t, &tok) in seq.tokens.iter().enumerate() {
                if tok >= 256 {
                    return Err(Error::Model(
                        "PAD may only appear as trailing alignment".into(),
                    ));
                }
                ids[b * time + t] = tok as usize;
            }
            for (t, &m) in seq.loss_mask.iter().enumerate() {
                if m {
                    if t == 0 {
                        mask0[b] += 1;
                    } else {
                        targets.push((b * time + t - 1, seq.tokens[t] as usize, b));
                    }
                }
            }
        }
        Ok(Self {
            ids,
            batch,
            time,
            seq_lens: seqs.iter().map(EncodedSequence::len).collect(),
            targets,
            mask0,
        })
    }
}

fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut c);
    c
}

fn matmul_acc<F: Scalar>(c: &mut Array2<F>, a: ArrayView2<F>, b: ArrayView2<F>) {
    general_mat_mul(F::one(), &a, &b, F::one(), c);
}

fn add_bias<F: Scalar>(x: &mut Array2<F>, b: &Array1<F>) {
    for mut row in x.rows_mut() {
        row += b;
    }
}

fn bias_grad<F: Scalar>(dy: &Array2<F>, db: &mut Array1<F>) {
    for row in dy.rows() {
        *db += &row;
    }
}

fn layer_norm_fwd<F: Scalar>(
    x: &Array2<F>,
    ln: &LayerNormParams<F>,
) -> (Array2<F>, Array2<F>, Vec<F>) {
    let d = x.ncols();
    let inv_d = F::from_f64(1.0 / d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut y = Array2::zeros(x.dim());
    let mut xhat = Array2::zeros(x.dim());
    let mut rstd = vec![F::zero(); x.nrows()];
    let gain = ln.gain.as_slice().unwrap();
    let bias = ln.bias.as_slice().unwrap();
    for (r, row) in x.rows().into_iter().enumerate() {
        let row = row.to_slice().unwrap();
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r_std = (var + eps).sqrt().recip();
        rstd[r] = r_std;
        let mut xhat_row = xhat.row_mut(r);
        let xhat_row = xhat_row.as_slice_mut().unwrap();
        let mut y_row = y.row_mut(r);
        let y_row = y_row.as_slice_mut().unwrap();
        for i in 0..d {
            let h = (row[i] - mean) * r_std;
            xhat_row[i] = h;
            y_row[i] = gain[i] * h + bias[i];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_bwd<F: Scalar>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    rstd: &[F],
    ln: &LayerNormParams<F>,
    dln: &mut LayerNormParams<F>,
) -> Array2<F> {
    let d = dy.ncols();
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut dx = Array2::zeros(dy.dim());
    let gain = ln.gain.as_slice().unwrap();
    let dgain = dln.gain.as_slice_mut().unwrap();
    let dbias = dln.bias.as_slice_mut().unwrap();
    for r in 0..dy.nrows() {
        let dy_row = dy.row(r);
        let dy_row = dy_row.to_slice().unwrap();
        let xhat_row = xhat.row(r);
        let xhat_row = xhat_row.to_slice().unwrap();
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..d {
            let dxh = dy_row[i] * gain[i];
            sum_dxhat = sum_dxhat + dxh;
            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat_row[i];
            dgain[i] = dgain[i] + dy_row[i] * xhat_row[i];
            dbias[i] = dbias[i] + dy_row[i];
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        let mut dx_row = dx.row_mut(r);
        let dx_row = dx_row.as_slice_mut().unwrap();
        for i in 0..d {
            let dxh = dy_row[i] * gain[i];
            dx_row[i] = rstd[r] * (dxh - mean_dxhat - xhat_row[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

struct LayerCache<F> {
    ln1_xhat: Array2<F>,
    ln1_rstd: Vec<F>,
    qkv: Array2<F>,
    /// Attention probabilities, `[batch*heads][time*time]`, causal rows.
    probs: Vec<Vec<F>>,
    ctx: Array2<F>,
    ln2_xhat: Array2<F>,
    ln2_rstd: Vec<F>,
    ffn_pre: Array2<F>,
}

struct BodyOutput<F> {
    /// Final hidden states after `ln_f`, `[batch*time, d_model]`.
    h_final: Array2<F>,
    ln_f_xhat: Array2<F>,
    ln_f_rstd: Vec<F>,
    caches: Option<Vec<LayerCache<F>>>,
}

/// Gather per-head `[time, head_dim]` views of q, k or v from the fused
/// projection. `section`: 0 = q, 1 = k, 2 = v.
fn gather_head<F: Scalar>(
    qkv: &Array2<F>,
    b: usize,
    h: usize,
    section: usize,
    time: usize,
    d_model: usize,
    head_dim: usize,
) -> Array2<F> {
    let col = section * d_model + h * head_dim;
    qkv.slice(s![b * time..(b + 1) * time, col..col + head_dim])
        .to_owned()
}

impl<F: Scalar> ModelParams<F> {
    fn run_body(&self, batch: &PaddedBatch, want_cache: bool) -> BodyOutput<F> {
        let cfg = &self.config;
        let (d, n_heads, head_dim) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let (bsz, time) = (batch.batch, batch.time);
        let n = bsz * time;
        let inv_sqrt = F::from_f64(1.0 / (head_dim as f64).sqrt());

        let mut x = Array2::zeros((n, d));
        for (r, &id) in batch.ids.iter().enumerate() {
            let t = r % time;
            let mut row = x.row_mut(r);
            row.assign(&self.tok_emb.row(id));
            row += &self.pos_emb.row(t);
        }

        let mut caches = want_cache.then(|| Vec::with_capacity(cfg.n_layers));
        for layer in &self.layers {
            // Attention branch.
            let (a, ln1_xhat, ln1_rstd) = layer_norm_fwd(&x, &layer.ln1);
            let mut qkv = matmul(a.view(), layer.w_qkv.view());
            add_bias(&mut qkv, &layer.b_qkv);

            let heads: Vec<(Array2<F>, Vec<F>)> = (0..bsz * n_heads)
                .into_par_iter()
                .map(|bh| {
                    let (b, h) = (bh / n_heads, bh % n_heads);
                    let q = gather_head(&qkv, b, h, 0, time, d, head_dim);
                    let k = gather_head(&qkv, b, h, 1, time, d, head_dim);
                    let v = gather_head(&qkv, b, h, 2, time, d, head_dim);
                    let mut scores = matmul(q.view(), k.t());
                    scores *= inv_sqrt;
                    // Causal softmax row by row over keys <= query position.
                    let mut probs = vec![F::zero(); time * time];
                    for i in 0..time {
                        let row = scores.row(i);
                        let row = row.to_slice().unwrap();
                        let mut max = row[0];
                        for &v in &row[..=i] {
                            if v > max {
                                max = v;
                            }
                        }
                        let mut sum = F::zero();
                        let out = &mut probs[i * time..i * time + i + 1];
                        for (j, slot) in out.iter_mut().enumerate() {
                            let e = (row[j] - max).exp();
                            *slot = e;
                            sum = sum + e;
                        }
                        let inv = sum.recip();
                        for slot in out.iter_mut() {
                            *slot = *slot * inv;
                        }
                    }
                    let probs_view =
                        ArrayView2::from_shape((time, time), probs.as_slice()).unwrap();
                    let ctx = matmul(probs_view, v.view());
                    (ctx, probs)
                })
                .collect();

            let mut ctx_full = Array2::zeros((n, d));
            let mut probs_cache = Vec::with_capacity(bsz * n_heads);
            for (bh, (ctx, probs)) in heads.into_iter().enumerate() {
                let (b, h) = (bh / n_heads, bh % n_heads);
                ctx_full
                    .slice_mut(s![b * time..(b + 1) * time, h * head_dim..(h + 1) * head_dim])
                    .assign(&ctx);
                probs_cache.push(probs);
            }

            let mut attn_out = matmul(ctx_full.view(), layer.w_out.view());
            add_bias(&mut attn_out, &layer.b_out);
            x += &attn_out;

            // FFN branch.
            let (f, ln2_xhat, ln2_rstd) = layer_norm_fwd(&x, &layer.ln2);
            let mut pre = matmul(f.view(), layer.w_ffn1.view());
            add_bias(&mut pre, &layer.b_ffn1);
            let act = pre.mapv(gelu_scalar);
            let mut ffn_out = matmul(act.view(), layer.w_ffn2.view());
            add_bias(&mut ffn_out, &layer.b_ffn2);
            x += &ffn_out;

            if let Some(caches) = caches.as_mut() {
                caches.push(LayerCache {
                    ln1_xhat,
                    ln1_rstd,
                    qkv,
                    probs: probs_cache,
                    ctx: ctx_full,
                    ln2_xhat,
                    ln2_rstd,
                    ffn_pre: pre,
                });
            }
        }

        let (h_final, ln_f_xhat, ln_f_rstd) = layer_norm_fwd(&x, &self.ln_f);
        BodyOutput {
            h_final,
            ln_f_xhat,
            ln_f_rstd,
            caches,
        }
    }

    /// Log-probabilities per position, one `[len, vocab]` matrix per
    /// sequence. Row `t` conditions only on tokens before `t`; row 0 is the
    /// uniform distribution (no prefix, no BOS token).
    pub fn forward(&self, seqs: &[EncodedSequence]) -> Result<Vec<Array2<F>>> {
        let batch = PaddedBatch::new(seqs, self.config.max_positions)?;
        let body = self.run_body(&batch, false);
        let logits = matmul(body.h_final.view(), self.tok_emb.t());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward activations"));
        }
        let v = self.config.vocab_size;
        let uniform = F::from_f64(-(v as f64).ln());
        let mut out = Vec::with_capacity(seqs.len());
        for (b, &len) in batch.seq_lens.iter().enumerate() {
            let mut lp = Array2::from_elem((len, v), uniform);
            for t in 1..len {
                let row = logits.row(b * batch.time + t - 1);
                let row = row.to_slice().unwrap();
                let lse = log_sum_exp(row);
                let mut dst = lp.row_mut(t);
                let dst = dst.as_slice_mut().unwrap();
                for (j, &l) in row.iter().enumerate() {
                    dst[j] = l - lse;
                }
            }
            out.push(lp);
        }
        Ok(out)
    }

    /// Sum of masked-token log-probabilities for each sequence: the raw
    /// candidate score (no length normalization).
    pub fn score_batch(&self, seqs: &[EncodedSequence]) -> Result<Vec<F>> {
        for seq in seqs {
            if seq.masked_len() == 0 {
                return Err(Error::Model(
                    "sequence has no masked positions to score".into(),
                ));
            }
        }
        let batch = PaddedBatch::new(seqs, self.config.max_positions)?;
        let body = self.run_body(&batch, false);

        // Only rows that predict a masked token need logits.
        let m = batch.targets.len();
        let d = self.config.d_model;
        let mut h_rows = Array2::zeros((m, d));
        for (i, &(row, _, _)) in batch.targets.iter().enumerate() {
            h_rows.row_mut(i).assign(&body.h_final.row(row));
        }
        let logits = matmul(h_rows.view(), self.tok_emb.t());
        let uniform = F::from_f64(-(self.config.vocab_size as f64).ln());
        let mut scores: Vec<F> = batch
            .mask0
            .iter()
            .map(|&n0| uniform * F::from_f64(n0 as f64))
            .collect();
        for (i, &(_, tgt, seq_idx)) in batch.targets.iter().enumerate() {
            let row = logits.row(i);
            let row = row.to_slice().unwrap();
            let lp = row[tgt] - log_sum_exp(row);
            scores[seq_idx] = scores[seq_idx] + lp;
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate score"));
        }
        Ok(scores)
    }

    /// Score of a single sequence; see [`score_batch`].
    pub fn sequence_logprob(&self, seq: &EncodedSequence) -> Result<F> {
        Ok(self.score_batch(std::slice::from_ref(seq))?[0])
    }

    /// Mean masked negative log-likelihood and its exact gradients.
    pub fn loss_and_grads(&self, seqs: &[EncodedSequence]) -> Result<(F, Gradients<F>)> {
        for seq in seqs {
            if seq.masked_len() == 0 {
                return Err(Error::Model(
                    "sequence has an empty loss mask".into(),
                ));
            }
        }
        let batch = PaddedBatch::new(seqs, self.config.max_positions)?;
        let body = self.run_body(&batch, true);
        let caches = body.caches.as_ref().unwrap();
        let cfg = &self.config;
        let (d, n_heads, head_dim) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let (bsz, time) = (batch.batch, batch.time);
        let n = bsz * time;
        let inv_sqrt = F::from_f64(1.0 / (head_dim as f64).sqrt());

        let n_mask0: usize = batch.mask0.iter().sum();
        let m_total = batch.targets.len() + n_mask0;
        let inv_m = F::from_f64(1.0 / m_total as f64);

        // Compact logits at prediction rows only.
        let m = batch.targets.len();
        let mut h_rows = Array2::zeros((m, d));
        for (i, &(row, _, _)) in batch.targets.iter().enumerate() {
            h_rows.row_mut(i).assign(&body.h_final.row(row));
        }
        let logits = matmul(h_rows.view(), self.tok_emb.t());

        let mut loss = F::from_f64(n_mask0 as f64 * (cfg.vocab_size as f64).ln());
        let mut dlogits = Array2::zeros(logits.dim());
        for (i, &(_, tgt, _)) in batch.targets.iter().enumerate() {
            let row = logits.row(i);
            let row = row.to_slice().unwrap();
            let lse = log_sum_exp(row);
            loss = loss + lse - row[tgt];
            let mut drow = dlogits.row_mut(i);
            let drow = drow.as_slice_mut().unwrap();
            for (j, &l) in row.iter().enumerate() {
                drow[j] = (l - lse).exp() * inv_m;
            }
            drow[tgt] = drow[tgt] - inv_m;
        }
        loss = loss * inv_m;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }

        let mut grads = self.zeros_like();

        // Tied output projection: dE += dlogits^T @ h_rows, dh_rows = dlogits @ E.
        matmul_acc(&mut grads.tok_emb, dlogits.t(), h_rows.view());
        let dh_rows = matmul(dlogits.view(), self.tok_emb.view());
        let mut dx = Array2::zeros((n, d));
        for (i, &(row, _, _)) in batch.targets.iter().enumerate() {
            let mut dst = dx.row_mut(row);
            dst += &dh_rows.row(i);
        }

        // Final layer norm.
        let mut dx = layer_norm_bwd(
            &dx,
            &body.ln_f_xhat,
            &body.ln_f_rstd,
            &self.ln_f,
            &mut grads.ln_f,
        );

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let cache = &caches[li];
            let glayer = &mut grads.layers[li];

            // FFN branch backward; dx flows both through and around it.
            let act = cache.ffn_pre.mapv(gelu_scalar);
            let mut dact = matmul(dx.view(), layer.w_ffn2.t());
            matmul_acc(&mut glayer.w_ffn2, act.t(), dx.view());
            bias_grad(&dx, &mut glayer.b_ffn2);
            ndarray::Zip::from(&mut dact)
                .and(&cache.ffn_pre)
                .for_each(|da, &pre| *da = *da * gelu_grad_scalar(pre));
            let f = recompute_ln_out(&cache.ln2_xhat, &layer.ln2);
            let df = matmul(dact.view(), layer.w_ffn1.t());
            matmul_acc(&mut glayer.w_ffn1, f.t(), dact.view());
            bias_grad(&dact, &mut glayer.b_ffn1);
            dx += &layer_norm_bwd(&df, &cache.ln2_xhat, &cache.ln2_rstd, &layer.ln2, &mut glayer.ln2);

            // Attention branch backward.
            let dctx = matmul(dx.view(), layer.w_out.t());
            matmul_acc(&mut glayer.w_out, cache.ctx.t(), dx.view());
            bias_grad(&dx, &mut glayer.b_out);

            let head_grads: Vec<(Array2<F>, Array2<F>, Array2<F>)> = (0..bsz * n_heads)
                .into_par_iter()
                .map(|bh| {
                    let (b, h) = (bh / n_heads, bh % n_heads);
                    let q = gather_head(&cache.qkv, b, h, 0, time, d, head_dim);
                    let k = gather_head(&cache.qkv, b, h, 1, time, d, head_dim);
                    let v = gather_head(&cache.qkv, b, h, 2, time, d, head_dim);
                    let probs =
                        ArrayView2::from_shape((time, time), cache.probs[bh].as_slice()).unwrap();
                    let dctx_bh = dctx
                        .slice(s![b * time..(b + 1) * time, h * head_dim..(h + 1) * head_dim])
                        .to_owned();
                    let dv = matmul(probs.t(), dctx_bh.view());
                    let dp = matmul(dctx_bh.view(), v.t());
                    // Softmax backward restricted to the causal triangle.
                    let mut dscores = Array2::zeros((time, time));
                    for i in 0..time {
                        let p_row = probs.row(i);
                        let p_row = p_row.to_slice().unwrap();
                        let dp_row = dp.row(i);
                        let dp_row = dp_row.to_slice().unwrap();
                        let mut dot = F::zero();
                        for j in 0..=i {
                            dot = dot + p_row[j] * dp_row[j];
                        }
                        let mut ds_row = dscores.row_mut(i);
                        let ds_row = ds_row.as_slice_mut().unwrap();
                        for j in 0..=i {
                            ds_row[j] = p_row[j] * (dp_row[j] - dot) * inv_sqrt;
                        }
                    }
                    let dq = matmul(dscores.view(), k.view());
                    let dk = matmul(dscores.t(), q.view());
                    (dq, dk, dv)
                })
                .collect();

            let mut dqkv = Array2::zeros((n, 3 * d));
            for (bh, (dq, dk, dv)) in head_grads.into_iter().enumerate() {
                let (b, h) = (bh / n_heads, bh % n_heads);
                let rows = b * time..(b + 1) * time;
                let col = h * head_dim;
                dqkv.slice_mut(s![rows.clone(), col..col + head_dim]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + col..d + col + head_dim])
                    .assign(&dk);
                dqkv.slice_mut(s![rows, 2 * d + col..2 * d + col + head_dim])
                    .assign(&dv);
            }

            let a = recompute_ln_out(&cache.ln1_xhat, &layer.ln1);
            let da = matmul(dqkv.view(), layer.w_qkv.t());
            matmul_acc(&mut glayer.w_qkv, a.t(), dqkv.view());
            bias_grad(&dqkv, &mut glayer.b_qkv);
            dx += &layer_norm_bwd(&da, &cache.ln1_xhat, &cache.ln1_rstd, &layer.ln1, &mut glayer.ln1);
        }

        // Embedding backward, fixed row order.
        for (r, &id) in batch.ids.iter().enumerate() {
            let t = r % time;
            let drow = dx.row(r);
            let mut tok = grads.tok_emb.row_mut(id);
            tok += &drow;
            let mut pos = grads.pos_emb.row_mut(t);
            pos += &drow;
        }

        Ok((loss, grads))
    }
}

fn recompute_ln_out<F: Scalar>(xhat: &Array2<F>, ln: &LayerNormParams<F>) -> Array2<F> {
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        row *= &ln.gain;
        row += &ln.bias;
    }
    out
}

fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}
