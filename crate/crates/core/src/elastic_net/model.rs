//! Forward and backward passes.
//!
//! Activations are laid out `[batch * seq, features]` so every projection is
//! one matrix product. Attention runs per (sequence, head) with causal
//! masking. All reductions use a fixed order, so results are bitwise
//! reproducible for fixed inputs.

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

use super::{SupernetWeights, NORM_EPS};
use crate::archspace::ArchPhenotype;
use crate::error::{NasError, Result};

/// Scalar type the network computes in (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + NumAssign + FromPrimitive + LinalgScalar + ScalarOperand + Sum + Debug + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + NumAssign + FromPrimitive + LinalgScalar + ScalarOperand + Sum + Debug + Send + Sync + 'static
{
}

fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).unwrap()
}

/// Output of a forward pass.
pub struct ForwardOutput<F> {
    /// `[batch, seq, vocab]`
    pub logits: Array3<F>,
}

struct NormCache<F> {
    /// input rows
    x: Array2<F>,
    /// per-row inverse RMS
    inv_rms: Array1<F>,
    /// normalized and scaled output
    y: Array2<F>,
}

struct LayerCache<F> {
    attn: NormCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// attention probabilities, `[batch * heads, seq, seq]`
    probs: Vec<F>,
    attn_out: Array2<F>,
    mlp: NormCache<F>,
    gate: Array2<F>,
    up: Array2<F>,
    act: Array2<F>,
}

struct Cache<F> {
    batch: usize,
    seq: usize,
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
}

fn rms_norm<F: Real>(x: Array2<F>, gain: &Array1<F>) -> NormCache<F> {
    let d = x.ncols();
    let inv_d = cst::<F>(1.0 / d as f64);
    let eps = cst::<F>(NORM_EPS);
    let inv_rms = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) * inv_d;
        F::one() / (ms + eps).sqrt()
    });
    let mut y = x.clone();
    for (mut row, &r) in y.rows_mut().into_iter().zip(inv_rms.iter()) {
        row.zip_mut_with(gain, |v, &g| *v = *v * r * g);
    }
    NormCache { x, inv_rms, y }
}

/// Accumulates the gain gradient and returns the input gradient.
fn rms_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gain: &Array1<F>,
    dy: &Array2<F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let d = cache.x.ncols();
    let inv_d = cst::<F>(1.0 / d as f64);
    let mut dx = Array2::zeros(cache.x.raw_dim());
    for ((x, dy), (mut dx, &r)) in cache
        .x
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut().into_iter().zip(cache.inv_rms.iter()))
    {
        let mut dot = F::zero();
        for j in 0..d {
            let dxn = dy[j] * gain[j];
            dgain[j] += dy[j] * x[j] * r;
            dot += dxn * x[j];
        }
        let coef = r * r * r * inv_d * dot;
        for j in 0..d {
            dx[j] = r * dy[j] * gain[j] - coef * x[j];
        }
    }
    dx
}

/// `c += a @ b`
fn matmul_acc<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>, mut c: ArrayViewMut2<F>) {
    general_mat_mul(F::one(), &a, &b, F::one(), &mut c);
}

fn check_tokens<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
    tokens: ArrayView2<u32>,
) -> Result<()> {
    weights.check_phenotype(phenotype)?;
    let (batch, seq) = tokens.dim();
    if batch == 0 || seq == 0 {
        return Err(NasError::Shape("empty token batch".into()));
    }
    if seq > weights.dims.max_seq_len {
        return Err(NasError::Shape(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            weights.dims.max_seq_len
        )));
    }
    let vocab = weights.dims.vocab_size;
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(NasError::Shape(format!("token {t} outside vocabulary of {vocab}")));
    }
    Ok(())
}

fn causal_attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Vec<F>, Array2<F>) {
    let d = q.ncols();
    let hd = d / heads;
    let scale = cst::<F>(1.0 / (hd as f64).sqrt());
    let (qs, ks, vs) = (
        q.as_slice().unwrap(),
        k.as_slice().unwrap(),
        v.as_slice().unwrap(),
    );
    let mut probs = vec![F::zero(); batch * heads * seq * seq];
    let mut out = Array2::<F>::zeros((batch * seq, d));
    let os = out.as_slice_mut().unwrap();
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let qi = &qs[(b * seq + i) * d + h * hd..][..hd];
                let row = &mut p[i * seq..][..seq];
                let mut max = F::neg_infinity();
                for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &ks[(b * seq + j) * d + h * hd..][..hd];
                    let dot = qi.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y) * scale;
                    *slot = dot;
                    max = max.max(dot);
                }
                let mut sum = F::zero();
                for slot in row.iter_mut().take(i + 1) {
                    *slot = (*slot - max).exp();
                    sum += *slot;
                }
                let inv = F::one() / sum;
                let oi = &mut os[(b * seq + i) * d + h * hd..][..hd];
                for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                    *slot *= inv;
                    let vj = &vs[(b * seq + j) * d + h * hd..][..hd];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += *slot * x;
                    }
                }
            }
        }
    }
    (probs, out)
}

/// Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
fn causal_attention_backward<F: Real>(
    cache: &LayerCache<F>,
    d_out: &Array2<F>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = cache.q.ncols();
    let hd = d / heads;
    let scale = cst::<F>(1.0 / (hd as f64).sqrt());
    let (qs, ks, vs) = (
        cache.q.as_slice().unwrap(),
        cache.k.as_slice().unwrap(),
        cache.v.as_slice().unwrap(),
    );
    let dos = d_out.as_slice().unwrap();
    let mut dq = Array2::<F>::zeros((batch * seq, d));
    let mut dk = Array2::<F>::zeros((batch * seq, d));
    let mut dv = Array2::<F>::zeros((batch * seq, d));
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().unwrap(),
        dk.as_slice_mut().unwrap(),
        dv.as_slice_mut().unwrap(),
    );
    let mut dp = vec![F::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &cache.probs[(b * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let row = &p[i * seq..][..i + 1];
                let doi = &dos[(b * seq + i) * d + h * hd..][..hd];
                // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                let mut weighted = F::zero();
                for j in 0..=i {
                    let off = (b * seq + j) * d + h * hd;
                    let vj = &vs[off..][..hd];
                    dp[j] = doi.iter().zip(vj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                    weighted += dp[j] * row[j];
                    let dvj = &mut dvs[off..][..hd];
                    for (g, &x) in dvj.iter_mut().zip(doi) {
                        *g += row[j] * x;
                    }
                }
                // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik), scores were scaled
                let qoff = (b * seq + i) * d + h * hd;
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - weighted) * scale;
                    let koff = (b * seq + j) * d + h * hd;
                    for t in 0..hd {
                        dqs[qoff + t] += ds * ks[koff + t];
                        dks[koff + t] += ds * qs[qoff + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn run<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
    tokens: ArrayView2<u32>,
) -> Result<(Array2<F>, Cache<F>)> {
    check_tokens(weights, phenotype, tokens)?;
    let (batch, seq) = tokens.dim();
    let d = weights.dims.hidden_dim;
    let heads = weights.dims.num_heads;

    let mut h = Array2::<F>::zeros((batch * seq, d));
    for (r, mut row) in h.rows_mut().into_iter().enumerate() {
        let (b, t) = (r / seq, r % seq);
        let tok = tokens[[b, t]] as usize;
        row.assign(&weights.token_embedding.row(tok));
        row += &weights.position_embedding.row(t);
    }

    let mut layers = Vec::with_capacity(phenotype.layer_count());
    for (lw, &s) in weights.layers.iter().zip(&phenotype.active_inter_sizes) {
        let attn = rms_norm(h.clone(), &lw.attn_norm);
        let q = attn.y.dot(&lw.wq);
        let k = attn.y.dot(&lw.wk);
        let v = attn.y.dot(&lw.wv);
        let (probs, attn_out) = causal_attention(&q, &k, &v, batch, seq, heads);
        matmul_acc(attn_out.view(), lw.wo.view(), h.view_mut());

        let mlp = rms_norm(h.clone(), &lw.mlp_norm);
        let gate = mlp.y.dot(&lw.w_gate.slice(s![.., ..s]));
        let up = mlp.y.dot(&lw.w_up.slice(s![.., ..s]));
        let mut act = gate.clone();
        act.zip_mut_with(&up, |g, &u| *g = *g * sigmoid(*g) * u);
        matmul_acc(act.view(), lw.w_down.slice(s![..s, ..]), h.view_mut());

        layers.push(LayerCache {
            attn,
            q,
            k,
            v,
            probs,
            attn_out,
            mlp,
            gate,
            up,
            act,
        });
    }

    let final_norm = rms_norm(h, &weights.final_norm);
    let logits = final_norm.y.dot(&weights.head);
    Ok((
        logits,
        Cache {
            batch,
            seq,
            layers,
            final_norm,
        },
    ))
}

/// Logits `[batch, seq, vocab]` of the sub-network `phenotype`.
pub fn forward<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
    tokens: ArrayView2<u32>,
) -> Result<ForwardOutput<F>> {
    let (batch, seq) = tokens.dim();
    let (logits, _) = run(weights, phenotype, tokens)?;
    let vocab = logits.ncols();
    Ok(ForwardOutput {
        logits: logits
            .into_shape_with_order((batch, seq, vocab))
            .expect("contiguous logits"),
    })
}

/// Mean next-token cross-entropy and `d loss / d logits`.
fn cross_entropy<F: Real>(
    logits: &Array2<F>,
    tokens: ArrayView2<u32>,
    want_grad: bool,
) -> (f64, Option<Array2<F>>) {
    let (batch, seq) = tokens.dim();
    let count = batch * (seq - 1);
    let inv_count = cst::<F>(1.0 / count as f64);
    let mut total = 0.0f64;
    let mut grad = want_grad.then(|| Array2::<F>::zeros(logits.raw_dim()));
    for b in 0..batch {
        for t in 0..seq - 1 {
            let r = b * seq + t;
            let row = logits.row(r);
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let sum = row.iter().fold(F::zero(), |a, &x| a + (x - max).exp());
            let target = tokens[[b, t + 1]] as usize;
            let lse = max + sum.ln();
            total += (lse - row[target]).to_f64().unwrap();
            if let Some(g) = grad.as_mut() {
                let mut grow = g.row_mut(r);
                for (gv, &x) in grow.iter_mut().zip(row.iter()) {
                    *gv = (x - lse).exp() * inv_count;
                }
                grow[target] -= inv_count;
            }
        }
    }
    (total / count as f64, grad)
}

fn check_loss(loss: f64, phenotype: &ArchPhenotype) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NasError::NonFinite(format!(
            "loss {loss} for phenotype {:?}",
            phenotype.active_inter_sizes
        )))
    }
}

/// Mean next-token cross-entropy over every position that has a successor.
pub fn loss<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
    tokens: ArrayView2<u32>,
) -> Result<f64> {
    if tokens.ncols() < 2 {
        return Err(NasError::Shape("loss needs at least 2 tokens per row".into()));
    }
    let (logits, _) = run(weights, phenotype, tokens)?;
    let (loss, _) = cross_entropy(&logits, tokens, false);
    check_loss(loss, phenotype)?;
    Ok(loss)
}

/// Loss plus gradients for every weight. Gradients outside the phenotype's
/// slice are zero.
pub fn loss_and_grad<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
    tokens: ArrayView2<u32>,
) -> Result<(f64, SupernetWeights<F>)> {
    if tokens.ncols() < 2 {
        return Err(NasError::Shape("loss needs at least 2 tokens per row".into()));
    }
    let (logits, cache) = run(weights, phenotype, tokens)?;
    let (loss, dlogits) = cross_entropy(&logits, tokens, true);
    check_loss(loss, phenotype)?;
    let dlogits = dlogits.unwrap();
    let mut g = weights.zeros_like();
    let (batch, seq) = (cache.batch, cache.seq);
    let heads = weights.dims.num_heads;

    matmul_acc(cache.final_norm.y.t(), dlogits.view(), g.head.view_mut());
    let dy = dlogits.dot(&weights.head.t());
    let mut dh = rms_norm_backward(&cache.final_norm, &weights.final_norm, &dy, &mut g.final_norm);

    for (i, lc) in cache.layers.iter().enumerate().rev() {
        let s = phenotype.active_inter_sizes[i];
        let lw = &weights.layers[i];
        let lg = &mut g.layers[i];

        // MLP branch
        matmul_acc(lc.act.t(), dh.view(), lg.w_down.slice_mut(s![..s, ..]));
        let dact = dh.dot(&lw.w_down.slice(s![..s, ..]).t());
        let mut dgate = Array2::<F>::zeros(lc.gate.raw_dim());
        let mut dup = Array2::<F>::zeros(lc.up.raw_dim());
        ndarray::Zip::from(&mut dgate)
            .and(&mut dup)
            .and(&dact)
            .and(&lc.gate)
            .and(&lc.up)
            .for_each(|dg, du, &da, &gv, &uv| {
                let sg = sigmoid(gv);
                let silu = gv * sg;
                *du = da * silu;
                *dg = da * uv * sg * (F::one() + gv * (F::one() - sg));
            });
        matmul_acc(lc.mlp.y.t(), dgate.view(), lg.w_gate.slice_mut(s![.., ..s]));
        matmul_acc(lc.mlp.y.t(), dup.view(), lg.w_up.slice_mut(s![.., ..s]));
        let mut dy = dgate.dot(&lw.w_gate.slice(s![.., ..s]).t());
        matmul_acc(dup.view(), lw.w_up.slice(s![.., ..s]).t(), dy.view_mut());
        dh += &rms_norm_backward(&lc.mlp, &lw.mlp_norm, &dy, &mut lg.mlp_norm);

        // attention branch
        matmul_acc(lc.attn_out.t(), dh.view(), lg.wo.view_mut());
        let d_attn = dh.dot(&lw.wo.t());
        let (dq, dk, dv) = causal_attention_backward(lc, &d_attn, batch, seq, heads);
        let a = &lc.attn.y;
        matmul_acc(a.t(), dq.view(), lg.wq.view_mut());
        matmul_acc(a.t(), dk.view(), lg.wk.view_mut());
        matmul_acc(a.t(), dv.view(), lg.wv.view_mut());
        let mut dy = dq.dot(&lw.wq.t());
        matmul_acc(dk.view(), lw.wk.t(), dy.view_mut());
        matmul_acc(dv.view(), lw.wv.t(), dy.view_mut());
        dh += &rms_norm_backward(&lc.attn, &lw.attn_norm, &dy, &mut lg.attn_norm);
    }

    let tokens_flat = tokens.iter().copied();
    for (r, (tok, row)) in tokens_flat.zip(dh.rows()).enumerate() {
        let t = r % seq;
        let mut te = g.token_embedding.row_mut(tok as usize);
        te += &row;
        let mut pe = g.position_embedding.row_mut(t);
        pe += &row;
    }
    Ok((loss, g))
}
