//! Pre-layer-norm self-attention stack with explicit reverse-mode gradients.
//!
//! Each block computes `x + Attn(LN(x))` followed by `x + FFN(LN(x))`, and
//! the stack ends with a final layer norm. Attention is bidirectional unless
//! `causal` is set.

use rand::Rng;

use crate::tensor::{add_matmul_tn, gemm_strided, matmul, matmul_nt, softmax_rows, Mat};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Walks named parameter tensors in a fixed order.
pub trait ParamSet: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, m| m.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, m| out.extend_from_slice(&m.data));
        out
    }

    fn add_assign(&mut self, other: &Self) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(&mut |_, m| {
            let n = m.len();
            m.data
                .iter_mut()
                .zip(&flat[off..off + n])
                .for_each(|(a, b)| *a += b);
            off += n;
        });
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, m| m.scale(s));
    }

    fn sum_sq(&self) -> f64 {
        let mut acc = 0.0;
        self.visit(&mut |_, m| acc += m.sum_sq());
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

macro_rules! visit_fields {
    ($self:ident, $prefix:expr, $f:ident, $($field:ident),+) => {
        $( $f(format!("{}{}", $prefix, stringify!($field)), &$self.$field); )+
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:expr, $f:ident, $($field:ident),+) => {
        $( $f(format!("{}{}", $prefix, stringify!($field)), &mut $self.$field); )+
    };
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            ln1_gain: Mat::full(1, d, 1.0),
            ln1_bias: Mat::zeros(1, d),
            wq: Mat::glorot(d, d, rng),
            bq: Mat::zeros(1, d),
            wk: Mat::glorot(d, d, rng),
            bk: Mat::zeros(1, d),
            wv: Mat::glorot(d, d, rng),
            bv: Mat::zeros(1, d),
            wo: Mat::glorot(d, d, rng),
            bo: Mat::zeros(1, d),
            ln2_gain: Mat::full(1, d, 1.0),
            ln2_bias: Mat::zeros(1, d),
            w1: Mat::glorot(d, d_ff, rng),
            b1: Mat::zeros(1, d_ff),
            w2: Mat::glorot(d_ff, d, rng),
            b2: Mat::zeros(1, d),
        }
    }

    fn visit_prefixed<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        visit_fields!(
            self, prefix, f, ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain,
            ln2_bias, w1, b1, w2, b2
        );
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        visit_fields_mut!(
            self, prefix, f, ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain,
            ln2_bias, w1, b1, w2, b2
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackParams {
    pub layers: Vec<LayerParams>,
    pub final_gain: Mat,
    pub final_bias: Mat,
}

impl StackParams {
    pub fn init<R: Rng + ?Sized>(depth: usize, d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..depth).map(|_| LayerParams::init(d, d_ff, rng)).collect(),
            final_gain: Mat::full(1, d, 1.0),
            final_bias: Mat::zeros(1, d),
        }
    }

    pub(crate) fn visit_prefixed<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_prefixed(&format!("{prefix}layer{i}."), f);
        }
        f(format!("{prefix}final_gain"), &self.final_gain);
        f(format!("{prefix}final_bias"), &self.final_bias);
    }

    pub(crate) fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_prefixed_mut(&format!("{prefix}layer{i}."), f);
        }
        f(format!("{prefix}final_gain"), &mut self.final_gain);
        f(format!("{prefix}final_bias"), &mut self.final_bias);
    }
}

/// Inverted-dropout masks: each entry is 0 or `1 / (1 - p)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn apply_mask(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        m.data.iter_mut().zip(mask).for_each(|(v, k)| *v *= k);
    }
}

pub(crate) struct Dropout<'r, R: Rng + ?Sized> {
    pub p: f64,
    pub rng: &'r mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    pub(crate) fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        (self.p > 0.0).then(|| dropout_mask(len, self.p, self.rng))
    }
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, NormCache) {
    let d = x.cols;
    let mut xhat = Mat::zeros(x.rows, d);
    let mut out = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * is;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * gain.data[c] + bias.data[c];
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns dx and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Mat,
    cache: &NormCache,
    gain: &Mat,
    dgain: &mut Mat,
    dbias: &mut Mat,
) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let g = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dgain.data[c] += g[c] * xh[c];
            dbias.data[c] += g[c];
            dxhat[c] = g[c] * gain.data[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x, w);
    y.add_row(b);
    y
}

/// Accumulates weight and bias gradients of `y = x w + b`; returns dx.
fn linear_backward(dy: &Mat, x: &Mat, w: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    add_matmul_tn(dw, x, dy);
    dy.col_sums_into(db);
    matmul_nt(dy, w)
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Mat,
    norm1: NormCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    drop1: Option<Vec<f64>>,
    norm2: NormCache,
    b: Mat,
    pre: Mat,
    act: Mat,
    drop2: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    layers: Vec<LayerCache>,
    final_norm: NormCache,
}

fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Mat, Vec<Mat>) {
    let (len, d) = (q.rows, q.cols);
    let dh = d / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let mut ctx = Mat::zeros(len, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut s = Mat::zeros(len, len);
        gemm_strided(
            len, dh, len, alpha, &q.data[off..], d, 1, &k.data[off..], 1, d, 0.0, &mut s.data,
            len, 1,
        );
        if causal {
            for i in 0..len {
                for j in i + 1..len {
                    s.data[i * len + j] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut s);
        gemm_strided(
            len, len, dh, 1.0, &s.data, len, 1, &v.data[off..], d, 1, 0.0, &mut ctx.data[off..],
            d, 1,
        );
        probs.push(s);
    }
    (ctx, probs)
}

fn attention_backward(
    dctx: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &[Mat],
) -> (Mat, Mat, Mat) {
    let (len, d) = (q.rows, q.cols);
    let heads = probs.len();
    let dh = d / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(len, d);
    let mut dk = Mat::zeros(len, d);
    let mut dv = Mat::zeros(len, d);
    let mut dp = Mat::zeros(len, len);
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        // dP = dctx_h V_h^T
        gemm_strided(
            len, dh, len, 1.0, &dctx.data[off..], d, 1, &v.data[off..], 1, d, 0.0, &mut dp.data,
            len, 1,
        );
        // dV_h = P^T dctx_h
        gemm_strided(
            len, len, dh, 1.0, &p.data, 1, len, &dctx.data[off..], d, 1, 0.0,
            &mut dv.data[off..], d, 1,
        );
        // Softmax backward, then the score scale.
        for i in 0..len {
            let pr = p.row(i);
            let dr = &mut dp.data[i * len..(i + 1) * len];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..len {
                dr[j] = alpha * pr[j] * (dr[j] - dot);
            }
        }
        gemm_strided(
            len, len, dh, 1.0, &dp.data, len, 1, &k.data[off..], d, 1, 0.0, &mut dq.data[off..],
            d, 1,
        );
        gemm_strided(
            len, len, dh, 1.0, &dp.data, 1, len, &q.data[off..], d, 1, 0.0, &mut dk.data[off..],
            d, 1,
        );
    }
    (dq, dk, dv)
}

fn layer_forward<R: Rng + ?Sized>(
    p: &LayerParams,
    x: &Mat,
    heads: usize,
    causal: bool,
    dropout: &mut Option<Dropout<'_, R>>,
) -> (Mat, LayerCache) {
    let (a, norm1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let q = linear(&a, &p.wq, &p.bq);
    let k = linear(&a, &p.wk, &p.bk);
    let v = linear(&a, &p.wv, &p.bv);
    let (ctx, probs) = attention(&q, &k, &v, heads, causal);
    let mut attn = linear(&ctx, &p.wo, &p.bo);
    let drop1 = dropout.as_mut().and_then(|d| d.mask(attn.len()));
    apply_mask(&mut attn, &drop1);
    let mut x1 = x.clone();
    x1.add_assign(&attn);

    let (b, norm2) = layer_norm(&x1, &p.ln2_gain, &p.ln2_bias);
    let pre = linear(&b, &p.w1, &p.b1);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = gelu(*v));
    let mut ff = linear(&act, &p.w2, &p.b2);
    let drop2 = dropout.as_mut().and_then(|d| d.mask(ff.len()));
    apply_mask(&mut ff, &drop2);
    let mut out = x1;
    out.add_assign(&ff);
    let cache = LayerCache {
        input: x.clone(),
        norm1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        drop1,
        norm2,
        b,
        pre,
        act,
        drop2,
    };
    (out, cache)
}

fn layer_backward(p: &LayerParams, c: &LayerCache, dout: &Mat, g: &mut LayerParams) -> Mat {
    let mut dx1 = dout.clone();
    let mut dff = dout.clone();
    apply_mask(&mut dff, &c.drop2);
    let mut dact = linear_backward(&dff, &c.act, &p.w2, &mut g.w2, &mut g.b2);
    dact.data
        .iter_mut()
        .zip(&c.pre.data)
        .for_each(|(d, &x)| *d *= gelu_grad(x));
    let db = linear_backward(&dact, &c.b, &p.w1, &mut g.w1, &mut g.b1);
    dx1.add_assign(&layer_norm_backward(
        &db,
        &c.norm2,
        &p.ln2_gain,
        &mut g.ln2_gain,
        &mut g.ln2_bias,
    ));

    let mut dx = dx1.clone();
    let mut dattn = dx1;
    apply_mask(&mut dattn, &c.drop1);
    let dctx = linear_backward(&dattn, &c.ctx, &p.wo, &mut g.wo, &mut g.bo);
    let (dq, dk, dv) = attention_backward(&dctx, &c.q, &c.k, &c.v, &c.probs);
    let mut da = linear_backward(&dq, &c.a, &p.wq, &mut g.wq, &mut g.bq);
    da.add_assign(&linear_backward(&dk, &c.a, &p.wk, &mut g.wk, &mut g.bk));
    da.add_assign(&linear_backward(&dv, &c.a, &p.wv, &mut g.wv, &mut g.bv));
    dx.add_assign(&layer_norm_backward(
        &da,
        &c.norm1,
        &p.ln1_gain,
        &mut g.ln1_gain,
        &mut g.ln1_bias,
    ));
    debug_assert_eq!(dx.shape(), c.input.shape());
    dx
}

pub(crate) fn stack_forward<R: Rng + ?Sized>(
    p: &StackParams,
    x: Mat,
    heads: usize,
    causal: bool,
    mut dropout: Option<Dropout<'_, R>>,
) -> (Mat, StackCache) {
    let mut h = x;
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let (next, cache) = layer_forward(l, &h, heads, causal, &mut dropout);
        layers.push(cache);
        h = next;
    }
    let (out, final_norm) = layer_norm(&h, &p.final_gain, &p.final_bias);
    (
        out,
        StackCache { layers, final_norm },
    )
}

/// Accumulates stack gradients into `g`; returns the gradient of the input.
pub(crate) fn stack_backward(p: &StackParams, c: &StackCache, dout: &Mat, g: &mut StackParams) -> Mat {
    let mut dh = layer_norm_backward(
        dout,
        &c.final_norm,
        &p.final_gain,
        &mut g.final_gain,
        &mut g.final_bias,
    );
    for ((l, lc), lg) in p.layers.iter().zip(&c.layers).zip(g.layers.iter_mut()).rev() {
        dh = layer_backward(l, lc, &dh, lg);
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Mat::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 5.0]);
        let (y, _) = layer_norm(&x, &Mat::full(1, 4, 1.0), &Mat::zeros(1, 4));
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn causal_outputs_ignore_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = StackParams::init(2, 8, 16, &mut rng);
        let x = Mat::uniform(5, 8, 1.0, &mut rng);
        let mut y = x.clone();
        y.row_mut(4).iter_mut().enumerate().for_each(|(i, v)| *v += i as f64);
        let none: Option<Dropout<'_, ChaCha8Rng>> = None;
        let (a, _) = stack_forward(&p, x, 2, true, none);
        let none: Option<Dropout<'_, ChaCha8Rng>> = None;
        let (b, _) = stack_forward(&p, y, 2, true, none);
        for r in 0..4 {
            for (u, v) in a.row(r).iter().zip(b.row(r)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(a.row(4).iter().zip(b.row(4)).any(|(u, v)| (u - v).abs() > 1e-6));
    }
}
