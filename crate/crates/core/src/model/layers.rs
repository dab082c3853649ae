//! Building blocks with explicit forward caches and backward passes.
//!
//! Activations are batched as `(batch · n_tokens) × width` matrices; only
//! attention needs to know where one sample's rows end and the next begin.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{accumulate_tn, gemm, matmul, matmul_nt, Mat, View, ViewMut};

const LN_EPS: f64 = 1e-5;

/// Whether dropout is active, and where its randomness comes from.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    /// Inverted-dropout mask, or `None` when dropout is inactive.
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<Mat> {
        match self {
            Mode::Train { rng, dropout } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let scale = 1.0 / keep;
                let data = (0..rows * cols)
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                Some(Mat::from_vec(rows, cols, data))
            }
            _ => None,
        }
    }
}

pub(crate) fn apply_mask(x: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (v, s) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *v *= s;
        }
    }
}

/// `y = x · w + b` with `w` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Mat::zeros(input, output),
            b: Mat::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = matmul(x, &self.w);
        y.add_row_broadcast(self.b.as_slice());
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, g: &mut Linear) -> Mat {
        self.backward_params(x, dy, g);
        matmul_nt(dy, &self.w)
    }

    pub fn backward_params(&self, x: &Mat, dy: &Mat, g: &mut Linear) {
        accumulate_tn(&mut g.w, x, dy);
        dy.accumulate_col_sums(g.b.as_mut_slice());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn zeros(width: usize) -> Self {
        LayerNorm {
            gamma: Mat::zeros(1, width),
            beta: Mat::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let (rows, cols) = x.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut y = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let gamma = self.gamma.as_slice();
        let beta = self.beta.as_slice();
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * is;
            }
            let yr = y.row_mut(r);
            let xh = xhat.row(r);
            for c in 0..cols {
                yr[c] = gamma[c] * xh[c] + beta[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, g: &mut LayerNorm) -> Mat {
        let (rows, cols) = dy.shape();
        let gamma = self.gamma.as_slice();
        let mut dx = Mat::zeros(rows, cols);
        let mut dxhat = vec![0.0; cols];
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            {
                let gg = g.gamma.as_mut_slice();
                for c in 0..cols {
                    gg[c] += dyr[c] * xh[c];
                }
            }
            {
                let gb = g.beta.as_mut_slice();
                for c in 0..cols {
                    gb[c] += dyr[c];
                }
            }
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for c in 0..cols {
                dxhat[c] = dyr[c] * gamma[c];
                mean_d += dxhat[c];
                mean_dx += dxhat[c] * xh[c];
            }
            mean_d /= cols as f64;
            mean_dx /= cols as f64;
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..cols {
                out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        dx
    }
}

/// Unmasked multi-head attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row block `(b · heads + h) · nq` holds sample b, head h.
    probs: Mat,
    concat: Mat,
    batch: usize,
    nq: usize,
    nkv: usize,
}

impl Attention {
    pub fn zeros(width: usize) -> Self {
        Attention {
            q: Linear::zeros(width, width),
            k: Linear::zeros(width, width),
            v: Linear::zeros(width, width),
            o: Linear::zeros(width, width),
        }
    }

    /// `xq` holds `batch · nq` rows, `xkv` holds `batch · nkv` rows.
    pub fn forward(&self, xq: &Mat, xkv: &Mat, batch: usize, heads: usize) -> (Mat, AttnCache) {
        let width = xq.cols();
        let dh = width / heads;
        let nq = xq.rows() / batch;
        let nkv = xkv.rows() / batch;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let mut probs = Mat::zeros(batch * heads * nq, nkv);
        let mut concat = Mat::zeros(batch * nq, width);
        for b in 0..batch {
            for h in 0..heads {
                let prow = (b * heads + h) * nq;
                gemm(
                    scale,
                    View::block(&q, b * nq, h * dh, nq, dh),
                    View::block(&k, b * nkv, h * dh, nkv, dh).t(),
                    0.0,
                    ViewMut::block(&mut probs, prow, 0, nq, nkv),
                );
                for r in prow..prow + nq {
                    softmax_in_place(probs.row_mut(r));
                }
                gemm(
                    1.0,
                    View::block(&probs, prow, 0, nq, nkv),
                    View::block(&v, b * nkv, h * dh, nkv, dh),
                    0.0,
                    ViewMut::block(&mut concat, b * nq, h * dh, nq, dh),
                );
            }
        }
        let out = self.o.forward(&concat);
        (
            out,
            AttnCache {
                q,
                k,
                v,
                probs,
                concat,
                batch,
                nq,
                nkv,
            },
        )
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(
        &self,
        cache: &AttnCache,
        xq: &Mat,
        xkv: &Mat,
        dout: &Mat,
        heads: usize,
        g: &mut Attention,
    ) -> (Mat, Mat) {
        let width = xq.cols();
        let dh = width / heads;
        let (batch, nq, nkv) = (cache.batch, cache.nq, cache.nkv);
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(&cache.concat, dout, &mut g.o);
        let mut dq = Mat::zeros(batch * nq, width);
        let mut dk = Mat::zeros(batch * nkv, width);
        let mut dv = Mat::zeros(batch * nkv, width);
        let mut dp = Mat::zeros(nq, nkv);
        for b in 0..batch {
            for h in 0..heads {
                let prow = (b * heads + h) * nq;
                let p = View::block(&cache.probs, prow, 0, nq, nkv);
                let d_o = View::block(&dconcat, b * nq, h * dh, nq, dh);
                gemm(
                    1.0,
                    d_o,
                    View::block(&cache.v, b * nkv, h * dh, nkv, dh).t(),
                    0.0,
                    ViewMut::of(&mut dp),
                );
                gemm(
                    1.0,
                    p.t(),
                    d_o,
                    0.0,
                    ViewMut::block(&mut dv, b * nkv, h * dh, nkv, dh),
                );
                // softmax backward, folded with the score scale
                for r in 0..nq {
                    let pr = cache.probs.row(prow + r);
                    let dr = dp.row_mut(r);
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                gemm(
                    1.0,
                    View::of(&dp),
                    View::block(&cache.k, b * nkv, h * dh, nkv, dh),
                    0.0,
                    ViewMut::block(&mut dq, b * nq, h * dh, nq, dh),
                );
                gemm(
                    1.0,
                    View::of(&dp).t(),
                    View::block(&cache.q, b * nq, h * dh, nq, dh),
                    0.0,
                    ViewMut::block(&mut dk, b * nkv, h * dh, nkv, dh),
                );
            }
        }
        let dxq = self.q.backward(xq, &dq, &mut g.q);
        let mut dxkv = self.k.backward(xkv, &dk, &mut g.k);
        dxkv.add_assign(&self.v.backward(xkv, &dv, &mut g.v));
        (dxq, dxkv)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Two-layer ReLU MLP with dropout on the hidden activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FfCache {
    pre: Mat,
    hidden: Mat,
    mask: Option<Mat>,
}

impl FeedForward {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        FeedForward {
            up: Linear::zeros(width, hidden),
            down: Linear::zeros(hidden, width),
        }
    }

    pub fn forward(&self, x: &Mat, mode: &mut Mode<'_>) -> (Mat, FfCache) {
        let pre = self.up.forward(x);
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let mask = mode.mask(hidden.rows(), hidden.cols());
        apply_mask(&mut hidden, &mask);
        let out = self.down.forward(&hidden);
        (out, FfCache { pre, hidden, mask })
    }

    pub fn backward(&self, cache: &FfCache, x: &Mat, dy: &Mat, g: &mut FeedForward) -> Mat {
        let mut dh = self.down.backward(&cache.hidden, dy, &mut g.down);
        apply_mask(&mut dh, &cache.mask);
        for (d, &p) in dh.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        self.up.backward(x, &dh, &mut g.up)
    }
}
