//! Differentiable primitive operations.
//!
//! Forward code computes plain buffers; each op registers a backward
//! closure that reads the output gradient and accumulates into parents
//! that require gradients. Kernels are row-deterministic, so threading
//! never changes results.

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{Elem, Inner, Tensor};
use crate::error::{Error, Result};

fn parents<E: Elem>(inner: &Inner<E>) -> &[Tensor<E>] {
    &inner.node.as_ref().unwrap().parents
}

impl<E: Elem> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inner| {
                let g = inner.out_grad();
                for p in parents(inner) {
                    if p.requires_grad() {
                        p.accumulate_grad(&g);
                    }
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    ps[0].accumulate_grad(&g);
                }
                if ps[1].requires_grad() {
                    let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                    ps[1].accumulate_grad(&neg);
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let d: Vec<E> = g.iter().zip(ps[1].data().iter()).map(|(&x, &y)| x * y).collect();
                    ps[0].accumulate_grad(&d);
                }
                if ps[1].requires_grad() {
                    let d: Vec<E> = g.iter().zip(ps[0].data().iter()).map(|(&x, &y)| x * y).collect();
                    ps[1].accumulate_grad(&d);
                }
            }),
        )
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&a| a * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let d: Vec<E> = g.iter().map(|&v| v * c).collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Multiplies every element by a learnable scalar (a one-element
    /// tensor). Gradient flows to both operands.
    pub fn scale_by(&self, s: &Tensor<E>) -> Tensor<E> {
        assert_eq!(s.numel(), 1, "scale_by: scalar tensor required");
        let sv = s.item();
        let data: Vec<E> = self.data().iter().map(|&a| a * sv).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let d: Vec<E> = g.iter().map(|&v| v * sv).collect();
                    ps[0].accumulate_grad(&d);
                }
                if ps[1].requires_grad() {
                    let mut acc = E::ZERO;
                    for (&gi, &xi) in g.iter().zip(ps[0].data().iter()) {
                        acc += gi * xi;
                    }
                    ps[1].accumulate_grad(&[acc]);
                }
            }),
        )
    }

    /// ca*a + cb*b, elementwise. The logit-interpolation primitive: at
    /// ca=1, cb=0 the result equals `a` exactly for finite inputs.
    pub fn add_scaled(&self, other: &Tensor<E>, ca: E, cb: E) -> Tensor<E> {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        let data: Vec<E> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| ca * a + cb * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let d: Vec<E> = g.iter().map(|&v| v * ca).collect();
                    ps[0].accumulate_grad(&d);
                }
                if ps[1].requires_grad() {
                    let d: Vec<E> = g.iter().map(|&v| v * cb).collect();
                    ps[1].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Adds a bias vector to every row of a 2-d tensor.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Tensor<E> {
        let n = self.cols();
        assert_eq!(bias.numel(), n, "add_bias: bias length mismatch");
        let data: Vec<E> = {
            let b = bias.data();
            self.data()
                .chunks_exact(n)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &bb)| x + bb).collect::<Vec<_>>())
                .collect()
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    ps[0].accumulate_grad(&g);
                }
                if ps[1].requires_grad() {
                    let mut d = vec![E::ZERO; n];
                    for row in g.chunks_exact(n) {
                        for (di, &gi) in d.iter_mut().zip(row) {
                            *di += gi;
                        }
                    }
                    ps[1].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Standard matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(
            k, k2,
            "matmul: dimension error, [{m}x{k}] x [{k2}x{n}] inner dims disagree"
        );
        let mut data = vec![E::ZERO; m * n];
        mm_nn(&self.data(), &other.data(), &mut data, m, k, n);
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    // dA = dC * B^T
                    let mut da = vec![E::ZERO; m * k];
                    mm_nt(&g, &ps[1].data(), &mut da, m, n, k);
                    ps[0].accumulate_grad(&da);
                }
                if ps[1].requires_grad() {
                    // dB = A^T * dC
                    let mut db = vec![E::ZERO; k * n];
                    mm_tn(&ps[0].data(), &g, &mut db, k, m, n);
                    ps[1].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Product with a transposed right operand: [m,k] x [n,k]^T -> [m,n].
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        assert_eq!(
            k, k2,
            "matmul_nt: dimension error, [{m}x{k}] x [{n}x{k2}]^T inner dims disagree"
        );
        let mut data = vec![E::ZERO; m * n];
        mm_nt(&self.data(), &other.data(), &mut data, m, k, n);
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    // dA = dC * B
                    let mut da = vec![E::ZERO; m * k];
                    mm_nn(&g, &ps[1].data(), &mut da, m, n, k);
                    ps[0].accumulate_grad(&da);
                }
                if ps[1].requires_grad() {
                    // dB = dC^T * A
                    let mut db = vec![E::ZERO; n * k];
                    mm_tn(&g, &ps[0].data(), &mut db, n, m, k);
                    ps[1].accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| x.sigmoid()).collect();
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let d: Vec<E> = g
                        .iter()
                        .zip(&saved)
                        .map(|(&gi, &y)| gi * y * (E::ONE - y))
                        .collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// x * sigmoid(x), the gated-feed-forward activation.
    pub fn silu(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| x * x.sigmoid()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let d: Vec<E> = g
                        .iter()
                        .zip(ps[0].data().iter())
                        .map(|(&gi, &x)| {
                            let s = x.sigmoid();
                            gi * s * (E::ONE + x * (E::ONE - s))
                        })
                        .collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// ln(1 + e^x), overflow-safe.
    pub fn softplus(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|&x| x.maximum(E::ZERO) + (-x.abs()).exp().ln_1p())
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let d: Vec<E> = g
                        .iter()
                        .zip(ps[0].data().iter())
                        .map(|(&gi, &x)| gi * x.sigmoid())
                        .collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Root-mean-square normalization over the trailing dimension.
    pub fn rms_norm(&self, gain: &Tensor<E>, eps: E) -> Tensor<E> {
        let d = self.cols();
        assert_eq!(gain.numel(), d, "rms_norm: gain length mismatch");
        let rows = self.rows();
        let mut data = vec![E::ZERO; rows * d];
        let mut inv_rms = vec![E::ZERO; rows];
        {
            let x = self.data();
            let gv = gain.data();
            let dn = E::from_f64(d as f64);
            for i in 0..rows {
                let row = &x[i * d..(i + 1) * d];
                let mut ms = E::ZERO;
                for &v in row {
                    ms += v * v;
                }
                let r = E::ONE / (ms / dn + eps).sqrt();
                inv_rms[i] = r;
                for (j, &v) in row.iter().enumerate() {
                    data[i * d + j] = v * r * gv[j];
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                let x = ps[0].data();
                let gv = ps[1].data();
                let dn = E::from_f64(d as f64);
                if ps[0].requires_grad() {
                    let mut dx = vec![E::ZERO; rows * d];
                    for i in 0..rows {
                        let row = &x[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let r = inv_rms[i];
                        // s = sum_j g_j * gain_j * x_j
                        let mut s = E::ZERO;
                        for j in 0..d {
                            s += grow[j] * gv[j] * row[j];
                        }
                        let coef = r * r * r * s / dn;
                        for j in 0..d {
                            dx[i * d + j] = r * grow[j] * gv[j] - coef * row[j];
                        }
                    }
                    ps[0].accumulate_grad(&dx);
                }
                if ps[1].requires_grad() {
                    let mut dg = vec![E::ZERO; d];
                    for i in 0..rows {
                        let row = &x[i * d..(i + 1) * d];
                        let grow = &g[i * d..(i + 1) * d];
                        let r = inv_rms[i];
                        for j in 0..d {
                            dg[j] += grow[j] * row[j] * r;
                        }
                    }
                    ps[1].accumulate_grad(&dg);
                }
            }),
        )
    }

    /// Layer normalization with learnable gain and bias, over the trailing
    /// dimension.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: E) -> Tensor<E> {
        let d = self.cols();
        assert_eq!(gain.numel(), d, "layer_norm: gain length mismatch");
        assert_eq!(bias.numel(), d, "layer_norm: bias length mismatch");
        let rows = self.rows();
        let mut data = vec![E::ZERO; rows * d];
        let mut xhat = vec![E::ZERO; rows * d];
        let mut inv_std = vec![E::ZERO; rows];
        {
            let x = self.data();
            let gv = gain.data();
            let bv = bias.data();
            let dn = E::from_f64(d as f64);
            for i in 0..rows {
                let row = &x[i * d..(i + 1) * d];
                let mut mean = E::ZERO;
                for &v in row {
                    mean += v;
                }
                mean = mean / dn;
                let mut var = E::ZERO;
                for &v in row {
                    var += (v - mean) * (v - mean);
                }
                var = var / dn;
                let s = E::ONE / (var + eps).sqrt();
                inv_std[i] = s;
                for (j, &v) in row.iter().enumerate() {
                    let xh = (v - mean) * s;
                    xhat[i * d + j] = xh;
                    data[i * d + j] = xh * gv[j] + bv[j];
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |inner| {
                let g = inner.out_grad();
                let ps = parents(inner);
                let gv = ps[1].data();
                let dn = E::from_f64(d as f64);
                if ps[0].requires_grad() {
                    let mut dx = vec![E::ZERO; rows * d];
                    for i in 0..rows {
                        let grow = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let s = inv_std[i];
                        let mut mean_gg = E::ZERO;
                        let mut mean_ggx = E::ZERO;
                        for j in 0..d {
                            let gg = grow[j] * gv[j];
                            mean_gg += gg;
                            mean_ggx += gg * xh[j];
                        }
                        mean_gg = mean_gg / dn;
                        mean_ggx = mean_ggx / dn;
                        for j in 0..d {
                            let gg = grow[j] * gv[j];
                            dx[i * d + j] = s * (gg - mean_gg - xh[j] * mean_ggx);
                        }
                    }
                    ps[0].accumulate_grad(&dx);
                }
                if ps[1].requires_grad() {
                    let mut dg = vec![E::ZERO; d];
                    for i in 0..rows {
                        let grow = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dg[j] += grow[j] * xh[j];
                        }
                    }
                    ps[1].accumulate_grad(&dg);
                }
                if ps[2].requires_grad() {
                    let mut db = vec![E::ZERO; d];
                    for row in g.chunks_exact(d) {
                        for (j, &gi) in row.iter().enumerate() {
                            db[j] += gi;
                        }
                    }
                    ps[2].accumulate_grad(&db);
                }
            }),
        )
    }

    /// Row-wise softmax with per-row max subtraction; rows sum to one for
    /// any finite input.
    pub fn softmax_rows(&self) -> Tensor<E> {
        let n = self.cols();
        let rows = self.rows();
        let mut data = vec![E::ZERO; rows * n];
        {
            let x = self.data();
            for i in 0..rows {
                softmax_into(&x[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
            }
        }
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let mut dx = vec![E::ZERO; rows * n];
                    for i in 0..rows {
                        softmax_backward_row(
                            &saved[i * n..(i + 1) * n],
                            &g[i * n..(i + 1) * n],
                            &mut dx[i * n..(i + 1) * n],
                        );
                    }
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Causal row-wise softmax over attention scores. Row `i` distributes
    /// mass over columns `0..=i+offset`; later columns are exactly zero.
    /// `offset` is the number of key positions preceding the first query.
    pub fn causal_softmax(&self, offset: usize) -> Tensor<E> {
        let n = self.cols();
        let rows = self.rows();
        let mut data = vec![E::ZERO; rows * n];
        {
            let x = self.data();
            for i in 0..rows {
                let allowed = (i + offset + 1).min(n);
                softmax_into(&x[i * n..i * n + allowed], &mut data[i * n..i * n + allowed]);
            }
        }
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let mut dx = vec![E::ZERO; rows * n];
                    for i in 0..rows {
                        let allowed = (i + offset + 1).min(n);
                        softmax_backward_row(
                            &saved[i * n..i * n + allowed],
                            &g[i * n..i * n + allowed],
                            &mut dx[i * n..i * n + allowed],
                        );
                    }
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Gathers embedding rows for a token sequence: [V,d] x ids -> [T,d].
    pub fn embedding(&self, ids: &[usize]) -> Tensor<E> {
        let (v, d) = (self.rows(), self.cols());
        for &t in ids {
            assert!(t < v, "embedding: token id {t} out of vocabulary {v}");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let table = self.data();
            for &t in ids {
                data.extend_from_slice(&table[t * d..(t + 1) * d]);
            }
        }
        let ids = ids.to_vec();
        Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let mut dt = vec![E::ZERO; v * d];
                    for (i, &t) in ids.iter().enumerate() {
                        let grow = &g[i * d..(i + 1) * d];
                        let drow = &mut dt[t * d..(t + 1) * d];
                        for (dj, &gj) in drow.iter_mut().zip(grow) {
                            *dj += gj;
                        }
                    }
                    ps[0].accumulate_grad(&dt);
                }
            }),
        )
    }

    /// Column slice of a 2-d tensor: keeps columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<E> {
        let n = self.cols();
        let rows = self.rows();
        assert!(start + len <= n, "slice_cols: out of range");
        let mut data = Vec::with_capacity(rows * len);
        {
            let x = self.data();
            for i in 0..rows {
                data.extend_from_slice(&x[i * n + start..i * n + start + len]);
            }
        }
        Tensor::from_op(
            vec![rows, len],
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let mut dx = vec![E::ZERO; rows * n];
                    for i in 0..rows {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Row slice of a 2-d tensor: keeps rows `start..start+len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<E> {
        let n = self.cols();
        let rows = self.rows();
        assert!(start + len <= rows, "slice_rows: out of range");
        let data = self.data()[start * n..(start + len) * n].to_vec();
        Tensor::from_op(
            vec![len, n],
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad();
                    let mut dx = vec![E::ZERO; rows * n];
                    dx[start * n..(start + len) * n].copy_from_slice(&g);
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Concatenates 2-d tensors along columns.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Tensor<E> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), rows, "concat_cols: row count mismatch");
                p.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![E::ZERO; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..rows {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Tensor::from_op(
            vec![rows, total],
            data,
            parts.to_vec(),
            Box::new(move |inner| {
                let g = inner.out_grad();
                let mut off = 0;
                for (p, &w) in parents(inner).iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![E::ZERO; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    off += w;
                }
            }),
        )
    }

    /// Rotary position embedding applied per head to a [T, n_heads*head_dim]
    /// tensor. Position of row `t` is `start_pos + t`. Pairs (2i, 2i+1)
    /// within each head are rotated; the gradient is the inverse rotation.
    pub fn rope(&self, n_heads: usize, head_dim: usize, start_pos: usize, base: f64) -> Tensor<E> {
        assert_eq!(self.cols(), n_heads * head_dim, "rope: width mismatch");
        assert_eq!(head_dim % 2, 0, "rope: head_dim must be even");
        let rows = self.rows();
        let width = self.cols();
        let angles = rope_angles::<E>(rows, head_dim, start_pos, base);
        let mut data = self.to_vec();
        apply_rope(&mut data, rows, n_heads, head_dim, &angles, false);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let mut dx = inner.out_grad();
                    apply_rope(&mut dx, rows, n_heads, head_dim, &angles, true);
                    let _ = width;
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut s = E::ZERO;
        for &v in self.data().iter() {
            s += v;
        }
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad()[0];
                    ps[0].accumulate_grad(&vec![g; n]);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel();
        self.sum_all().scale(E::from_f64(1.0 / n as f64))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax,
    /// restricted to unmasked positions.
    pub fn cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Tensor<E>> {
        let v = self.cols();
        let rows = self.rows();
        assert_eq!(targets.len(), rows, "cross_entropy: target length mismatch");
        if let Some(m) = mask {
            assert_eq!(m.len(), rows, "cross_entropy: mask length mismatch");
        }
        let active: Vec<usize> = (0..rows)
            .filter(|&i| mask.map_or(true, |m| m[i]))
            .collect();
        if active.is_empty() {
            return Err(Error::EmptyLoss);
        }
        for &i in &active {
            assert!(targets[i] < v, "cross_entropy: target {} out of vocab {v}", targets[i]);
        }
        let mut loss = E::ZERO;
        {
            let x = self.data();
            for &i in &active {
                let row = &x[i * v..(i + 1) * v];
                loss += log_sum_exp(row) - row[targets[i]];
            }
        }
        let count = E::from_f64(active.len() as f64);
        loss = loss / count;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad()[0] / count;
                    let x = ps[0].data();
                    let mut dx = vec![E::ZERO; rows * v];
                    let mut probs = vec![E::ZERO; v];
                    for &i in &active {
                        let row = &x[i * v..(i + 1) * v];
                        softmax_into(row, &mut probs);
                        let drow = &mut dx[i * v..(i + 1) * v];
                        for (dj, &pj) in drow.iter_mut().zip(&probs) {
                            *dj = g * pj;
                        }
                        drow[targets[i]] = drow[targets[i]] - g;
                    }
                    ps[0].accumulate_grad(&dx);
                }
            }),
        ))
    }

    /// Mean over rows of KL(softmax(teacher) || softmax(self)). The teacher
    /// is treated as a constant; gradient flows only to `self`.
    pub fn kl_from_teacher(&self, teacher: &Tensor<E>) -> Tensor<E> {
        assert_eq!(self.shape(), teacher.shape(), "kl: shape mismatch");
        let v = self.cols();
        let rows = self.rows();
        let mut p = vec![E::ZERO; rows * v];
        let mut q = vec![E::ZERO; rows * v];
        {
            let t = teacher.data();
            let s = self.data();
            for i in 0..rows {
                softmax_into(&t[i * v..(i + 1) * v], &mut p[i * v..(i + 1) * v]);
                softmax_into(&s[i * v..(i + 1) * v], &mut q[i * v..(i + 1) * v]);
            }
        }
        let mut kl = E::ZERO;
        {
            let s = self.data();
            let t = teacher.data();
            for i in 0..rows {
                let srow = &s[i * v..(i + 1) * v];
                let trow = &t[i * v..(i + 1) * v];
                let lse_s = log_sum_exp(srow);
                let lse_t = log_sum_exp(trow);
                for j in 0..v {
                    let pj = p[i * v + j];
                    if pj > E::ZERO {
                        let log_p = trow[j] - lse_t;
                        let log_q = srow[j] - lse_s;
                        kl += pj * (log_p - log_q);
                    }
                }
            }
        }
        let count = E::from_f64(rows as f64);
        kl = kl / count;
        Tensor::from_op(
            vec![1],
            vec![kl],
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad()[0] / count;
                    let d: Vec<E> = q.iter().zip(&p).map(|(&qi, &pi)| g * (qi - pi)).collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Sum over `range` rows of log softmax(logits)[target]; the
    /// teacher-forced sequence log-probability.
    pub fn sequence_log_prob(&self, targets: &[usize], range: std::ops::Range<usize>) -> Tensor<E> {
        let v = self.cols();
        let rows = self.rows();
        assert!(range.end <= rows && range.end <= targets.len(), "sequence_log_prob: range out of bounds");
        let mut lp = E::ZERO;
        {
            let x = self.data();
            for i in range.clone() {
                let row = &x[i * v..(i + 1) * v];
                lp += row[targets[i]] - log_sum_exp(row);
            }
        }
        let targets = targets.to_vec();
        Tensor::from_op(
            vec![1],
            vec![lp],
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad()[0];
                    let x = ps[0].data();
                    let mut dx = vec![E::ZERO; rows * v];
                    let mut probs = vec![E::ZERO; v];
                    for i in range.clone() {
                        let row = &x[i * v..(i + 1) * v];
                        softmax_into(row, &mut probs);
                        let drow = &mut dx[i * v..(i + 1) * v];
                        for (dj, &pj) in drow.iter_mut().zip(&probs) {
                            *dj = -g * pj;
                        }
                        drow[targets[i]] += g;
                    }
                    ps[0].accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Mean binary cross-entropy from logits: softplus(z) - z*y, which is
    /// stable for large |z|.
    pub fn bce_with_logits(&self, labels: &[E]) -> Tensor<E> {
        let n = self.numel();
        assert_eq!(labels.len(), n, "bce_with_logits: label length mismatch");
        let mut loss = E::ZERO;
        {
            let z = self.data();
            for (&zi, &yi) in z.iter().zip(labels) {
                loss += zi.maximum(E::ZERO) + (-zi.abs()).exp().ln_1p() - zi * yi;
            }
        }
        let count = E::from_f64(n as f64);
        loss = loss / count;
        let labels = labels.to_vec();
        Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |inner| {
                let ps = parents(inner);
                if ps[0].requires_grad() {
                    let g = inner.out_grad()[0] / count;
                    let d: Vec<E> = ps[0]
                        .data()
                        .iter()
                        .zip(&labels)
                        .map(|(&zi, &yi)| g * (zi.sigmoid() - yi))
                        .collect();
                    ps[0].accumulate_grad(&d);
                }
            }),
        )
    }
}

/// Stable softmax of a single row into an output slice.
pub fn softmax_into<E: Elem>(row: &[E], out: &mut [E]) {
    let mut m = row[0];
    for &v in row {
        m = m.maximum(v);
    }
    let mut sum = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = E::ONE / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp<E: Elem>(row: &[E]) -> E {
    let mut m = row[0];
    for &v in row {
        m = m.maximum(v);
    }
    let mut sum = E::ZERO;
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

fn softmax_backward_row<E: Elem>(p: &[E], g: &[E], dx: &mut [E]) {
    let mut inner = E::ZERO;
    for (&pi, &gi) in p.iter().zip(g) {
        inner += pi * gi;
    }
    for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(g) {
        *d = pi * (gi - inner);
    }
}

fn rope_angles<E: Elem>(rows: usize, head_dim: usize, start_pos: usize, base: f64) -> Vec<(E, E)> {
    let half = head_dim / 2;
    let mut angles = Vec::with_capacity(rows * half);
    for t in 0..rows {
        let pos = (start_pos + t) as f64;
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let a = pos * freq;
            angles.push((E::from_f64(a.cos()), E::from_f64(a.sin())));
        }
    }
    angles
}

fn apply_rope<E: Elem>(
    data: &mut [E],
    rows: usize,
    n_heads: usize,
    head_dim: usize,
    angles: &[(E, E)],
    inverse: bool,
) {
    let half = head_dim / 2;
    let width = n_heads * head_dim;
    for t in 0..rows {
        for h in 0..n_heads {
            let off = t * width + h * head_dim;
            for i in 0..half {
                let (c, s) = angles[t * half + i];
                let s = if inverse { -s } else { s };
                let a = data[off + 2 * i];
                let b = data[off + 2 * i + 1];
                data[off + 2 * i] = a * c - b * s;
                data[off + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn matmul_identity() {
        let i: Tensor<f64> = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b: Tensor<f64> = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let a: Tensor<f64> = Tensor::new(vec![1, 2], vec![1.0, 2.0]);
        let b: Tensor<f64> = Tensor::new(vec![2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).to_vec(), vec![11.0]);
    }

    #[test]
    #[should_panic(expected = "dimension error")]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a: Tensor<f32> = Tensor::zeros(vec![2, 3]);
        let b: Tensor<f32> = Tensor::zeros(vec![2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_symmetry_and_analytic_values() {
        let z: Tensor<f64> = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let p = z.softmax_rows().to_vec();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        // [2,0] -> e^2/(e^2+1)
        let z: Tensor<f64> = Tensor::new(vec![1, 2], vec![2.0, 0.0]);
        let p = z.softmax_rows().to_vec();
        assert!((p[0] - 0.8807971).abs() < 1e-5);
        assert!((p[1] - 0.1192029).abs() < 1e-5);
    }

    #[test]
    fn softmax_large_magnitude_no_overflow() {
        // [1000, 999]: after the shift this is sigma(1).
        let z: Tensor<f64> = Tensor::new(vec![1, 2], vec![1000.0, 999.0]);
        let p = z.softmax_rows().to_vec();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 0.7310586).abs() < 1e-5);
        assert!((p[1] - 0.2689414).abs() < 1e-5);
    }

    #[test]
    fn rms_norm_unit_and_scaled_rows() {
        let gain: Tensor<f64> = Tensor::new(vec![4], vec![1.0; 4]);
        let x: Tensor<f64> = Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 1.0]);
        let y = x.rms_norm(&gain, 0.0).to_vec();
        for v in y {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let gain2: Tensor<f64> = Tensor::new(vec![2], vec![1.0; 2]);
        let x: Tensor<f64> = Tensor::new(vec![1, 2], vec![2.0, 2.0]);
        let y = x.rms_norm(&gain2, 0.0).to_vec();
        for v in y {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_vocab() {
        let logits: Tensor<f64> = Tensor::zeros(vec![3, 4]);
        let loss = logits.cross_entropy(&[0, 1, 3], None).unwrap().item();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits() {
        let logits: Tensor<f64> = Tensor::new(vec![1, 4], vec![10.0, 0.0, 0.0, 0.0]);
        let loss = logits.cross_entropy(&[0], None).unwrap().item();
        // -ln softmax_0 = ln(1 + 3e^-10)
        let expect = (1.0f64 + 3.0 * (-10.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-9);
        assert!((loss - 1.36e-4).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let logits: Tensor<f64> = Tensor::zeros(vec![2, 4]);
        let err = logits.cross_entropy(&[0, 1], Some(&[false, false]));
        assert!(err.is_err());
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let t: Tensor<f64> = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.1, -0.2]);
        let s = t.detach();
        assert_eq!(s.kl_from_teacher(&t).item(), 0.0);
    }

    #[test]
    fn kl_scalar_oracle_two_way() {
        // teacher [2,0], student [0,0]: KL = sum p*(ln p - ln 0.5)
        let t: Tensor<f64> = Tensor::new(vec![1, 2], vec![2.0, 0.0]);
        let s: Tensor<f64> = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let p1 = 1.0 - p0;
        let expect = p0 * (p0 / 0.5).ln() + p1 * (p1 / 0.5).ln();
        let kl = s.kl_from_teacher(&t).item();
        assert!((kl - expect).abs() < 1e-12, "kl={kl} expect={expect}");
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let x: Tensor<f64> = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.rope(1, 4, 0, 10000.0);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_norm() {
        let x: Tensor<f64> = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0]);
        let y = x.rope(2, 2, 7, 10000.0);
        let xs: f64 = x.to_vec().iter().map(|v| v * v).sum();
        let ys: f64 = y.to_vec().iter().map(|v| v * v).sum();
        assert!((xs - ys).abs() < 1e-9);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let x: Tensor<f64> = Tensor::new(vec![3, 3], vec![1.0; 9]);
        let p = x.causal_softmax(0).to_vec();
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[5], 0.0);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p[3] - 0.5).abs() < 1e-12);
        let last: f64 = p[6..9].iter().sum();
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_with_logits_matches_manual() {
        let z: Tensor<f64> = Tensor::new(vec![2], vec![0.0, 3.0]);
        let loss = z.bce_with_logits(&[1.0, 0.0]).item();
        let manual = ((2.0f64).ln() + (1.0 + (3.0f64).exp()).ln()) / 2.0;
        assert!((loss - manual).abs() < 1e-12);
    }
}
