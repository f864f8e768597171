//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] is built fresh for each forward pass. Every op pushes a
//! node holding its output value and a closure that maps the output
//! gradient to gradients for each parent. [`Graph::backward`] walks the
//! tape in reverse and returns accumulated parameter gradients.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None, None)
    }

    /// Parameter leaf; gradients accumulate for the id during backward.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        self.push(value, vec![], None, Some(id))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise and linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let y = av.matmul(&bv)?;
        let (avc, bvc) = (av, bv);
        let back: BackwardFn = Box::new(move |g| {
            let bt = bvc.transpose2().expect("rank 2");
            let at = avc.transpose2().expect("rank 2");
            let da = g.matmul(&bt).expect("shapes fixed at forward");
            let db = at.matmul(g).expect("shapes fixed at forward");
            vec![da, db]
        });
        Ok(self.push(y, vec![a.0, b.0], Some(back), None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let back: BackwardFn = Box::new(move |g| vec![g.clone(), g.clone()]);
        Ok(self.push(y, vec![a.0, b.0], Some(back), None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let back: BackwardFn = Box::new(move |g| vec![g.clone(), g.scale(-1.0)]);
        Ok(self.push(y, vec![a.0, b.0], Some(back), None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let y = av.zip_map(&bv, |x, y| x * y)?;
        let back: BackwardFn = Box::new(move |g| {
            vec![
                g.zip_map(&bv, |g, b| g * b).expect("same shape"),
                g.zip_map(&av, |g, a| g * a).expect("same shape"),
            ]
        });
        Ok(self.push(y, vec![a.0, b.0], Some(back), None))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).scale(c);
        let back: BackwardFn = Box::new(move |g| vec![g.scale(c)]);
        self.push(y, vec![a.0], Some(back), None)
    }

    /// `x: [R, F] + b: [F]`, broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::ShapeMismatch(format!(
                "row broadcast of {bs:?} onto {xs:?}"
            )));
        }
        let (r, f) = (xs[0], xs[1]);
        let bv = self.value(b).clone();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..f {
                out[i * f + j] += bv.data()[j];
            }
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut db = vec![0.0; f];
            for i in 0..r {
                for j in 0..f {
                    db[j] += g.data()[i * f + j];
                }
            }
            vec![g.clone(), Tensor::from_op(vec![f], db)]
        });
        Ok(self.push(
            Tensor::from_op(vec![r, f], out),
            vec![x.0, b.0],
            Some(back),
            None,
        ))
    }

    /// `x: [n] + s: [1]` broadcast scalar.
    pub fn add_bcast_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::ShapeMismatch("broadcast addend must be [1]".into()));
        }
        let sv = self.value(s).data()[0];
        let y = self.value(x).map(|v| v + sv);
        let back: BackwardFn =
            Box::new(move |g| vec![g.clone(), Tensor::scalar(g.data().iter().sum())]);
        Ok(self.push(y, vec![x.0, s.0], Some(back), None))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let y = xv.map(|v| v.max(0.0));
        // subgradient at 0 is 0
        let back: BackwardFn = Box::new(move |g| {
            vec![g
                .zip_map(&xv, |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("same shape")]
        });
        self.push(y, vec![x.0], Some(back), None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(stable_sigmoid);
        let yv = y.clone();
        let back: BackwardFn = Box::new(move |g| {
            vec![g
                .zip_map(&yv, |g, y| g * y * (1.0 - y))
                .expect("same shape")]
        });
        self.push(y, vec![x.0], Some(back), None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let y = Tensor::scalar(self.value(x).sum());
        let back: BackwardFn = Box::new(move |g| vec![Tensor::full(&shape, g.data()[0])]);
        self.push(y, vec![x.0], Some(back), None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let y = self.value(x).reshape(shape)?;
        let back: BackwardFn =
            Box::new(move |g| vec![g.reshape(old.clone()).expect("same length")]);
        Ok(self.push(y, vec![x.0], Some(back), None))
    }

    /// Per-row dot product of two `[N, C]` tensors -> `[N]`.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "rowwise dot of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, c) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; n];
        for i in 0..n {
            for j in 0..c {
                out[i] += av.data()[i * c + j] * bv.data()[i * c + j];
            }
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut da = vec![0.0; n * c];
            let mut db = vec![0.0; n * c];
            for i in 0..n {
                let gi = g.data()[i];
                for j in 0..c {
                    da[i * c + j] = gi * bv.data()[i * c + j];
                    db[i * c + j] = gi * av.data()[i * c + j];
                }
            }
            vec![
                Tensor::from_op(vec![n, c], da),
                Tensor::from_op(vec![n, c], db),
            ]
        });
        Ok(self.push(Tensor::from_op(vec![n], out), vec![a.0, b.0], Some(back), None))
    }

    /// Tiles a `[1, C]` row into `[n, C]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.shape().len() != 2 || xv.shape()[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "repeat_rows expects [1, C], got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[1];
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    dx[j] += g.data()[i * c + j];
                }
            }
            vec![Tensor::from_op(vec![1, c], dx)]
        });
        Ok(self.push(Tensor::from_op(vec![n, c], out), vec![x.0], Some(back), None))
    }

    // ---- normalization ----

    /// Batch norm over rows of `[R, F]` using batch statistics. Returns
    /// the output plus the batch mean and (biased) variance so the layer
    /// can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let xv = self.value(x).clone();
        if xv.shape().len() != 2 {
            return Err(Error::ShapeMismatch("batch norm input must be [R, F]".into()));
        }
        let (r, f) = (xv.shape()[0], xv.shape()[1]);
        let gv = self.value(gamma).clone();
        if gv.shape() != [f] || self.shape(beta) != [f] {
            return Err(Error::ShapeMismatch("batch norm affine dims".into()));
        }
        let rn = r as f64;
        let mut mean = vec![0.0; f];
        for i in 0..r {
            for j in 0..f {
                mean[j] += xv.data()[i * f + j];
            }
        }
        for m in &mut mean {
            *m /= rn;
        }
        let mut var = vec![0.0; f];
        for i in 0..r {
            for j in 0..f {
                let d = xv.data()[i * f + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rn;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; r * f];
        let mut out = vec![0.0; r * f];
        let beta_v = self.value(beta).clone();
        for i in 0..r {
            for j in 0..f {
                let h = (xv.data()[i * f + j] - mean[j]) * invstd[j];
                xhat[i * f + j] = h;
                out[i * f + j] = gv.data()[j] * h + beta_v.data()[j];
            }
        }
        let mean_t = Tensor::from_op(vec![f], mean);
        let var_t = Tensor::from_op(vec![f], var);
        let xhat_c = xhat.clone();
        let invstd_c = invstd;
        let gv_c = gv;
        let back: BackwardFn = Box::new(move |g| {
            let mut dbeta = vec![0.0; f];
            let mut dgamma = vec![0.0; f];
            let mut gsum = vec![0.0; f];
            let mut gxhat_sum = vec![0.0; f];
            for i in 0..r {
                for j in 0..f {
                    let gij = g.data()[i * f + j];
                    dbeta[j] += gij;
                    dgamma[j] += gij * xhat_c[i * f + j];
                    gsum[j] += gij;
                    gxhat_sum[j] += gij * xhat_c[i * f + j];
                }
            }
            let mut dx = vec![0.0; r * f];
            for i in 0..r {
                for j in 0..f {
                    let gij = g.data()[i * f + j];
                    dx[i * f + j] = gv_c.data()[j] * invstd_c[j] / rn
                        * (rn * gij - gsum[j] - xhat_c[i * f + j] * gxhat_sum[j]);
                }
            }
            vec![
                Tensor::from_op(vec![r, f], dx),
                Tensor::from_op(vec![f], dgamma),
                Tensor::from_op(vec![f], dbeta),
            ]
        });
        let y = self.push(
            Tensor::from_op(vec![r, f], out),
            vec![x.0, gamma.0, beta.0],
            Some(back),
            None,
        );
        Ok((y, mean_t, var_t))
    }

    /// Batch norm with frozen running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.shape().len() != 2 {
            return Err(Error::ShapeMismatch("batch norm input must be [R, F]".into()));
        }
        let (r, f) = (xv.shape()[0], xv.shape()[1]);
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let invstd: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + eps).sqrt())
            .collect();
        let rm = running_mean.data().to_vec();
        let mut xhat = vec![0.0; r * f];
        let mut out = vec![0.0; r * f];
        for i in 0..r {
            for j in 0..f {
                let h = (xv.data()[i * f + j] - rm[j]) * invstd[j];
                xhat[i * f + j] = h;
                out[i * f + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let invstd_c = invstd;
        let xhat_c = xhat;
        let gv_c = gv;
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; r * f];
            let mut dgamma = vec![0.0; f];
            let mut dbeta = vec![0.0; f];
            for i in 0..r {
                for j in 0..f {
                    let gij = g.data()[i * f + j];
                    dx[i * f + j] = gij * gv_c.data()[j] * invstd_c[j];
                    dgamma[j] += gij * xhat_c[i * f + j];
                    dbeta[j] += gij;
                }
            }
            vec![
                Tensor::from_op(vec![r, f], dx),
                Tensor::from_op(vec![f], dgamma),
                Tensor::from_op(vec![f], dbeta),
            ]
        });
        Ok(self.push(
            Tensor::from_op(vec![r, f], out),
            vec![x.0, gamma.0, beta.0],
            Some(back),
            None,
        ))
    }

    // ---- convolutions and pooling ----

    /// 2-D convolution: `x [H, W, C_in]`, `w [kh, kw, C_in, C_out]`,
    /// `b [C_out]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        if xv.shape().len() != 3 || wv.shape().len() != 4 {
            return Err(Error::ShapeMismatch("conv2d expects [H,W,C] and [kh,kw,Ci,Co]".into()));
        }
        let (h, wd, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw, wci, co) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        if ci != wci || bv.shape() != [co] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channels: input {ci}, kernel {wci}"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch("conv2d input smaller than kernel".into()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; ho * wo * co];
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..co {
                    let mut acc = bv.data()[c];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            for ic in 0..ci {
                                acc += xv.at3(iy as usize, ix as usize, ic)
                                    * wv.data()[((ky * kw + kx) * ci + ic) * co + c];
                            }
                        }
                    }
                    out[(oy * wo + ox) * co + c] = acc;
                }
            }
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; h * wd * ci];
            let mut dw = vec![0.0; kh * kw * ci * co];
            let mut db = vec![0.0; co];
            for oy in 0..ho {
                for ox in 0..wo {
                    for c in 0..co {
                        let gv = g.data()[(oy * wo + ox) * co + c];
                        if gv == 0.0 {
                            continue;
                        }
                        db[c] += gv;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                for ic in 0..ci {
                                    let xi = (iy as usize * wd + ix as usize) * ci + ic;
                                    let wi = ((ky * kw + kx) * ci + ic) * co + c;
                                    dx[xi] += gv * wv.data()[wi];
                                    dw[wi] += gv * xv.data()[xi];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                Tensor::from_op(vec![h, wd, ci], dx),
                Tensor::from_op(vec![kh, kw, ci, co], dw),
                Tensor::from_op(vec![co], db),
            ]
        });
        Ok(self.push(
            Tensor::from_op(vec![ho, wo, co], out),
            vec![x.0, w.0, b.0],
            Some(back),
            None,
        ))
    }

    /// 1-D convolution, stride 1: `x [T, C_in]`, `w [k, C_in, C_out]`.
    /// Padding replicates the edge frames, so a constant-in-time input
    /// yields a constant-in-time output.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        if xv.shape().len() != 2 || wv.shape().len() != 3 {
            return Err(Error::ShapeMismatch("conv1d expects [T,C] and [k,Ci,Co]".into()));
        }
        let (t, ci) = (xv.shape()[0], xv.shape()[1]);
        let (k, wci, co) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if ci != wci || bv.shape() != [co] {
            return Err(Error::ShapeMismatch("conv1d channels".into()));
        }
        if t + 2 * pad < k {
            return Err(Error::ShapeMismatch("conv1d input shorter than kernel".into()));
        }
        let to = t + 2 * pad - k + 1;
        let clamp_t = move |i: isize| -> usize { i.clamp(0, t as isize - 1) as usize };
        let mut out = vec![0.0; to * co];
        for ot in 0..to {
            for c in 0..co {
                let mut acc = bv.data()[c];
                for kk in 0..k {
                    let it = clamp_t((ot + kk) as isize - pad as isize);
                    for ic in 0..ci {
                        acc += xv.data()[it * ci + ic] * wv.data()[(kk * ci + ic) * co + c];
                    }
                }
                out[ot * co + c] = acc;
            }
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; t * ci];
            let mut dw = vec![0.0; k * ci * co];
            let mut db = vec![0.0; co];
            for ot in 0..to {
                for c in 0..co {
                    let gv = g.data()[ot * co + c];
                    if gv == 0.0 {
                        continue;
                    }
                    db[c] += gv;
                    for kk in 0..k {
                        let it = clamp_t((ot + kk) as isize - pad as isize);
                        for ic in 0..ci {
                            let xi = it * ci + ic;
                            let wi = (kk * ci + ic) * co + c;
                            dx[xi] += gv * wv.data()[wi];
                            dw[wi] += gv * xv.data()[xi];
                        }
                    }
                }
            }
            vec![
                Tensor::from_op(vec![t, ci], dx),
                Tensor::from_op(vec![k, ci, co], dw),
                Tensor::from_op(vec![co], db),
            ]
        });
        Ok(self.push(
            Tensor::from_op(vec![to, co], out),
            vec![x.0, w.0, b.0],
            Some(back),
            None,
        ))
    }

    /// Temporal average pooling on `[T, C]`; the final window may be
    /// shorter (ceil division on remainders) and averages what it has.
    pub fn avg_pool1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.shape().len() != 2 {
            return Err(Error::ShapeMismatch("avg_pool1d expects [T, C]".into()));
        }
        let (t, c) = (xv.shape()[0], xv.shape()[1]);
        let to = t.div_ceil(k);
        let mut out = vec![0.0; to * c];
        let mut lens = vec![0usize; to];
        for ot in 0..to {
            let end = ((ot + 1) * k).min(t);
            let len = end - ot * k;
            lens[ot] = len;
            for it in ot * k..end {
                for j in 0..c {
                    out[ot * c + j] += xv.data()[it * c + j];
                }
            }
            for j in 0..c {
                out[ot * c + j] /= len as f64;
            }
        }
        let back: BackwardFn = Box::new(move |g| {
            let mut dx = vec![0.0; t * c];
            for ot in 0..to {
                let end = ((ot + 1) * k).min(t);
                let len = (end - ot * k) as f64;
                for it in ot * k..end {
                    for j in 0..c {
                        dx[it * c + j] = g.data()[ot * c + j] / len;
                    }
                }
            }
            vec![Tensor::from_op(vec![t, c], dx)]
        });
        Ok(self.push(Tensor::from_op(vec![to, c], out), vec![x.0], Some(back), None))
    }

    // ---- attention-specific ops ----

    /// Pairwise cosine similarity: rows of `b [N, D]` against rows of
    /// `a [M, D]`, output `[N, M]`. Norms below `eps` are clamped to
    /// `eps` and treated as constants in the backward pass.
    pub fn cos_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "cos_rows of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, d) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[0];
        let norm = |t: &Tensor, i: usize| -> f64 {
            t.data()[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let na: Vec<f64> = (0..m).map(|i| norm(&av, i)).collect();
        let nb: Vec<f64> = (0..n).map(|i| norm(&bv, i)).collect();
        let mut out = vec![0.0; n * m];
        for kk in 0..n {
            for i in 0..m {
                let mut s = 0.0;
                for j in 0..d {
                    s += av.data()[i * d + j] * bv.data()[kk * d + j];
                }
                out[kk * m + i] = s / (na[i].max(eps) * nb[kk].max(eps));
            }
        }
        let out_c = out.clone();
        let back: BackwardFn = Box::new(move |g| {
            let mut da = vec![0.0; m * d];
            let mut db = vec![0.0; n * d];
            for kk in 0..n {
                let nbk = nb[kk].max(eps);
                for i in 0..m {
                    let gv = g.data()[kk * m + i];
                    if gv == 0.0 {
                        continue;
                    }
                    let nai = na[i].max(eps);
                    let c = out_c[kk * m + i];
                    let denom = nai * nbk;
                    for j in 0..d {
                        let aj = av.data()[i * d + j];
                        let bj = bv.data()[kk * d + j];
                        let mut ga = bj / denom;
                        if na[i] > eps {
                            ga -= c * aj / (nai * nai);
                        }
                        let mut gb = aj / denom;
                        if nb[kk] > eps {
                            gb -= c * bj / (nbk * nbk);
                        }
                        da[i * d + j] += gv * ga;
                        db[kk * d + j] += gv * gb;
                    }
                }
            }
            vec![
                Tensor::from_op(vec![m, d], da),
                Tensor::from_op(vec![n, d], db),
            ]
        });
        Ok(self.push(Tensor::from_op(vec![n, m], out), vec![a.0, b.0], Some(back), None))
    }

    /// Row-wise sum normalization of nonnegative scores `[N, M]`. A row
    /// whose sum falls below `eps` becomes uniform 1/M and is excluded
    /// from gradient flow.
    pub fn row_norm_attention(&mut self, z: Var, eps: f64) -> Result<Var> {
        let zv = self.value(z).clone();
        if zv.shape().len() != 2 {
            return Err(Error::ShapeMismatch("attention scores must be [N, M]".into()));
        }
        let (n, m) = (zv.shape()[0], zv.shape()[1]);
        let sums: Vec<f64> = (0..n)
            .map(|kk| zv.data()[kk * m..(kk + 1) * m].iter().sum())
            .collect();
        let mut out = vec![0.0; n * m];
        for kk in 0..n {
            if sums[kk] >= eps {
                for i in 0..m {
                    out[kk * m + i] = zv.data()[kk * m + i] / sums[kk];
                }
            } else {
                for i in 0..m {
                    out[kk * m + i] = 1.0 / m as f64;
                }
            }
        }
        let out_c = out.clone();
        let back: BackwardFn = Box::new(move |g| {
            let mut dz = vec![0.0; n * m];
            for kk in 0..n {
                if sums[kk] < eps {
                    continue; // fallback row is constant
                }
                let mut gdota = 0.0;
                for i in 0..m {
                    gdota += g.data()[kk * m + i] * out_c[kk * m + i];
                }
                for i in 0..m {
                    dz[kk * m + i] = (g.data()[kk * m + i] - gdota) / sums[kk];
                }
            }
            vec![Tensor::from_op(vec![n, m], dz)]
        });
        Ok(self.push(Tensor::from_op(vec![n, m], out), vec![z.0], Some(back), None))
    }

    /// Sum of `mask * (x - target)^2` over all entries -> `[1]`.
    pub fn masked_sq_err(&mut self, x: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.shape() != target.shape() || xv.shape() != mask.shape() {
            return Err(Error::ShapeMismatch("masked_sq_err operand shapes".into()));
        }
        let mut loss = 0.0;
        for i in 0..xv.len() {
            let d = xv.data()[i] - target.data()[i];
            loss += mask.data()[i] * d * d;
        }
        let shape = xv.shape().to_vec();
        let t = target.clone();
        let mk = mask.clone();
        let back: BackwardFn = Box::new(move |g| {
            let g0 = g.data()[0];
            let dx: Vec<f64> = (0..xv.len())
                .map(|i| g0 * 2.0 * mk.data()[i] * (xv.data()[i] - t.data()[i]))
                .collect();
            vec![Tensor::from_op(shape.clone(), dx)]
        });
        Ok(self.push(Tensor::scalar(loss), vec![x.0], Some(back), None))
    }

    /// Weighted binary cross-entropy over a probability vector -> `[1]`.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn weighted_bce(&mut self, yhat: Var, y: &Tensor, w: &Tensor) -> Result<Var> {
        let yv = self.value(yhat).clone();
        if yv.shape() != y.shape() || yv.shape() != w.shape() {
            return Err(Error::ShapeMismatch("weighted_bce operand shapes".into()));
        }
        const EPS: f64 = 1e-12;
        let clamp = |p: f64| p.clamp(EPS, 1.0 - EPS);
        let mut loss = 0.0;
        for i in 0..yv.len() {
            let p = clamp(yv.data()[i]);
            loss -= w.data()[i] * (y.data()[i] * p.ln() + (1.0 - y.data()[i]) * (1.0 - p).ln());
        }
        let shape = yv.shape().to_vec();
        let yc = y.clone();
        let wc = w.clone();
        let back: BackwardFn = Box::new(move |g| {
            let g0 = g.data()[0];
            let dp: Vec<f64> = (0..yv.len())
                .map(|i| {
                    let p = clamp(yv.data()[i]);
                    -g0 * wc.data()[i] * (yc.data()[i] / p - (1.0 - yc.data()[i]) / (1.0 - p))
                })
                .collect();
            vec![Tensor::from_op(shape.clone(), dp)]
        });
        Ok(self.push(Tensor::scalar(loss), vec![yhat.0], Some(back), None))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss; returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        if self.value(loss).shape() != [1] {
            return Err(Error::ShapeMismatch(format!(
                "backward root must be a scalar [1], got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*p] {
                        Some(acc) => {
                            let sum = acc.add(&pg)?;
                            *acc = sum;
                        }
                        slot => *slot = Some(pg),
                    }
                }
            } else if node.param.is_some() {
                grads[i] = Some(g); // keep for collection below
            }
        }
        let mut by_param: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads[i].take()) {
                by_param.push((id, g));
            }
        }
        Ok(by_param)
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn scalar_store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn sigmoid_values() {
        let store = scalar_store();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3], vec![0.0, 3f64.ln(), 1000.0]).unwrap());
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-12);
        assert!(v[2] > 1.0 - 1e-12 && v[2] <= 1.0 && v[2].is_finite());
    }

    #[test]
    fn relu_values_and_grad() {
        let store = scalar_store();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_grad_sign() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![2.0, -2.0]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.param(id);
        let y = g.relu(x);
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[0].1.data(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = store.add("b", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(x, wv).unwrap();
        let y = g.add_row_broadcast(y, bv).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_input_passes_bias() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], vec![5.0, -1.0, 2.0, 0.5]).unwrap());
        let b = store.add("b", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, 2]));
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(x, wv).unwrap();
        let y = g.add_row_broadcast(y, bv).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn bn_two_sample_batch() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", Tensor::full(&[1], 1.0));
        let beta = store.add("b", Tensor::zeros(&[1]));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap());
        let gv = g.param(gamma);
        let bv = g.param(beta);
        let (y, mean, var) = g.batch_norm_train(x, gv, bv, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
        assert_eq!(mean.data(), &[1.0]);
        assert_eq!(var.data(), &[1.0]);
    }

    #[test]
    fn cos_rows_values() {
        let store = scalar_store();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = g.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let c = g.cos_rows(a, b, 1e-12).unwrap();
        assert!((g.value(c).data()[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn attention_normalization_and_fallback() {
        let store = scalar_store();
        let mut g = Graph::new(&store);
        let z = g.input(Tensor::new(vec![2, 2], vec![0.2, 0.6, 0.0, 0.0]).unwrap());
        let a = g.row_norm_attention(z, 1e-12).unwrap();
        let v = g.value(a).data();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }

    #[test]
    fn bce_half_everywhere() {
        let store = scalar_store();
        let mut g = Graph::new(&store);
        let n = 4;
        let p = g.input(Tensor::full(&[n], 0.5));
        let y = Tensor::new(vec![n], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let w = Tensor::full(&[n], 1.0);
        let l = g.weighted_bce(p, &y, &w).unwrap();
        assert!((g.value(l).data()[0] - n as f64 * 2f64.ln()).abs() < 1e-12);
    }
}
