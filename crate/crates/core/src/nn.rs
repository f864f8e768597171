//! Parameters, layers, and the SGD update. Layers register their weights
//! in a [`ParamStore`] and keep only ids, so the store can be stepped,
//! checkpointed, and finite-difference-perturbed from one place.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum_buf: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            momentum_buf: Tensor::zeros(&shape),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v *= c;
            }
        }
    }

    /// buf <- momentum*buf + (grad + wd*value); value <- value - lr*buf.
    /// Grads are zeroed afterwards. A non-finite gradient aborts the step
    /// before any parameter is touched.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        for p in &self.params {
            if p.trainable {
                if let Some(v) = p.grad.data().iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of '{}' contains {v}; step aborted",
                        p.name
                    )));
                }
            }
        }
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let buf = p.momentum_buf.data_mut();
            for i in 0..value.len() {
                buf[i] = momentum * buf[i] + (grad[i] + weight_decay * value[i]);
                value[i] -= lr * buf[i];
                grad[i] = 0.0;
            }
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform init, +-sqrt(6/fan_in).
pub fn init_uniform(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init values are finite")
}

/// Fully-connected layer, y = xW + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, &[d_in, d_out], d_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row_broadcast(y, b)
    }
}

/// Whether normalization layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    BatchNorm,
    None,
}

/// Forward mode: train uses batch statistics and updates running stats,
/// eval uses the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the row dimension of an `[R, F]` input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub initialized: bool,
    pub eps: f64,
    pub momentum: f64,
    name: String,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[features], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        Self {
            gamma,
            beta,
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            initialized: false,
            eps: 1e-5,
            momentum: 0.9,
            name: name.to_string(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let gamma = g.param(self.gamma);
                let beta = g.param(self.beta);
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                if self.initialized {
                    let m = self.momentum;
                    self.running_mean = self
                        .running_mean
                        .zip_map(&mean, |r, b| m * r + (1.0 - m) * b)?;
                    self.running_var = self
                        .running_var
                        .zip_map(&var, |r, b| m * r + (1.0 - m) * b)?;
                } else {
                    // first step seeds the running stats with the batch stats
                    self.running_mean = mean;
                    self.running_var = var;
                    self.initialized = true;
                }
                Ok(y)
            }
            Mode::Eval => {
                if !self.initialized {
                    return Err(Error::UninitializedStatistics);
                }
                let gamma = g.param(self.gamma);
                let beta = g.param(self.beta);
                g.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    &self.running_mean,
                    &self.running_var,
                    self.eps,
                )
            }
        }
    }

    /// Extra (non-parameter) state for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            (format!("{}.running_mean", self.name), self.running_mean.clone()),
            (format!("{}.running_var", self.name), self.running_var.clone()),
            (
                format!("{}.initialized", self.name),
                Tensor::scalar(if self.initialized { 1.0 } else { 0.0 }),
            ),
        ]
    }

    pub fn load_state(&mut self, get: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let want = |k: &str| {
            get(k).ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{k}'")))
        };
        self.running_mean = want(&format!("{}.running_mean", self.name))?;
        self.running_var = want(&format!("{}.running_var", self.name))?;
        self.initialized = want(&format!("{}.initialized", self.name))?.data()[0] != 0.0;
        Ok(())
    }
}

/// 2-D convolution on `[H, W, C_in]` inputs with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kh * kw * c_in;
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, &[kh, kw, c_in, c_out], fan_in),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            w,
            b,
            kh,
            kw,
            c_in,
            c_out,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 1-D convolution on `[T, C_in]` inputs with zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        pad: usize,
    ) -> Self {
        let fan_in = k * c_in;
        let w = store.add(format!("{name}.w"), init_uniform(rng, &[k, c_in, c_out], fan_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            w,
            b,
            k,
            c_in,
            c_out,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv1d(x, w, b, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_vanilla_decreases_by_lr_times_grad() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        store.get_mut(id).grad = Tensor::scalar(2.0);
        store.sgd_step(0.1, 0.0, 0.0).unwrap();
        assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(store.get(id).grad.data()[0], 0.0);
    }

    #[test]
    fn sgd_zero_grad_zero_buf_leaves_value() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(3.5));
        store.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert_eq!(store.value(id).data()[0], 3.5);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // momentum=0.9, grad=1, lr=0.1, start 0: value -0.1 then -0.29
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(0.0));
        store.get_mut(id).grad = Tensor::scalar(1.0);
        store.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!((store.value(id).data()[0] + 0.1).abs() < 1e-15);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        store.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!((store.value(id).data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_aborts_on_non_finite_grad() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        store.get_mut(id).grad.data_mut()[0] = f64::NAN;
        assert!(store.sgd_step(0.1, 0.9, 0.0).is_err());
        // value untouched
        assert_eq!(store.value(id).data()[0], 1.0);
    }
}
