//! Layer plumbing shared by the attention, block, and network modules:
//! parameter-holding wrappers around the raw tensor ops, Kaiming-uniform
//! initialization from a seeded RNG, and a flat named-parameter registry
//! used by the optimizer and the checkpoint format.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus named non-trainable buffers
/// (batch-norm running statistics).
#[derive(Default)]
pub struct ParamSet {
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Rc<RefCell<Vec<f64>>>)>,
}

impl ParamSet {
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) {
        self.params.push((name.into(), t.clone()));
    }

    pub fn buffer(&mut self, name: impl Into<String>, b: &Rc<RefCell<Vec<f64>>>) {
        self.buffers.push((name.into(), Rc::clone(b)));
    }
}

/// Kaiming-uniform fan-in draw: U(−√(6/fan_in), +√(6/fan_in)).
fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Conv2d {
        let fan_in = cin * k * k;
        Conv2d {
            weight: Tensor::param(&[cout, cin, k, k], kaiming_uniform(rng, cout * fan_in, fan_in)),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.pad, self.dilation)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        set.param(format!("{prefix}.weight"), &self.weight);
        set.param(format!("{prefix}.bias"), &self.bias);
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Linear {
        Linear {
            weight: Tensor::param(&[cout, cin], kaiming_uniform(rng, cout * cin, cin)),
            bias: Tensor::param(&[cout], vec![0.0; cout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, &self.bias)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        set.param(format!("{prefix}.weight"), &self.weight);
        set.param(format!("{prefix}.bias"), &self.bias);
    }
}

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates the running estimates in place; eval mode uses the
/// running estimates.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Rc<RefCell<Vec<f64>>>,
    pub running_var: Rc<RefCell<Vec<f64>>>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Tensor::param(&[c], vec![1.0; c]),
            beta: Tensor::param(&[c], vec![0.0; c]),
            running_mean: Rc::new(RefCell::new(vec![0.0; c])),
            running_var: Rc::new(RefCell::new(vec![1.0; c])),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let (y, mean, var) = x.batch_norm_train(&self.gamma, &self.beta, BN_EPS)?;
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..rm.len() {
                rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c];
            }
            Ok(y)
        } else {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            x.batch_norm_eval(&self.gamma, &self.beta, &rm, &rv, BN_EPS)
        }
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        set.param(format!("{prefix}.gamma"), &self.gamma);
        set.param(format!("{prefix}.beta"), &self.beta);
        set.buffer(format!("{prefix}.running_mean"), &self.running_mean);
        set.buffer(format!("{prefix}.running_var"), &self.running_var);
    }
}
