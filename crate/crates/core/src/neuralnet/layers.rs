//! Parameter-owning layers. `forward_train` caches what `backward` needs;
//! `forward_eval` takes `&self` and leaves every buffer untouched.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, ConvGeom};
use super::tensor::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

fn not_cached(layer: &str) -> Error {
    Error::Shape(format!("{layer}: backward called without a cached training forward"))
}

pub(crate) fn normal_init<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

struct ConvCache<T> {
    cols: Vec<T>,
    x_shape: [usize; 4],
}

pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng>(prefix: &str, ci: usize, co: usize, geom: ConvGeom, gain: f64, rng: &mut R) -> Self {
        let fan_in = ci * geom.k * geom.k;
        let std = (gain / fan_in as f64).sqrt();
        Conv {
            weight: Param::trainable(
                format!("{prefix}.weight"),
                vec![co, ci, geom.k, geom.k],
                normal_init(rng, co * fan_in, std),
            ),
            bias: Param::trainable(format!("{prefix}.bias"), vec![co], vec![T::zero(); co]),
            in_channels: ci,
            out_channels: co,
            geom,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {}",
                self.weight.name,
                self.in_channels,
                x.c()
            )));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        Ok(ops::conv2d_forward(x, &self.weight.value, &self.bias.value, self.out_channels, self.geom)?.output)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let f = ops::conv2d_forward(x, &self.weight.value, &self.bias.value, self.out_channels, self.geom)?;
        self.cache = Some(ConvCache {
            cols: f.cols,
            x_shape: x.shape(),
        });
        Ok(f.output)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// requested. Consumes the cache.
    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.take().ok_or_else(|| not_cached(&self.weight.name))?;
        let g = ops::conv2d_backward(dy, &self.weight.value, &cache.cols, cache.x_shape, self.geom, need_dx)?;
        ops::add_into(&mut self.weight.grad, &g.dw);
        ops::add_into(&mut self.bias.grad, &g.db);
        Ok(g.dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let v = |x: f64| vec![T::of(x); channels];
        BatchNorm {
            gamma: Param::trainable(format!("{prefix}.gamma"), vec![channels], v(1.0)),
            beta: Param::trainable(format!("{prefix}.beta"), vec![channels], v(0.0)),
            running_mean: Param::buffer(format!("{prefix}.running_mean"), vec![channels], v(0.0)),
            running_var: Param::buffer(format!("{prefix}.running_var"), vec![channels], v(1.0)),
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batch_norm_eval(
            x,
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean.value,
            &self.running_var.value,
        )
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = ops::batch_norm_train(x, &self.gamma.value, &self.beta.value)?;
        let m = (x.n() * x.h() * x.w()) as f64;
        let mom = BN_MOMENTUM;
        for (c, (rm, rv)) in self
            .running_mean
            .value
            .iter_mut()
            .zip(self.running_var.value.iter_mut())
            .enumerate()
        {
            *rm = T::of(mom * rm.f64() + (1.0 - mom) * f.mean[c]);
            *rv = T::of(mom * rv.f64() + (1.0 - mom) * f.var[c] * m / (m - 1.0));
        }
        self.cache = Some(BnCache {
            xhat: f.xhat,
            inv_std: f.inv_std,
        });
        Ok(f.output)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| not_cached(&self.gamma.name))?;
        let g = ops::batch_norm_backward(dy, &cache.xhat, &cache.inv_std, &self.gamma.value)?;
        ops::add_into(&mut self.gamma.grad, &g.dgamma);
        ops::add_into(&mut self.beta.grad, &g.dbeta);
        Ok(g.dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Convolution, batch norm, ReLU.
pub struct ConvBnRelu<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    out: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new<R: Rng>(prefix: &str, ci: usize, co: usize, geom: ConvGeom, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv::new(&format!("{prefix}.conv"), ci, co, geom, 2.0, rng),
            bn: BatchNorm::new(&format!("{prefix}.bn"), co),
            out: None,
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(&self.bn.forward_eval(&self.conv.forward_eval(x)?)?))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.conv.forward_train(x)?;
        let y = ops::relu(&self.bn.forward_train(&z)?);
        self.out = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let y = self.out.take().ok_or_else(|| not_cached(&self.conv.weight.name))?;
        let d = self.bn.backward(&ops::relu_backward(dy, &y))?;
        self.conv.backward(&d, need_dx)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
}

/// Nearest 2x upsample and a 2x2 size-preserving convolution halving the
/// channel count.
pub struct UpConv<T> {
    pub conv: Conv<T>,
}

impl<T: Scalar> UpConv<T> {
    pub fn new<R: Rng>(prefix: &str, ci: usize, rng: &mut R) -> Result<Self> {
        if ci % 2 != 0 || ci == 0 {
            return Err(Error::Shape(format!("up-conv needs an even channel count, got {ci}")));
        }
        Ok(UpConv {
            conv: Conv::new(prefix, ci, ci / 2, ConvGeom::SAME2X2, 1.0, rng),
        })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward_eval(&ops::upsample2(x))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward_train(&ops::upsample2(x))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.conv.backward(dy, true)?.expect("input gradient requested");
        Ok(ops::upsample2_backward(&d))
    }
}

struct HeadCache<T> {
    pooled: Vec<T>,
    x_shape: [usize; 4],
}

/// Global average pool over the leading channels, then one fully connected
/// layer producing class logits.
pub struct ClassHead<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub channels: usize,
    pub classes: usize,
    cache: Option<HeadCache<T>>,
}

impl<T: Scalar> ClassHead<T> {
    pub fn new<R: Rng>(prefix: &str, channels: usize, classes: usize, rng: &mut R) -> Self {
        ClassHead {
            weight: Param::trainable(
                format!("{prefix}.weight"),
                vec![classes, channels],
                normal_init(rng, classes * channels, (1.0 / channels as f64).sqrt()),
            ),
            bias: Param::trainable(format!("{prefix}.bias"), vec![classes], vec![T::zero(); classes]),
            channels,
            classes,
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let pooled = ops::global_avg_pool(x, self.channels)?;
        ops::fc_forward(&pooled, &self.weight.value, &self.bias.value, self.channels, self.classes)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        let pooled = ops::global_avg_pool(x, self.channels)?;
        let y = ops::fc_forward(&pooled, &self.weight.value, &self.bias.value, self.channels, self.classes)?;
        self.cache = Some(HeadCache {
            pooled,
            x_shape: x.shape(),
        });
        Ok(y)
    }

    pub fn backward(&mut self, dlogits: &[T]) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| not_cached(&self.weight.name))?;
        let g = ops::fc_backward(dlogits, &cache.pooled, &self.weight.value, self.channels, self.classes);
        ops::add_into(&mut self.weight.grad, &g.dw);
        ops::add_into(&mut self.bias.grad, &g.db);
        Ok(ops::global_avg_pool_backward(&g.dx, cache.x_shape, self.channels))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
