//! The pre-enhancing net and the classification U-net.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::layers::{ClassHead, Conv, ConvBnRelu, UpConv};
use super::ops::{self, ConvGeom};
use super::tensor::{Param, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imagecore::NUM_CLASSES;

/// Channels of the feature stack `[B-mode, LPT, LP, BSE]`.
pub const FEATURE_CHANNELS: usize = 4;
pub const PE_WIDTH: usize = 32;
/// Convolution + BN + ReLU blocks before the single-map output convolution.
pub const PE_BLOCKS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3Pad1,
    DownConv2x2S2,
    UpConv2x2,
    Conv1x1,
    BatchNorm,
    Relu,
    Sigmoid,
    ConcatSkip,
    GlobalAvgPool,
    FullyConnected,
    Softmax,
}

/// One entry of an architecture listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind,
            in_channels,
            out_channels,
        }
    }

    fn same(kind: LayerKind, channels: usize) -> Self {
        LayerSpec::new(kind, channels, channels)
    }
}

fn conv_bn_relu_specs(kind: LayerKind, ci: usize, co: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::new(kind, ci, co),
        LayerSpec::same(LayerKind::BatchNorm, co),
        LayerSpec::same(LayerKind::Relu, co),
    ]
}

/// Common interface of the serializable networks.
pub trait Network<T: Scalar>: Sized {
    /// Architecture identifier written to model files.
    const ARCH: &'static str;

    /// Hyperparameters needed to rebuild the skeleton, as key/value pairs.
    fn hyperparameters(&self) -> Vec<(&'static str, String)>;

    /// Builds a zero-initialized skeleton from stored hyperparameters.
    fn from_hyperparameters(h: &BTreeMap<String, String>) -> Result<Self>;

    /// Every named tensor: trainable parameters and running statistics.
    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn layer_specs(&self) -> Vec<LayerSpec>;

    fn trainable_mut(&mut self) -> Vec<&mut Param<T>> {
        self.params_mut().into_iter().filter(|p| p.is_trainable()).collect()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars, batch-norm scales and shifts included.
    fn trainable_parameter_count(&self) -> usize {
        self.params().iter().filter(|p| p.is_trainable()).map(|p| p.len()).sum()
    }

    /// Weights and biases of convolution and fully connected layers.
    fn weight_parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.name.ends_with(".weight") || p.name.ends_with(".bias"))
            .map(|p| p.len())
            .sum()
    }
}

pub(crate) fn parse_hyper<V: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<V> {
    let raw = h
        .get(key)
        .ok_or_else(|| Error::Format(format!("model manifest lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("model manifest `{key}` has bad value `{raw}`")))
}

/// SHA-256 over all named tensors in sorted name order, values as `f32`.
pub fn param_hash<T: Scalar, N: Network<T>>(net: &N) -> String {
    let mut params = net.params();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update((p.name.len() as u32).to_le_bytes());
        hasher.update(p.name.as_bytes());
        for &d in &p.dims {
            hasher.update((d as u32).to_le_bytes());
        }
        for &v in &p.value {
            hasher.update((v.f64() as f32).to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_input<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if x.c() != channels {
        return Err(Error::Shape(format!("{what} expects {channels} input channels, got {}", x.c())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pre-enhancing net
// ---------------------------------------------------------------------------

/// Seven 3x3 conv/BN/ReLU blocks of 32 maps, a 3x3 conv to one map and a
/// sigmoid. Spatial size is preserved.
pub struct PeNet<T> {
    pub in_channels: usize,
    pub blocks: Vec<ConvBnRelu<T>>,
    pub out: Conv<T>,
    out_cache: Option<Tensor<T>>,
}

pub fn build_pe(in_channels: usize, seed: u64) -> PeNet<f32> {
    PeNet::new(in_channels, seed)
}

impl<T: Scalar> PeNet<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..PE_BLOCKS)
            .map(|i| {
                let ci = if i == 0 { in_channels } else { PE_WIDTH };
                ConvBnRelu::new(&format!("pe.block{i}"), ci, PE_WIDTH, ConvGeom::CONV3X3, &mut rng)
            })
            .collect();
        PeNet {
            in_channels,
            blocks,
            out: Conv::new("pe.out", PE_WIDTH, 1, ConvGeom::CONV3X3, 1.0, &mut rng),
            out_cache: None,
        }
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.in_channels, "pre-enhancing net")?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_eval(&h)?;
        }
        Ok(ops::sigmoid(&self.out.forward_eval(&h)?))
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.in_channels, "pre-enhancing net")?;
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward_train(&h)?;
        }
        let y = ops::sigmoid(&self.out.forward_train(&h)?);
        self.out_cache = Some(y.clone());
        Ok(y)
    }

    /// Backpropagates a gradient with respect to the sigmoid output.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<()> {
        let y = self
            .out_cache
            .take()
            .ok_or_else(|| Error::Shape("pre-enhancing net: backward before forward".into()))?;
        let mut d = self
            .out
            .backward(&ops::sigmoid_backward(dy, &y), true)?
            .expect("input gradient requested");
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            match b.backward(&d, i > 0)? {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Network<T> for PeNet<T> {
    const ARCH: &'static str = "PE1";

    fn hyperparameters(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("width", PE_WIDTH.to_string()),
            ("blocks", PE_BLOCKS.to_string()),
        ]
    }

    fn from_hyperparameters(h: &BTreeMap<String, String>) -> Result<Self> {
        let width: usize = parse_hyper(h, "width")?;
        let blocks: usize = parse_hyper(h, "blocks")?;
        if width != PE_WIDTH || blocks != PE_BLOCKS {
            return Err(Error::Architecture {
                expected: format!("width {PE_WIDTH}, {PE_BLOCKS} blocks"),
                found: format!("width {width}, {blocks} blocks"),
            });
        }
        Ok(PeNet::new(parse_hyper(h, "in_channels")?, 0))
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.out.params_mut());
        v
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(conv_bn_relu_specs(
                LayerKind::Conv3x3Pad1,
                b.conv.in_channels,
                b.conv.out_channels,
            ));
        }
        v.push(LayerSpec::new(LayerKind::Conv3x3Pad1, PE_WIDTH, 1));
        v.push(LayerSpec::same(LayerKind::Sigmoid, 1));
        v
    }
}

// ---------------------------------------------------------------------------
// Classification U-net
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CunetArch {
    pub in_channels: usize,
    pub base_features: usize,
    pub depth: usize,
    /// Leading share of bottleneck channels pooled by the class head.
    pub head_fraction: f64,
}

impl Default for CunetArch {
    fn default() -> Self {
        CunetArch {
            in_channels: 1,
            base_features: 16,
            depth: 4,
            head_fraction: 0.5,
        }
    }
}

impl CunetArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_features == 0 || self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("invalid U-net layout {self:?}")));
        }
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(Error::Config("head fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_features << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn head_channels(&self) -> usize {
        let b = self.bottleneck_channels();
        ((b as f64 * self.head_fraction).round() as usize).clamp(1, b)
    }
}

/// Raw network outputs before the final nonlinearities.
pub struct CunetOutput<T> {
    pub seg_logits: Tensor<T>,
    /// `n x 4`, row-major.
    pub class_logits: Vec<T>,
}

pub struct CunetPrediction<T> {
    pub probmap: Tensor<T>,
    /// `n x 4` class probabilities.
    pub class_probs: Vec<T>,
}

/// U-net with stride-2 convolutional downsampling, batch norm before every
/// ReLU, and a class head on the bottleneck.
pub struct CuNet<T> {
    pub arch: CunetArch,
    pub enc: Vec<ConvBnRelu<T>>,
    pub down: Vec<ConvBnRelu<T>>,
    pub bottleneck: ConvBnRelu<T>,
    pub head: ClassHead<T>,
    pub up: Vec<UpConv<T>>,
    pub dec: Vec<ConvBnRelu<T>>,
    pub out: Conv<T>,
}

pub fn build_cunet(arch: CunetArch, seed: u64) -> Result<CuNet<f32>> {
    CuNet::new(arch, seed)
}

impl<T: Scalar> CuNet<T> {
    pub fn new(arch: CunetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.depth;
        let mut enc = Vec::with_capacity(d);
        let mut down = Vec::with_capacity(d);
        for l in 0..d {
            let ci = if l == 0 { arch.in_channels } else { arch.channels(l) };
            let c = arch.channels(l);
            enc.push(ConvBnRelu::new(&format!("cunet.enc{l}"), ci, c, ConvGeom::CONV3X3, &mut rng));
            down.push(ConvBnRelu::new(&format!("cunet.down{l}"), c, 2 * c, ConvGeom::DOWN2X2, &mut rng));
        }
        let b = arch.bottleneck_channels();
        let bottleneck = ConvBnRelu::new("cunet.bottleneck", b, b, ConvGeom::CONV3X3, &mut rng);
        let head = ClassHead::new("cunet.head", arch.head_channels(), NUM_CLASSES, &mut rng);
        let mut up = Vec::with_capacity(d);
        let mut dec = Vec::with_capacity(d);
        for l in 0..d {
            let c = arch.channels(l);
            up.push(UpConv::new(&format!("cunet.up{l}"), 2 * c, &mut rng)?);
            dec.push(ConvBnRelu::new(&format!("cunet.dec{l}"), 2 * c, c, ConvGeom::CONV3X3, &mut rng));
        }
        let out = Conv::new("cunet.out", arch.base_features, 1, ConvGeom::POINTWISE, 1.0, &mut rng);
        Ok(CuNet {
            arch,
            enc,
            down,
            bottleneck,
            head,
            up,
            dec,
            out,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        check_input(x, self.arch.in_channels, "U-net")?;
        let f = 1usize << self.arch.depth;
        if x.h() % f != 0 || x.w() % f != 0 {
            return Err(Error::Shape(format!(
                "U-net of depth {} needs sides divisible by {f}, got {}x{}",
                self.arch.depth,
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<CunetOutput<T>> {
        self.check(x)?;
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x.clone();
        for l in 0..self.arch.depth {
            h = self.enc[l].forward_eval(&h)?;
            skips.push(h.clone());
            h = self.down[l].forward_eval(&h)?;
        }
        h = self.bottleneck.forward_eval(&h)?;
        let class_logits = self.head.forward_eval(&h)?;
        for l in (0..self.arch.depth).rev() {
            let u = self.up[l].forward_eval(&h)?;
            h = self.dec[l].forward_eval(&ops::concat_channels(&u, &skips[l])?)?;
        }
        Ok(CunetOutput {
            seg_logits: self.out.forward_eval(&h)?,
            class_logits,
        })
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<CunetPrediction<T>> {
        let o = self.forward_eval(x)?;
        Ok(CunetPrediction {
            probmap: ops::sigmoid(&o.seg_logits),
            class_probs: ops::softmax4(&o.class_logits)?,
        })
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<CunetOutput<T>> {
        self.check(x)?;
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x.clone();
        for l in 0..self.arch.depth {
            h = self.enc[l].forward_train(&h)?;
            skips.push(h.clone());
            h = self.down[l].forward_train(&h)?;
        }
        h = self.bottleneck.forward_train(&h)?;
        let class_logits = self.head.forward_train(&h)?;
        for l in (0..self.arch.depth).rev() {
            let u = self.up[l].forward_train(&h)?;
            h = self.dec[l].forward_train(&ops::concat_channels(&u, &skips[l])?)?;
        }
        Ok(CunetOutput {
            seg_logits: self.out.forward_train(&h)?,
            class_logits,
        })
    }

    /// Backpropagates gradients with respect to both logit outputs. Returns
    /// the input gradient when `need_dx` is set.
    pub fn backward(&mut self, d_seg: &Tensor<T>, d_class: &[T], need_dx: bool) -> Result<Option<Tensor<T>>> {
        let d = self.arch.depth;
        let mut g = self.out.backward(d_seg, true)?.expect("input gradient requested");
        let mut d_skips: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        for l in 0..d {
            let dcat = self.dec[l].backward(&g, true)?.expect("input gradient requested");
            let (du, ds) = ops::split_channels(&dcat, self.arch.channels(l));
            d_skips[l] = Some(ds);
            g = self.up[l].backward(&du)?;
        }
        let dh = self.head.backward(d_class)?;
        ops::add_into(g.data_mut(), dh.data());
        g = self.bottleneck.backward(&g, true)?.expect("input gradient requested");
        for l in (0..d).rev() {
            g = self.down[l].backward(&g, true)?.expect("input gradient requested");
            let ds = d_skips[l].take().expect("skip gradient stored");
            ops::add_into(g.data_mut(), ds.data());
            match self.enc[l].backward(&g, l > 0 || need_dx)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

impl<T: Scalar> Network<T> for CuNet<T> {
    const ARCH: &'static str = "CUNET1";

    fn hyperparameters(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.arch.in_channels.to_string()),
            ("base_features", self.arch.base_features.to_string()),
            ("depth", self.arch.depth.to_string()),
            // shortest round-trip representation
            ("head_fraction", format!("{:?}", self.arch.head_fraction)),
        ]
    }

    fn from_hyperparameters(h: &BTreeMap<String, String>) -> Result<Self> {
        CuNet::new(
            CunetArch {
                in_channels: parse_hyper(h, "in_channels")?,
                base_features: parse_hyper(h, "base_features")?,
                depth: parse_hyper(h, "depth")?,
                head_fraction: parse_hyper(h, "head_fraction")?,
            },
            0,
        )
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        for l in 0..self.arch.depth {
            v.extend(self.enc[l].params());
            v.extend(self.down[l].params());
        }
        v.extend(self.bottleneck.params());
        v.extend(self.head.params());
        for l in 0..self.arch.depth {
            v.extend(self.up[l].conv.params());
            v.extend(self.dec[l].params());
        }
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for (e, d) in self.enc.iter_mut().zip(self.down.iter_mut()) {
            v.extend(e.params_mut());
            v.extend(d.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        v.extend(self.head.params_mut());
        for (u, d) in self.up.iter_mut().zip(self.dec.iter_mut()) {
            v.extend(u.conv.params_mut());
            v.extend(d.params_mut());
        }
        v.extend(self.out.params_mut());
        v
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let a = &self.arch;
        let mut v = Vec::new();
        for l in 0..a.depth {
            let ci = if l == 0 { a.in_channels } else { a.channels(l) };
            v.extend(conv_bn_relu_specs(LayerKind::Conv3x3Pad1, ci, a.channels(l)));
            v.extend(conv_bn_relu_specs(LayerKind::DownConv2x2S2, a.channels(l), a.channels(l + 1)));
        }
        let b = a.bottleneck_channels();
        v.extend(conv_bn_relu_specs(LayerKind::Conv3x3Pad1, b, b));
        v.push(LayerSpec::new(LayerKind::GlobalAvgPool, b, a.head_channels()));
        v.push(LayerSpec::new(LayerKind::FullyConnected, a.head_channels(), NUM_CLASSES));
        v.push(LayerSpec::same(LayerKind::Softmax, NUM_CLASSES));
        for l in (0..a.depth).rev() {
            let c = a.channels(l);
            v.push(LayerSpec::new(LayerKind::UpConv2x2, 2 * c, c));
            v.push(LayerSpec::new(LayerKind::ConcatSkip, c, 2 * c));
            v.extend(conv_bn_relu_specs(LayerKind::Conv3x3Pad1, 2 * c, c));
        }
        v.push(LayerSpec::new(LayerKind::Conv1x1, a.base_features, 1));
        v.push(LayerSpec::same(LayerKind::Sigmoid, 1));
        v
    }
}
