//! Two-phase training: the U-net alone on raw B-mode first, then the
//! pre-enhancing net and the U-net jointly.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::models::{CuNet, CunetArch, Network, PeNet, FEATURE_CHANNELS};
use super::ops;
use super::optim::{adam_step, OptimState};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imagecore::NUM_CLASSES;

// Stream separators so the three generators never share a seed.
const CUNET_INIT_STREAM: u64 = 0x0C0F_FEE0_0000_0001;
const PE_INIT_STREAM: u64 = 0x0C0F_FEE0_0000_0002;
const SAMPLER_STREAM: u64 = 0x0C0F_FEE0_0000_0003;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Iterations of U-net-only training before joint training starts.
    pub phase1_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_cls: f64,
    pub lambda_pe: f64,
    pub seed: u64,
    pub arch: CunetArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 2000,
            phase1_iters: 700,
            batch_size: 8,
            lr: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_cls: 1.0,
            lambda_pe: 1.0,
            seed: 0,
            arch: CunetArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_iters == 0 {
            return bad("train.total_iters must be positive");
        }
        if self.phase1_iters > self.total_iters {
            return bad("train.phase1_iters must not exceed train.total_iters");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("ADAM betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be positive");
        }
        if !(self.lambda_cls >= 0.0) || !(self.lambda_pe >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        self.arch.validate()?;
        if self.arch.in_channels != 1 {
            return bad("the U-net consumes one channel (B-mode or pre-enhanced image)");
        }
        Ok(())
    }
}

/// One training example: the feature stack `[B-mode, LPT, LP, BSE]`
/// (channel-major), the binary surface mask and the anatomy class.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f32>,
    pub mask: Vec<f32>,
    pub class_id: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<TrainSample>,
}

impl TrainingSet {
    pub fn new(height: usize, width: usize, samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training set has no samples".into()));
        }
        let hw = height * width;
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != FEATURE_CHANNELS * hw || s.mask.len() != hw {
                return Err(Error::Shape(format!("sample {i} does not match {height}x{width}")));
            }
            if s.class_id as usize >= NUM_CLASSES {
                return Err(Error::Shape(format!("sample {i} has class {}", s.class_id)));
            }
        }
        Ok(TrainingSet {
            height,
            width,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        let hw = self.height * self.width;
        let b = idx.len();
        let (h, w) = (self.height, self.width);
        let mut features = Vec::with_capacity(b * FEATURE_CHANNELS * hw);
        let mut bmode = Vec::with_capacity(b * hw);
        let mut mask = Vec::with_capacity(b * hw);
        let mut classes = Vec::with_capacity(b);
        for &i in idx {
            let s = &self.samples[i];
            features.extend_from_slice(&s.features);
            bmode.extend_from_slice(&s.features[..hw]);
            mask.extend_from_slice(&s.mask);
            classes.push(s.class_id);
        }
        Batch {
            features: Tensor::new([b, FEATURE_CHANNELS, h, w], features).expect("consistent batch"),
            bmode: Tensor::new([b, 1, h, w], bmode).expect("consistent batch"),
            mask,
            classes,
        }
    }
}

struct Batch {
    features: Tensor<f32>,
    bmode: Tensor<f32>,
    mask: Vec<f32>,
    classes: Vec<u8>,
}

/// Draws mini-batches from successive seeded permutations of the data.
struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        EpochSampler {
            rng: ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_STREAM),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.sort_unstable();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub seg_loss: f64,
    pub cls_loss: f64,
    /// Zero throughout the first phase.
    pub pe_loss: f64,
    pub total: f64,
}

pub const LOSS_LOG_HEADER: &str = "iter,seg_loss,cls_loss,pe_loss,total";

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.seg_loss, r.cls_loss, r.pe_loss, r.total);
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

/// Stepwise trainer; [`train_two_phase`] runs it to completion.
pub struct Trainer<'a> {
    set: &'a TrainingSet,
    cfg: TrainConfig,
    pub pe: PeNet<f32>,
    pub cunet: CuNet<f32>,
    cunet_opt: OptimState<f32>,
    pe_opt: Option<OptimState<f32>>,
    sampler: EpochSampler,
    iter: usize,
    log: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(set: &'a TrainingSet, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if set.is_empty() {
            return Err(Error::Empty("training set has no samples".into()));
        }
        Ok(Trainer {
            set,
            cfg: cfg.clone(),
            pe: PeNet::new(FEATURE_CHANNELS, cfg.seed ^ PE_INIT_STREAM),
            cunet: CuNet::new(cfg.arch, cfg.seed ^ CUNET_INIT_STREAM)?,
            cunet_opt: OptimState::new(),
            pe_opt: None,
            sampler: EpochSampler::new(set.len(), cfg.seed),
            iter: 0,
            log: Vec::with_capacity(cfg.total_iters),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    pub fn in_joint_phase(&self) -> bool {
        self.iter >= self.cfg.phase1_iters
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    /// Runs one iteration on the next mini-batch.
    pub fn step(&mut self) -> Result<LossRecord> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        let idx = self.sampler.next_batch(self.cfg.batch_size);
        let batch = self.set.batch(&idx);
        let record = self.step_on(&batch)?;
        self.log.push(record);
        self.iter += 1;
        Ok(record)
    }

    fn step_on(&mut self, batch: &Batch) -> Result<LossRecord> {
        let joint = self.in_joint_phase();
        let it = self.iter;
        self.cunet.zero_grad();
        let pe_out = if joint {
            self.pe.zero_grad();
            Some(self.pe.forward_train(&batch.features)?)
        } else {
            None
        };
        let input = pe_out.as_ref().unwrap_or(&batch.bmode);
        let out = self.cunet.forward_train(input)?;

        let (seg_loss, _, d_seg) = ops::seg_bce_with_logits(out.seg_logits.data(), &batch.mask)?;
        let (cls_loss, _, mut d_cls) = ops::cls_ce_with_logits(&out.class_logits, &batch.classes)?;
        let lc = self.cfg.lambda_cls as f32;
        d_cls.iter_mut().for_each(|g| *g *= lc);
        let (pe_loss, d_pe) = match &pe_out {
            Some(p) => {
                let (l, g) = ops::pe_l2(p.data(), batch.bmode.data())?;
                (l, Some(g))
            }
            None => (0.0, None),
        };
        let total = seg_loss + self.cfg.lambda_cls * cls_loss + self.cfg.lambda_pe * pe_loss;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("seg {seg_loss}, cls {cls_loss}, pe {pe_loss}"),
            });
        }

        let d_seg = Tensor::new(out.seg_logits.shape(), d_seg)?;
        let d_input = self.cunet.backward(&d_seg, &d_cls, joint)?;
        if let (Some(mut d), Some(d_pe)) = (d_input, d_pe) {
            let lp = self.cfg.lambda_pe as f32;
            for (a, &b) in d.data_mut().iter_mut().zip(&d_pe) {
                *a += lp * b;
            }
            self.pe.backward(&d)?;
            let state = self.pe_opt.get_or_insert_with(OptimState::new);
            adam_step(&mut self.pe.trainable_mut(), state, &self.cfg)?;
        }
        adam_step(&mut self.cunet.trainable_mut(), &mut self.cunet_opt, &self.cfg)?;
        Ok(LossRecord {
            iter: it,
            seg_loss,
            cls_loss,
            pe_loss,
            total,
        })
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            pe: self.pe,
            cunet: self.cunet,
            log: self.log,
        }
    }
}

pub struct TrainOutput {
    pub pe: PeNet<f32>,
    pub cunet: CuNet<f32>,
    pub log: Vec<LossRecord>,
}

/// Trains both networks for `cfg.total_iters` iterations; `progress` sees
/// every loss record as it is produced.
pub fn train_two_phase(
    set: &TrainingSet,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(set, cfg)?;
    while !trainer.is_done() {
        let r = trainer.step()?;
        progress(&r);
    }
    Ok(trainer.finish())
}
