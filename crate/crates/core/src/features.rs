//! The four-channel network input `[B-mode, LPT, LP, BSE]` and inference
//! helpers shared by the command line and the benchmarks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imagecore::{Image2D, LabeledSample, RawArray, NUM_CLASSES};
use crate::neuralnet::{CuNet, PeNet, Scalar, Tensor, TrainSample, TrainingSet, FEATURE_CHANNELS};
use crate::phasefeat::{compute_phase_images, PhaseImages};
use crate::shadow::{compute_shadow, ShadowConfig, ShadowImages};
use crate::specfilter::FilterConfig;

/// Channel names of the feature stack, in stack order.
pub const FEATURE_NAMES: [&str; FEATURE_CHANNELS] = ["bmode", "lpt", "lp", "bse"];

/// A B-mode image with every enhancement derived from it.
#[derive(Debug, Clone)]
pub struct EnhancedImages {
    pub bmode: Image2D,
    pub phase: PhaseImages,
    pub shadow: ShadowImages,
}

impl EnhancedImages {
    pub fn channels(&self) -> [&Image2D; FEATURE_CHANNELS] {
        [&self.bmode, &self.phase.lpt, &self.phase.lp, &self.shadow.bse]
    }

    /// `(4, rows, cols)` stack for the raw container.
    pub fn stack(&self) -> RawArray {
        RawArray::stack_images(&self.channels()).expect("channels share dimensions")
    }

    /// Channel-major `f32` values of the stack.
    pub fn to_f32(&self) -> Vec<f32> {
        self.channels()
            .iter()
            .flat_map(|im| im.data().iter().map(|&v| v as f32))
            .collect()
    }
}

pub fn enhance(us: &Image2D, filter: &FilterConfig, shadow: &ShadowConfig) -> Result<EnhancedImages> {
    let phase = compute_phase_images(us, filter)?;
    let shadow = compute_shadow(us, &phase.lp, shadow)?;
    Ok(EnhancedImages {
        bmode: us.clone(),
        phase,
        shadow,
    })
}

pub fn training_sample(sample: &LabeledSample, features: Vec<f32>) -> Result<TrainSample> {
    if features.len() != FEATURE_CHANNELS * sample.image.len() {
        return Err(Error::Shape("feature stack does not match the image".into()));
    }
    Ok(TrainSample {
        features,
        mask: sample.gt_mask.data().iter().map(|&v| v as f32).collect(),
        class_id: sample.class_id,
    })
}

/// Enhances every sample (in parallel) and assembles a training set.
pub fn build_training_set(samples: &[&LabeledSample], filter: &FilterConfig, shadow: &ShadowConfig) -> Result<TrainingSet> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("no samples to train on".into()))?;
    let (h, w) = first.image.dims();
    let out = samples
        .par_iter()
        .map(|s| training_sample(s, enhance(&s.image, filter, shadow)?.to_f32()))
        .collect::<Result<Vec<_>>>()?;
    TrainingSet::new(h, w, out)
}

pub fn image_tensor<T: Scalar>(image: &Image2D) -> Tensor<T> {
    Tensor::new(
        [1, 1, image.rows(), image.cols()],
        image.data().iter().map(|&v| T::of(v)).collect(),
    )
    .expect("image dimensions")
}

pub fn stack_tensor<T: Scalar>(features: &[f32], rows: usize, cols: usize) -> Result<Tensor<T>> {
    Tensor::new(
        [1, FEATURE_CHANNELS, rows, cols],
        features.iter().map(|&v| T::of(v as f64)).collect(),
    )
}

fn tensor_image<T: Scalar>(t: &Tensor<T>, like: &Image2D) -> Image2D {
    Image2D::new(
        like.rows(),
        like.cols(),
        like.spacing(),
        t.data().iter().map(|v| v.f64()).collect(),
    )
    .expect("network output matches input size")
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probmap: Image2D,
    pub class_probs: [f64; NUM_CLASSES],
    pub class_id: u8,
    /// Pre-enhanced image when the pre-enhancing net ran.
    pub enhanced: Option<Image2D>,
}

fn finish_prediction<T: Scalar>(cunet: &CuNet<T>, input: &Tensor<T>, like: &Image2D, enhanced: Option<Image2D>) -> Result<Prediction> {
    let p = cunet.predict(input)?;
    let mut class_probs = [0.0; NUM_CLASSES];
    for (dst, v) in class_probs.iter_mut().zip(&p.class_probs) {
        *dst = v.f64();
    }
    let class_id = class_probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > class_probs[best] { i } else { best }) as u8;
    Ok(Prediction {
        probmap: tensor_image(&p.probmap, like),
        class_probs,
        class_id,
        enhanced,
    })
}

/// U-net alone on the raw B-mode image; no phase features are computed.
pub fn predict_bmode<T: Scalar>(cunet: &CuNet<T>, image: &Image2D) -> Result<Prediction> {
    finish_prediction(cunet, &image_tensor(image), image, None)
}

/// Pre-enhancing net on a precomputed feature stack, then the U-net.
pub fn predict_with_pe<T: Scalar>(
    pe: &PeNet<T>,
    cunet: &CuNet<T>,
    image: &Image2D,
    features: &[f32],
) -> Result<Prediction> {
    let enhanced = pe.predict(&stack_tensor(features, image.rows(), image.cols())?)?;
    let enhanced_image = tensor_image(&enhanced, image);
    finish_prediction(cunet, &enhanced, image, Some(enhanced_image))
}
