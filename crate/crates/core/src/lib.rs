//! Bone surface enhancement, segmentation and classification for B-mode
//! ultrasound.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`phasefeat`] and [`shadow`] turn a B-mode scan into the local phase
//!    tensor image (LPT), the local phase bone image (LP) and the bone shadow
//!    enhanced image (BSE), built on the spectral tools in [`specfilter`];
//! 2. [`neuralnet`] holds a small CPU tensor engine, the pre-enhancing net
//!    and the classification U-net, and the two-phase training loop;
//! 3. [`evalmetrics`] extracts one surface point per scanline and scores it
//!    against ground truth (AED, recall, precision, F-score);
//! 4. [`synthdata`] generates seeded phantoms with exact ground truth.

pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod imagecore;
pub mod neuralnet;
pub mod phasefeat;
pub mod shadow;
pub mod solver;
pub mod specfilter;
pub mod synthdata;

pub use error::{Error, Result};
pub use imagecore::{Image2D, LabeledSample, Spacing};
