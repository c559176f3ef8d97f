//! Cross-view instance segmentation: a frozen two-view geometry encoder, the
//! union segmentation head (mask prompt fusion, point-guided prediction and
//! iterative mask refinement), its self-supervised trainer, and a synthetic
//! two-view benchmark to exercise all of it at desk scale.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod points;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod transform;

pub use config::{Ablation, RunConfig};
pub use data::{iou, Frame, Image, MaskGrid, Point, PointSet};
pub use error::{Error, Result};
