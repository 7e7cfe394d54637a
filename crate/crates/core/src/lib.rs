//! Self-training for semantic segmentation with uncertainty-rectified
//! pseudo labels, on a small CPU autodiff engine and synthetic data.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod image;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pnm;
pub mod pseudo;
pub mod svg;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use config::{ExperimentConfig, LossMode, PseudoSource};
pub use error::{Error, Result};
pub use eval::{iou_report, ConfusionMatrix, IoUReport};
pub use graph::{Graph, Mode, Var, PROB_FLOOR};
pub use image::{Image, LabelMap};
pub use loss::{Distance, RectifiedLossConfig, VarianceGrad};
pub use model::{NetConfig, ProbMap, TwoHeadSegNet};
pub use pseudo::{PseudoLabelSet, PseudoLabels};
pub use synthdata::{DomainParams, LabeledImage, ShiftPreset};
pub use tensor::Tensor;
pub use train::{adapt, poly_lr, pretrain_source, History};
pub use uncertainty::{CertaintyMap, GapReport, VarianceMap};
