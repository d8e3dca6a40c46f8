//! Neural-network engine: tensors, a small reverse-mode differentiation
//! graph, segmentation and classification model builders, losses (including
//! the boundary-weighted variant), the Adam optimizer with a halving
//! learning-rate schedule, model file I/O, training loops, and a
//! finite-difference gradient checker.

pub mod boundary;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;

pub use boundary::boundary_weights;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{Graph, GraphBuilder, Param};
pub use loss::{binary_logloss, softmax_ce, weighted_boundary_logloss};
pub use models::{
    build_classifier, build_tnet, build_unet, load_model, save_model, ArchDescriptor,
    ClassifierSpec, ModelBundle, TNetSpec,
};
pub use optim::Adam;
pub use tensor::Tensor;
pub use train::{
    predict_class_probs, predict_probmap, train_classifier, train_segmenter, TrainConfig,
    TrainLog,
};
