//! Core library for CT/CXR COVID-19 screening: dataset manifests, preprocessing,
//! networks, training, evaluation metrics and Grad-CAM explanations.

pub mod cam;
pub mod data;
pub mod evaluate;
pub mod interp;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod synthetic;
pub mod tensor_io;
pub mod train;
