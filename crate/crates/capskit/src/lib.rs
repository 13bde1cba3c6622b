//! Shift-equivariant down/upsampling for segmentation networks.
//!
//! This crate implements a component-attention polyphase sampling layer pair
//! (CAPD for downsampling, CAPU for upsampling) inside a small U-Net, along
//! with the baseline samplers it is measured against (max pooling, blur
//! pooling, max-norm polyphase selection), handwritten reverse-mode gradients
//! for the whole stack, shift-equivalence metrics (mvIoU / mvda), a synthetic
//! defect dataset protocol, and an experiment runner.
//!
//! Start with the `examples/` directory: each example is a runnable
//! demonstration of one capability (the 1-D sampling demo, circular-shift
//! equivalence, gradient checking, dataset generation, training and
//! evaluation, ablation sweeps). The same functionality is scriptable through
//! the `capskit` binary.

pub mod caps;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod runner;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor4};
