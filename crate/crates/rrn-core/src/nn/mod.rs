//! Minimal reverse-mode neural engine: flat tensors, a small layer set with
//! hand-written backward passes, three dropout regimes and Adam.

pub mod adam;
pub mod check;
pub mod dropout;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{build_stack, Layer, LayerSpec, Mode, Stack};
pub use tensor::{Param, Tensor};
