//! Registration and fusion networks on top of candle tensors.

pub mod fusion;
pub mod layers;
pub mod params;
pub mod registration;

pub use fusion::{FusionNet, TcfConfig};
pub use params::{Init, ParamStore};
pub use registration::{DffMode, PffMode, PyramidConfig, RegistrationNet, RegistrationOutput, Translator};
