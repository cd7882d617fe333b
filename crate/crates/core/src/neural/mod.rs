//! Small CPU tensor engine and the apodization U-Net.
//!
//! Only the layers the network needs are implemented, each with an explicit
//! backward pass. Activations are `[channels, depth, lateral]` with a batch of one.

pub mod checkpoint;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod unet;

pub use head::{apply_weights, beamform_head, head_loss, HeadConfig, LossDomain, TrainTarget};
pub use layers::{Layer, Mode, Param};
pub use tensor::{DType, Real, Tensor4};
pub use train::{Adam, Model, StepReport, TrainConfig};
pub use unet::{UNet, UNetConfig};
