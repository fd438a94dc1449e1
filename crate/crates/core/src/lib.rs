//! Numeric kernels for the C-AFBiFPN feature pyramid: a small reverse-mode
//! tensor library, the convolution variants used by the CFE block,
//! bi-level routing attention, the attention-fused BiFPN, brute-force
//! oracles for all of them, and the tensor file format.
//!
//! Feature maps are single-image `[C, H, W]` tensors in float64.

pub mod cfe;
pub mod config;
pub mod conv;
pub mod error;
pub mod fixture;
pub mod format;
pub mod gradcheck;
pub mod oracles;
pub mod pyramid;
pub mod rng;
pub mod routing;
pub mod selfcheck;
pub mod tape;
pub mod tensor;

pub use cfe::{cfe_forward, cfe_receptive_probe, Activation, CfeParams};
pub use config::RunConfig;
pub use conv::{conv2d, deformable_conv2d, depthwise_conv2d, Conv2dParams, DeformableParams};
pub use error::{Error, Result};
pub use oracles::FlopCount;
pub use pyramid::{afbifpn_forward, c_afbifpn_forward, fuse, resize, FusionWeights, PipelineParams, Pyramid, Resize};
pub use rng::RngState;
pub use routing::{ba_forward, BraParams, RoutingResult};
pub use tape::{NodeId, Tape};
pub use tensor::{DType, Tensor};
