pub mod conv;
mod gemm;
pub mod init;
pub mod layers;
pub mod pool;
pub mod resize;
pub mod spectral;

pub use conv::ConvSpec;
pub use layers::{gated_transposed_conv3d, ConvParams, LEAKY_SLOPE};
pub use resize::ResizeMode;
pub use spectral::{SpectralMode, SpectralState};
