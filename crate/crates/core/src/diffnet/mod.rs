//! Small dense networks with hand-written reverse-mode gradients and an
//! adaptive-moment optimizer.

mod adam;
mod codec;
mod mlp;

pub use adam::{AdamConfig, LrSchedule, OptimState};
pub use codec::{read_mlp, write_mlp, MLP_FORMAT_VERSION, MLP_MAGIC};
pub use mlp::{mlp_backward, mlp_forward, mlp_init, Activation, GradientTape, Matrix, MlpParams, INIT_BOUND};

pub(crate) mod codec_util {
    pub(crate) use super::codec::{read_f32s, read_u32};
}
