//! Small deterministic compute core: tensors, layers with hand-written
//! backward passes, losses, RMSprop, checkpoints and a gradient checker.
//!
//! Everything runs in `f64` on a single thread; identical inputs give
//! bit-identical outputs.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_gradcheck, GradcheckReport};
pub use layers::{
    conv2d, conv2d_backward, dense, dense_backward, relu, sigmoid, unit_normalize, LayerGrads,
    LayerKind, LayerParams,
};
pub use loss::{bce_loss, l2_loss};
pub use optim::{OptimizerState, RmspropConfig};
pub use tensor::Tensor;
