//! 3D U-Net with unpadded convolutions in the first resolution levels.

mod checkpoint;
mod model;
mod shape;

pub use checkpoint::{load_checkpoint, CHECKPOINT_VERSION, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use model::{init_weights, Recorded, UNetModel};
pub use shape::{
    compute_output_shape, estimate_activation_memory, validate_input_shape, Activation, ConvSpec,
    MemoryEstimate, ShapeCheck, UNetConfig,
};
