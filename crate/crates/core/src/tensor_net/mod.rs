//! Small double-precision compute core: shared per-point maps, the
//! hierarchical point encoder-decoder, hand-written backpropagation, Adam and
//! finite-difference gradient checking.

mod adam;
mod encdec;
mod gradcheck;
mod layer;
mod tensor;
mod train;

pub use adam::{adam_step, AdamState};
pub use encdec::{
    ball_query, canonical_fps, EncDecCache, EncoderDecoderConfig, EncoderDecoderParams, FeaturePropagation,
    InputFeatures, PointHierarchy, SetAbstraction, FULL_DIMS, FULL_POINT_COUNTS, FULL_RADII_MM,
};
pub use gradcheck::{finite_diff_check, finite_diff_check_against};
pub use layer::{Activation, LayerCache, LayerParams, LayerStack, Parameters, StackCache};
pub use tensor::Tensor2;
pub use train::{train, TrainConfig, Trainable};
