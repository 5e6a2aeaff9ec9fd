//! Neural-network building blocks with hand-written backward passes.

mod act;
mod conv;
mod normalize;
mod params;
mod shuffle;

pub use act::{
    affine_norm, affine_norm_backward, affine_norm_forward, relu, relu_backward, AffineNormCache,
    AffineNormParams, NORM_EPS,
};
pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_with, conv_output_size, transposed_conv_backward,
    transposed_conv_forward, transposed_output_size,
};
pub use normalize::{
    sigmoid_group, sigmoid_group_backward, sigmoid_norm_group, sigmoid_norm_group_backward,
    softmax_group, softmax_group_backward,
};
pub use params::{sgd_step, ConvLayerParams, ParamView, Sgd, Trainable};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

use rayon::prelude::*;

/// Which loop nest executes an op. Both produce bitwise-identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPath {
    /// Reference loop nest, one output element at a time.
    Direct,
    /// Register/cache blocked variant with the same per-element reduction order.
    #[default]
    Blocked,
}

/// Below this many multiply-adds an op runs on the calling thread.
pub(crate) const PAR_WORK_THRESHOLD: usize = 1 << 15;

/// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `data`, in parallel
/// when `work` is large enough. Each chunk is written by exactly one task, so
/// results do not depend on the thread count.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    if work >= PAR_WORK_THRESHOLD {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
