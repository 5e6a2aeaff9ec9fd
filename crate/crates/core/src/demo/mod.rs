//! Toy dense-prediction tasks and small networks with a swappable resampler.

mod data;
mod net;
mod train;

pub use data::{make_dataset, stack, Sample, TaskKind, ToyTask};
pub use net::{
    FineSource, Layer, MiniBottleneck, MiniFpn, MiniNet, Resampler, Seq, SlotSpec, DEFAULT_WIDTH,
};
pub use train::{
    compare_operators, evaluate, iou, loss_and_grad, mean_sd, psnr, train, train_with_slot, ComparisonRow,
    ComparisonTable, TrainOptions, TrainRunReport,
};
