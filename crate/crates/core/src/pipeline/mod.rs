//! Block-streaming inference, training, evaluation and experiment harnesses.

mod infer;
mod model;
mod report;
mod train;

pub use infer::{block_ranges, colorize_video, colorize_video_n, split_into_blocks, VideoColorizer};
pub use model::{crop, pad_replicate, padded_dims, stack_ab, stack_l, BlockForward, ColorizationModel, SPATIAL_MULTIPLE};
pub use report::{
    ablate, block_size_sweep, evaluate_clip, evaluate_frames, summarize, Report, TableReport, TableRow, Variant,
};
pub use train::{checkpoint_path, clip_objective, ClipObjective, StepRecord, Trainer, FROZEN_FOR_GENERATOR, GENERATOR_GROUPS};
