use std::ops::Range;

use chromalink_autograd::{Graph, Scalar, Tensor};

use super::model::{crop, pad_replicate, padded_dims, stack_l, ColorizationModel};
use crate::colorizer::assemble_lab;
use crate::colorspace::LabFrame;
use crate::error::{ensure_shape, Error, Result};
use crate::linkage::LinkageState;

/// Index ranges of consecutive blocks of at most `n` frames; the last block
/// keeps the remainder.
pub fn block_ranges(len: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if len == 0 {
        return Err(Error::Input("empty video".into()));
    }
    if n == 0 {
        return Err(Error::Input("block size must be ≥ 1".into()));
    }
    Ok((0..len).step_by(n).map(|s| s..(s + n).min(len)).collect())
}

pub fn split_into_blocks<F>(frames: &[F], n: usize) -> Result<Vec<&[F]>> {
    Ok(block_ranges(frames.len(), n)?.into_iter().map(|r| &frames[r]).collect())
}

/// Streams blocks of one video through the model, carrying the linkage
/// state from block to block.
pub struct VideoColorizer<'m, T> {
    model: &'m ColorizationModel<T>,
    ref_lab: Tensor<T>,
    dims: (usize, usize),
    state: LinkageState<T>,
    next_block: usize,
}

impl<'m, T: Scalar> VideoColorizer<'m, T> {
    pub fn new(model: &'m ColorizationModel<T>, reference: &LabFrame<T>) -> Result<Self> {
        let (h, w) = (reference.height(), reference.width());
        let (hp, wp) = padded_dims(h, w);
        let ref_lab = pad_replicate(&reference.to_lab_tensor(), hp, wp).reshape(&[1, 3, hp, wp])?;
        Ok(VideoColorizer { model, ref_lab, dims: (h, w), state: LinkageState::empty(), next_block: 0 })
    }

    /// Resumes from a saved state.
    pub fn with_state(mut self, state: LinkageState<T>) -> Self {
        self.next_block = state.last_block.map_or(0, |b| b + 1);
        self.state = state;
        self
    }

    pub fn state(&self) -> &LinkageState<T> {
        &self.state
    }

    pub fn blocks_done(&self) -> usize {
        self.next_block
    }

    /// Colorizes the next block. Failures carry the block index.
    pub fn push_block(&mut self, frames: &[LabFrame<T>]) -> Result<Vec<LabFrame<T>>> {
        let index = self.next_block;
        let out = self.run(frames, index).map_err(|e| Error::Block { index, source: Box::new(e) })?;
        self.next_block += 1;
        Ok(out)
    }

    fn run(&mut self, frames: &[LabFrame<T>], index: usize) -> Result<Vec<LabFrame<T>>> {
        let (h, w) = self.dims;
        let l = stack_l(frames)?;
        ensure_shape(l.shape()[2..] == [h, w], || {
            format!("frames are {}×{}, reference is {w}×{h}", l.dim(3), l.dim(2))
        })?;
        let (hp, wp) = padded_dims(h, w);
        let g = Graph::with_params(&self.model.store);
        let info = match (&self.state.info, self.model.config.uses_linkage()) {
            (Some(i), true) => Some(g.constant(i.clone())),
            _ => None,
        };
        let out = self.model.forward_block(&g, g.constant(pad_replicate(&l, hp, wp)), g.constant(self.ref_lab.clone()), info)?;
        if self.model.config.uses_linkage() {
            if let Some(ho) = out.corr.ho {
                self.state.store_value(&g.value(ho), index)?;
            }
        }
        let ab = crop(&g.value(out.ab), h, w);
        assemble_lab(&l, &ab)
    }
}

/// Colorizes a whole video with blocks of `n` frames.
pub fn colorize_video_n<T: Scalar>(
    model: &ColorizationModel<T>,
    frames: &[LabFrame<T>],
    reference: &LabFrame<T>,
    n: usize,
) -> Result<Vec<LabFrame<T>>> {
    let blocks = split_into_blocks(frames, n)?;
    let mut vc = VideoColorizer::new(model, reference)?;
    let mut out = Vec::with_capacity(frames.len());
    for b in blocks {
        out.extend(vc.push_block(b)?);
    }
    Ok(out)
}

/// Colorizes a whole video with the configured block size.
pub fn colorize_video<T: Scalar>(model: &ColorizationModel<T>, frames: &[LabFrame<T>], reference: &LabFrame<T>) -> Result<Vec<LabFrame<T>>> {
    colorize_video_n(model, frames, reference, model.config.block_size)
}
