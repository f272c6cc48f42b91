//! Student decoder: mirrors the teacher in reverse, reconstructing the
//! three feature levels from the bottleneck embedding.

use super::backbone::{ConvBlock, ResidualBlock};
use super::{StageStyle, Widths};
use burn::prelude::*;
use burn::tensor::module::interpolate;
use burn::tensor::ops::{InterpolateMode, InterpolateOptions};

/// Learned 2x upsampling: nearest-neighbour resize followed by a 3x3
/// conv + BN + ReLU. This matches the expressivity of a stride-2 transposed
/// conv without its checkerboard artefacts, and nearest resizing is the only
/// interpolation mode with a backward pass on every backend used here.
#[derive(Module, Debug)]
struct UpBlock<B: Backend> {
    conv: ConvBlock<B>,
}

impl<B: Backend> UpBlock<B> {
    fn init(c_in: usize, c_out: usize, device: &B::Device) -> Self {
        UpBlock {
            conv: ConvBlock::init(c_in, c_out, 3, 1, 1, true, device),
        }
    }

    fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let [_, _, h, w] = x.dims();
        let up = interpolate(
            x,
            [2 * h, 2 * w],
            InterpolateOptions::new(InterpolateMode::Nearest),
        );
        self.conv.forward(up)
    }
}

#[derive(Module, Debug)]
pub struct StudentDecoder<B: Backend> {
    block3: ResidualBlock<B>,
    up2: UpBlock<B>,
    block2: ResidualBlock<B>,
    up1: UpBlock<B>,
    block1: ResidualBlock<B>,
}

impl<B: Backend> StudentDecoder<B> {
    pub fn init(widths: &Widths, style: StageStyle, device: &B::Device) -> Self {
        let [c1, c2, c3] = widths.levels;
        StudentDecoder {
            block3: ResidualBlock::init(c3, c3, 1, style, device),
            up2: UpBlock::init(c3, c2, device),
            block2: ResidualBlock::init(c2, c2, 1, style, device),
            up1: UpBlock::init(c2, c1, device),
            block1: ResidualBlock::init(c1, c1, 1, style, device),
        }
    }

    /// Stride-16 embedding -> reconstructions fine-to-coarse, matching the
    /// teacher's three levels.
    pub fn forward(&self, embedding: Tensor<B, 4>) -> [Tensor<B, 4>; 3] {
        let s3 = self.block3.forward(embedding);
        let s2 = self.block2.forward(self.up2.forward(s3.clone()));
        let s1 = self.block1.forward(self.up1.forward(s2.clone()));
        [s1, s2, s3]
    }
}
