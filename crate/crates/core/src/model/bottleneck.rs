//! One-class bottleneck embedding: fuses the three teacher levels into a
//! single compact stride-16 representation the decoder reconstructs from.

use super::Widths;
use super::backbone::ConvBlock;
use burn::prelude::*;

#[derive(Module, Debug)]
pub struct Bottleneck<B: Backend> {
    f1_down1: ConvBlock<B>,
    f1_down2: ConvBlock<B>,
    f2_down: ConvBlock<B>,
    fuse1: ConvBlock<B>,
    fuse2: ConvBlock<B>,
}

impl<B: Backend> Bottleneck<B> {
    pub fn init(widths: &Widths, device: &B::Device) -> Self {
        let [c1, c2, c3] = widths.levels;
        Bottleneck {
            f1_down1: ConvBlock::init(c1, c2, 3, 2, 1, true, device),
            f1_down2: ConvBlock::init(c2, c3, 3, 2, 1, true, device),
            f2_down: ConvBlock::init(c2, c3, 3, 2, 1, true, device),
            fuse1: ConvBlock::init(3 * c3, c3, 1, 1, 1, true, device),
            fuse2: ConvBlock::init(c3, c3, 3, 1, 1, false, device),
        }
    }

    /// Teacher features fine-to-coarse -> stride-16 embedding.
    pub fn forward(&self, feats: &[Tensor<B, 4>; 3]) -> Tensor<B, 4> {
        let [f1, f2, f3] = feats;
        let a = self.f1_down2.forward(self.f1_down1.forward(f1.clone()));
        let b = self.f2_down.forward(f2.clone());
        let cat = Tensor::cat(vec![a, b, f3.clone()], 1);
        self.fuse2.forward(self.fuse1.forward(cat))
    }
}
