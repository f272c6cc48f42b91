//! Teacher encoder: a residual CNN producing features at strides 4, 8, 16.

use super::fastconv::shift_conv2d;
use super::{StageStyle, Widths};
use burn::nn::conv::{Conv2d, Conv2dConfig};
use burn::nn::pool::{MaxPool2d, MaxPool2dConfig};
use burn::nn::{BatchNorm, BatchNormConfig, PaddingConfig2d, Relu};
use burn::prelude::*;

/// Grouped convolution built from one plain conv per group. The backend's
/// native grouped conv is avoided on purpose: its input gradient is wrong
/// on the ndarray backend (off by a constant factor), which this slicing
/// formulation sidesteps while computing the same function. The forward
/// pass itself goes through [`shift_conv2d`] so the autodiff backward is
/// composed of matmuls instead of the backend's slow transposed conv.
#[derive(Module, Debug)]
pub struct GroupedConv2d<B: Backend> {
    convs: Vec<Conv2d<B>>,
    group_in: usize,
    stride: usize,
    pad: usize,
}

impl<B: Backend> GroupedConv2d<B> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        device: &B::Device,
    ) -> Self {
        assert!(c_in % groups == 0 && c_out % groups == 0);
        let pad = kernel / 2;
        let convs = (0..groups)
            .map(|_| {
                Conv2dConfig::new([c_in / groups, c_out / groups], [kernel, kernel])
                    .with_stride([stride, stride])
                    .with_padding(PaddingConfig2d::Explicit(pad, pad))
                    .with_bias(false)
                    .init(device)
            })
            .collect();
        GroupedConv2d {
            convs,
            group_in: c_in / groups,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        if self.convs.len() == 1 {
            return shift_conv2d(x, self.convs[0].weight.val(), None, self.stride, self.pad);
        }
        let outs = self
            .convs
            .iter()
            .enumerate()
            .map(|(g, conv)| {
                shift_conv2d(
                    x.clone().narrow(1, g * self.group_in, self.group_in),
                    conv.weight.val(),
                    None,
                    self.stride,
                    self.pad,
                )
            })
            .collect();
        Tensor::cat(outs, 1)
    }
}

/// conv -> batchnorm (-> relu) unit shared by the encoder, bottleneck and
/// attention modules.
#[derive(Module, Debug)]
pub struct ConvBlock<B: Backend> {
    pub conv: GroupedConv2d<B>,
    pub bn: BatchNorm<B, 2>,
    pub relu: Option<Relu>,
}

impl<B: Backend> ConvBlock<B> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
        device: &B::Device,
    ) -> Self {
        ConvBlock {
            conv: GroupedConv2d::init(c_in, c_out, kernel, stride, groups, device),
            bn: BatchNormConfig::new(c_out).init(device),
            relu: relu.then_some(Relu::new()),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let x = self.bn.forward(self.conv.forward(x));
        match &self.relu {
            Some(r) => r.forward(x),
            None => x,
        }
    }
}

/// Basic residual block; the grouped style uses cardinality-4 3x3 convs.
#[derive(Module, Debug)]
pub struct ResidualBlock<B: Backend> {
    conv1: ConvBlock<B>,
    conv2: ConvBlock<B>,
    proj: Option<ConvBlock<B>>,
    relu: Relu,
}

impl<B: Backend> ResidualBlock<B> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        stride: usize,
        style: StageStyle,
        device: &B::Device,
    ) -> Self {
        let groups = match style {
            StageStyle::Grouped => 4,
            StageStyle::Plain => 1,
        };
        let proj = (stride != 1 || c_in != c_out)
            .then(|| ConvBlock::init(c_in, c_out, 1, stride, 1, false, device));
        ResidualBlock {
            conv1: ConvBlock::init(c_in, c_out, 3, stride, 1, true, device),
            conv2: ConvBlock::init(c_out, c_out, 3, 1, groups, false, device),
            proj,
            relu: Relu::new(),
        }
    }

    pub fn forward(&self, x: Tensor<B, 4>) -> Tensor<B, 4> {
        let identity = match &self.proj {
            Some(p) => p.forward(x.clone()),
            None => x.clone(),
        };
        let out = self.conv2.forward(self.conv1.forward(x));
        self.relu.forward(out + identity)
    }
}

#[derive(Module, Debug)]
pub struct Teacher<B: Backend> {
    stem: ConvBlock<B>,
    pool: MaxPool2d,
    stage1: Vec<ResidualBlock<B>>,
    stage2: Vec<ResidualBlock<B>>,
    stage3: Vec<ResidualBlock<B>>,
}

impl<B: Backend> Teacher<B> {
    pub fn init(widths: &Widths, style: StageStyle, device: &B::Device) -> Self {
        let [c1, c2, c3] = widths.levels;
        let stage = |c_in: usize, c_out: usize, stride: usize| {
            vec![
                ResidualBlock::init(c_in, c_out, stride, style, device),
                ResidualBlock::init(c_out, c_out, 1, style, device),
            ]
        };
        Teacher {
            stem: ConvBlock::init(3, widths.stem, 7, 2, 1, true, device),
            pool: MaxPool2dConfig::new([3, 3])
                .with_strides([2, 2])
                .with_padding(PaddingConfig2d::Explicit(1, 1))
                .init(),
            stage1: stage(widths.stem, c1, 1),
            stage2: stage(c1, c2, 2),
            stage3: stage(c2, c3, 2),
        }
    }

    /// Features fine-to-coarse: strides 4, 8, 16 wrt the input.
    pub fn forward(&self, x: Tensor<B, 4>) -> [Tensor<B, 4>; 3] {
        let x = self.pool.forward(self.stem.forward(x));
        let mut f1 = x;
        for block in &self.stage1 {
            f1 = block.forward(f1);
        }
        let mut f2 = f1.clone();
        for block in &self.stage2 {
            f2 = block.forward(f2);
        }
        let mut f3 = f2.clone();
        for block in &self.stage3 {
            f3 = block.forward(f3);
        }
        [f1, f2, f3]
    }
}
