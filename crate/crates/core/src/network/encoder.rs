//! ResNet-18 style encoder producing features at strides 4, 8, 16 and 32.

use crate::error::{Result, TensorError};
use crate::nn::{Builder, ConvBn, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Var};

/// Basic residual block: two 3×3 conv-BN pairs with an identity or 1×1
/// projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub downsample: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut b = b.child(name);
        let downsample = if stride != 1 || cin != cout {
            Some(ConvBn::new(
                &mut b,
                "downsample",
                cin,
                cout,
                1,
                Conv2dSpec::new(stride, 0, 1),
            )?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: ConvBn::new(&mut b, "conv1", cin, cout, 3, Conv2dSpec::new(stride, 1, 1))?,
            conv2: ConvBn::new(&mut b, "conv2", cout, cout, 3, Conv2dSpec::new(1, 1, 1))?,
            downsample,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv1.forward(ctx, x)?;
        let y = ctx.graph.relu(&y)?;
        let y = self.conv2.forward(ctx, &y)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(ctx, x)?,
            None => x.clone(),
        };
        let y = ctx.graph.add(&y, &shortcut)?;
        ctx.graph.relu(&y)
    }
}

/// The four multi-scale encoder outputs.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    /// Stride 4.
    pub e1: Var<T>,
    /// Stride 8.
    pub e2: Var<T>,
    /// Stride 16.
    pub e3: Var<T>,
    /// Stride 32.
    pub e4: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBn,
    pub stages: [Vec<BasicBlock>; 4],
}

pub const ENCODER_STRIDE: usize = 32;

impl Encoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        widths: [usize; 4],
    ) -> Result<Self> {
        let mut b = b.child(name);
        let stem = ConvBn::new(
            &mut b,
            "stem",
            in_channels,
            widths[0],
            7,
            Conv2dSpec::new(2, 3, 1),
        )?;
        let mut cin = widths[0];
        let mut stages: [Vec<BasicBlock>; 4] = Default::default();
        for (i, (&cout, stage)) in widths.iter().zip(stages.iter_mut()).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut sb = b.child(&format!("layer{}", i + 1));
            stage.push(BasicBlock::new(&mut sb, "0", cin, cout, stride)?);
            stage.push(BasicBlock::new(&mut sb, "1", cout, cout, 1)?);
            cin = cout;
        }
        Ok(Encoder { stem, stages })
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: &Var<T>,
    ) -> Result<EncoderFeatures<T>> {
        let [_, _, h, w] = image.value().dims4("encoder")?;
        if h < ENCODER_STRIDE
            || w < ENCODER_STRIDE
            || h % ENCODER_STRIDE != 0
            || w % ENCODER_STRIDE != 0
        {
            return Err(TensorError::invalid(
                "encoder",
                format!("input {h}x{w} must be at least 32x32 with both sides divisible by 32"),
            ));
        }
        let x = self.stem.forward(ctx, image)?;
        let x = ctx.graph.relu(&x)?;
        let mut x = ctx.graph.max_pool2d(&x, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, &x)?;
            }
            outs.push(x.clone());
        }
        let [e1, e2, e3, e4]: [Var<T>; 4] = outs.try_into().expect("four stages");
        Ok(EncoderFeatures { e1, e2, e3, e4 })
    }
}
