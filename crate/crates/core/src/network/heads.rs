//! Feature refinement head (primary output) and the train-time auxiliary head.

use crate::error::{Result, TensorError};
use crate::nn::{Builder, Conv2d, ConvBn, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Var};

use super::decoder::{DecoderFeatures, SkipFusion};

/// Channel and spatial gates of the refinement head.
#[derive(Clone, Debug)]
pub struct RefinementGates {
    /// 1×1, C → C/4, followed by ReLU.
    pub reduce: Conv2d,
    /// 1×1, C/4 → C, followed by sigmoid.
    pub expand: Conv2d,
    /// Depthwise 3×3; its channel mean through a sigmoid is the spatial map.
    pub spatial: Conv2d,
}

pub const CHANNEL_REDUCTION: usize = 4;

impl RefinementGates {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let reduced = c / CHANNEL_REDUCTION;
        Ok(RefinementGates {
            reduce: Conv2d::new(b, "reduce", c, reduced, 1, Conv2dSpec::default(), true)?,
            expand: Conv2d::new(b, "expand", reduced, c, 1, Conv2dSpec::default(), true)?,
            spatial: Conv2d::depthwise(b, "spatial", c, 3, true)?,
        })
    }

    /// `F + F⊙C + F⊙S`.
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: &Var<T>) -> Result<Var<T>> {
        let g = ctx.graph;
        let pooled = g.global_avg_pool(f)?;
        let r = self.reduce.forward(ctx, &pooled)?;
        let r = g.relu(&r)?;
        let e = self.expand.forward(ctx, &r)?;
        let channel_map = g.sigmoid(&e)?;
        let s = self.spatial.forward(ctx, f)?;
        let s = g.mean_axis(&s, 1)?;
        let spatial_map = g.sigmoid(&s)?;
        let fc = g.mul(f, &channel_map)?;
        let fs = g.mul(f, &spatial_map)?;
        let sum = g.add(f, &fc)?;
        g.add(&sum, &fs)
    }

    pub fn zero_init<T: Scalar>(&self, store: &mut crate::tensor::ParamStore<T>) {
        self.expand.zero_init(store);
        self.spatial.zero_init(store);
    }
}

/// Fuses the stride-4 skip with the last GLTB output, optionally refines it
/// and classifies at full resolution.
#[derive(Clone, Debug)]
pub struct RefinementHead {
    pub fuse: SkipFusion,
    pub gates: Option<RefinementGates>,
    pub classifier: Conv2d,
}

impl RefinementHead {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        c: usize,
        num_classes: usize,
        refine: bool,
    ) -> Result<Self> {
        let mut b = b.child(name);
        Ok(RefinementHead {
            fuse: SkipFusion::new(&mut b, "fuse")?,
            gates: if refine {
                Some(RefinementGates::new(&mut b, c)?)
            } else {
                None
            },
            classifier: Conv2d::new(
                &mut b,
                "classifier",
                c,
                num_classes,
                1,
                Conv2dSpec::default(),
                true,
            )?,
        })
    }

    /// Logits `[B, K, 4h, 4w]` from `p1: [B, C, h, w]` and `d2: [B, C, h/2, w/2]`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        p1: &Var<T>,
        d2: &Var<T>,
    ) -> Result<Var<T>> {
        let up = ctx.graph.bilinear_upsample(d2, 2)?;
        if up.shape() != p1.shape() {
            return Err(TensorError::shape(
                "feature_refinement_head",
                format!(
                    "skip {:?} vs upsampled decoder {:?}",
                    p1.shape(),
                    up.shape()
                ),
            ));
        }
        let f = self.fuse.forward(ctx, p1, &up)?;
        let f = match &self.gates {
            Some(gates) => gates.forward(ctx, &f)?,
            None => f,
        };
        let out = self.classifier.forward(ctx, &f)?;
        ctx.graph.bilinear_upsample(&out, 4)
    }
}

/// Auxiliary classifier on the summed GLTB outputs at stride 8.
#[derive(Clone, Debug)]
pub struct AuxHead {
    pub conv: ConvBn,
    pub classifier: Conv2d,
}

impl AuxHead {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        c: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let mut b = b.child(name);
        Ok(AuxHead {
            conv: ConvBn::new(&mut b, "conv", c, c, 3, Conv2dSpec::new(1, 1, 1))?,
            classifier: Conv2d::new(
                &mut b,
                "classifier",
                c,
                num_classes,
                1,
                Conv2dSpec::default(),
                true,
            )?,
        })
    }

    /// `up8(classifier(relu(BN(conv3×3(d2 + up2(d3) + up4(d4))))))`.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        dec: &DecoderFeatures<T>,
    ) -> Result<Var<T>> {
        let g = ctx.graph;
        let u3 = g.bilinear_upsample(&dec.d3, 2)?;
        let u4 = g.bilinear_upsample(&dec.d4, 4)?;
        let a = g.add(&dec.d2, &u3)?;
        let a = g.add(&a, &u4)?;
        let y = self.conv.forward(ctx, &a)?;
        let y = g.relu(&y)?;
        let y = self.classifier.forward(ctx, &y)?;
        g.bilinear_upsample(&y, 8)
    }
}
