//! Skip projections, weighted skip fusion and the three GLTB stages.

use crate::attention::{AttentionConfig, Gltb};
use crate::error::{Result, TensorError};
use crate::nn::{Builder, Conv2d, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

use super::encoder::EncoderFeatures;

/// Learnable mixing weight of a skip fusion, stored as a logit so the
/// effective weight `sigmoid(raw)` always lies in (0, 1).
#[derive(Clone, Debug)]
pub struct SkipFusion {
    pub raw_alpha: ParamId,
}

impl SkipFusion {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str) -> Result<Self> {
        let mut b = b.child(name);
        Ok(SkipFusion {
            raw_alpha: b.trainable("raw_alpha", Tensor::zeros(&[1]))?,
        })
    }

    /// Effective weight as a `[1, 1, 1, 1]` var.
    pub fn alpha<T: Scalar>(&self, ctx: &Ctx<'_, T>) -> Result<Var<T>> {
        let raw = ctx.param(self.raw_alpha);
        let a = ctx.graph.sigmoid(&raw)?;
        ctx.graph.reshape(&a, &[1, 1, 1, 1])
    }

    pub fn alpha_value<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        let raw = store.value(self.raw_alpha).item();
        T::one() / (T::one() + (-raw).exp())
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        rf: &Var<T>,
        glf: &Var<T>,
    ) -> Result<Var<T>> {
        let alpha = self.alpha(ctx)?;
        weighted_fuse(ctx.graph, rf, glf, &alpha)
    }
}

/// `α·rf + (1 − α)·glf` for a scalar (broadcastable) `alpha`.
pub fn weighted_fuse<T: Scalar>(
    g: &Graph<T>,
    rf: &Var<T>,
    glf: &Var<T>,
    alpha: &Var<T>,
) -> Result<Var<T>> {
    if rf.shape() != glf.shape() {
        return Err(TensorError::shape(
            "weighted_fuse",
            format!("{:?} vs {:?}", rf.shape(), glf.shape()),
        ));
    }
    let one_minus = g.add_scalar(&g.neg(alpha)?, T::one())?;
    let a = g.mul(rf, alpha)?;
    let b = g.mul(glf, &one_minus)?;
    g.add(&a, &b)
}

/// Decoder outputs consumed by the heads.
#[derive(Clone, Debug)]
pub struct DecoderFeatures<T> {
    /// Projected stride-4 encoder feature.
    pub p1: Var<T>,
    /// GLTB outputs at strides 8, 16 and 32.
    pub d2: Var<T>,
    pub d3: Var<T>,
    pub d4: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Bias-free 1×1 projections of e1..e4 to the decoder width.
    pub skip: [Conv2d; 4],
    pub block4: Gltb,
    pub block3: Gltb,
    pub block2: Gltb,
    pub fuse3: SkipFusion,
    pub fuse2: SkipFusion,
}

impl Decoder {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        widths: [usize; 4],
        cfg: AttentionConfig,
    ) -> Result<Self> {
        let mut b = b.child(name);
        let c = cfg.channels;
        let mut proj = Vec::with_capacity(4);
        for (i, &cin) in widths.iter().enumerate() {
            proj.push(Conv2d::new(
                &mut b,
                &format!("skip{}", i + 1),
                cin,
                c,
                1,
                Conv2dSpec::default(),
                false,
            )?);
        }
        Ok(Decoder {
            skip: proj.try_into().expect("four projections"),
            block4: Gltb::new(&mut b, "block4", cfg)?,
            block3: Gltb::new(&mut b, "block3", cfg)?,
            block2: Gltb::new(&mut b, "block2", cfg)?,
            fuse3: SkipFusion::new(&mut b, "fuse3")?,
            fuse2: SkipFusion::new(&mut b, "fuse2")?,
        })
    }

    pub fn skip_project<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        stage: usize,
        e: &Var<T>,
    ) -> Result<Var<T>> {
        self.skip[stage].forward(ctx, e)
    }

    /// Deepest stage first: `d4 = GLTB(p4)`, then each shallower stage fuses
    /// its projected skip with the upsampled deeper output before its GLTB.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        feats: &EncoderFeatures<T>,
    ) -> Result<DecoderFeatures<T>> {
        let p1 = self.skip_project(ctx, 0, &feats.e1)?;
        let p2 = self.skip_project(ctx, 1, &feats.e2)?;
        let p3 = self.skip_project(ctx, 2, &feats.e3)?;
        let p4 = self.skip_project(ctx, 3, &feats.e4)?;
        let d4 = self.block4.forward(ctx, &p4)?;
        let up = ctx.graph.bilinear_upsample(&d4, 2)?;
        let f3 = self.fuse3.forward(ctx, &p3, &up)?;
        let d3 = self.block3.forward(ctx, &f3)?;
        let up = ctx.graph.bilinear_upsample(&d3, 2)?;
        let f2 = self.fuse2.forward(ctx, &p2, &up)?;
        let d2 = self.block2.forward(ctx, &f2)?;
        Ok(DecoderFeatures { p1, d2, d3, d4 })
    }

    pub fn blocks(&self) -> [&Gltb; 3] {
        [&self.block2, &self.block3, &self.block4]
    }
}
