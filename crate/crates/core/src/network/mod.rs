//! Full UNetFormer: ResNet-18 encoder, GLTB decoder, refinement head and an
//! optional train-time auxiliary head.

pub mod config;
pub mod cost;
pub mod decoder;
pub mod encoder;
pub mod heads;

pub use config::{ModelConfig, WidthPreset};
pub use cost::{count_params, estimate_macs, layer_table, LayerCost};
pub use decoder::{weighted_fuse, Decoder, DecoderFeatures, SkipFusion};
pub use encoder::{BasicBlock, Encoder, EncoderFeatures, ENCODER_STRIDE};
pub use heads::{AuxHead, RefinementGates, RefinementHead};

use crate::error::Result;
use crate::nn::{Builder, Ctx, Mode};
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Network outputs; `aux` is present only for train-mode passes with the
/// auxiliary head enabled.
#[derive(Clone, Debug)]
pub struct Output<T> {
    pub logits: Var<T>,
    pub aux: Option<Var<T>>,
}

/// Layer structure of the network. Parameter values live in a
/// [`ParamStore`], addressed by the ids held here.
#[derive(Clone, Debug)]
pub struct UNetFormer {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: RefinementHead,
    pub aux: Option<AuxHead>,
}

impl UNetFormer {
    pub fn build<T: Scalar>(cfg: ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.encoder_widths();
        let c = cfg.decoder_channels();
        let encoder = Encoder::new(b, "encoder", cfg.input_channels, widths)?;
        let decoder = Decoder::new(b, "decoder", widths, cfg.attention)?;
        let head = RefinementHead::new(b, "head", c, cfg.num_classes, cfg.use_frh)?;
        let aux = if cfg.use_aux_head {
            Some(AuxHead::new(b, "aux_head", c, cfg.num_classes)?)
        } else {
            None
        };
        Ok(UNetFormer {
            cfg,
            encoder,
            decoder,
            head,
            aux,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: &Var<T>) -> Result<Output<T>> {
        let feats = self.encoder.forward(ctx, image)?;
        let dec = self.decoder.forward(ctx, &feats)?;
        let logits = self.head.forward(ctx, &dec.p1, &dec.d2)?;
        let aux = match (&self.aux, ctx.mode) {
            (Some(aux), Mode::Train) => Some(aux.forward(ctx, &dec)?),
            _ => None,
        };
        Ok(Output { logits, aux })
    }

    /// Zeroes the final projections of every GLTB residual branch.
    pub fn zero_residual_projections<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for block in self.decoder.blocks() {
            block.zero_residual_projections(store);
        }
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: UNetFormer,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with weights drawn from the `init` stream of `seeds`.
    pub fn new(cfg: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeds.stream("init");
        let net = UNetFormer::build(cfg, &mut Builder::new(&mut store, &mut rng))?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn forward(&mut self, graph: &Graph<T>, image: &Var<T>, mode: Mode) -> Result<Output<T>> {
        let mut ctx = Ctx::new(graph, &mut self.store, mode);
        self.net.forward(&mut ctx, image)
    }

    /// Eval-mode logits without recording a graph.
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let x = g.constant(image.clone());
        let out = self.forward(&g, &x, Mode::Eval)?;
        Ok(out.logits.into_tensor())
    }
}
