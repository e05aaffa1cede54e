//! Analytic per-layer parameter and multiply-accumulate accounting.
//!
//! Convolutions cost `H'·W'·Cout·(Cin/groups)·kh·kw` MACs; each window
//! attention adds `2·windows·w⁴·C` for the two attention products. Batch
//! norm, pooling, activations, resizing and elementwise ops count as zero.

use serde::Serialize;

use crate::error::{Result, TensorError};

use super::config::ModelConfig;
use super::encoder::ENCODER_STRIDE;
use super::heads::CHANNEL_REDUCTION;
use crate::attention::MLP_RATIO;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Only evaluated in train mode (auxiliary head).
    pub train_only: bool,
}

struct Table {
    rows: Vec<LayerCost>,
    train_only: bool,
}

impl Table {
    fn push(&mut self, name: String, params: usize, macs: usize) {
        self.rows.push(LayerCost {
            name,
            params: params as u64,
            macs: macs as u64,
            train_only: self.train_only,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
        hw: (usize, usize),
    ) {
        let weights = cout * (cin / groups) * k * k;
        let params = weights + if bias { cout } else { 0 };
        self.push(name.to_string(), params, weights * hw.0 * hw.1);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.push(name.to_string(), 2 * c, 0);
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, hw: (usize, usize)) {
        self.conv(&format!("{name}.conv"), cin, cout, k, 1, false, hw);
        self.bn(&format!("{name}.bn"), cout);
    }

    fn gltb(&mut self, name: &str, cfg: &ModelConfig, hw: (usize, usize)) {
        let a = &cfg.attention;
        let c = a.channels;
        let w = a.window_size;
        self.bn(&format!("{name}.norm1"), c);
        let attn = format!("{name}.attn");
        self.conv_bn(&format!("{attn}.local.conv3"), c, c, 3, hw);
        self.conv_bn(&format!("{attn}.local.conv1"), c, c, 1, hw);
        self.conv(&format!("{attn}.window.qkv"), c, 3 * c, 1, 1, false, hw);
        let windows = hw.0.div_ceil(w) * hw.1.div_ceil(w);
        let table = if a.relative_position_bias {
            (2 * w - 1) * (2 * w - 1) * a.num_heads
        } else {
            0
        };
        self.push(
            format!("{attn}.window.attention"),
            table,
            2 * windows * w.pow(4) * c,
        );
        self.conv(&format!("{attn}.dwconv"), c, c, 3, c, false, hw);
        self.bn(&format!("{attn}.bn"), c);
        self.conv(&format!("{attn}.proj"), c, c, 1, 1, true, hw);
        self.bn(&format!("{name}.norm2"), c);
        self.conv(&format!("{name}.mlp.fc1"), c, MLP_RATIO * c, 1, 1, true, hw);
        self.conv(&format!("{name}.mlp.fc2"), MLP_RATIO * c, c, 1, 1, true, hw);
    }
}

fn stride(hw: (usize, usize), s: usize) -> (usize, usize) {
    (hw.0 / s, hw.1 / s)
}

/// Every parameterised layer of the network at input size `h × w`.
pub fn layer_table(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    if h < ENCODER_STRIDE
        || w < ENCODER_STRIDE
        || !h.is_multiple_of(ENCODER_STRIDE)
        || !w.is_multiple_of(ENCODER_STRIDE)
    {
        return Err(TensorError::invalid(
            "layer_table",
            format!("input {h}x{w} must be at least 32x32 with both sides divisible by 32"),
        ));
    }
    let mut t = Table {
        rows: Vec::new(),
        train_only: false,
    };
    let hw = (h, w);
    let widths = cfg.encoder_widths();
    let c = cfg.decoder_channels();
    let k = cfg.num_classes;

    t.conv_bn(
        "encoder.stem",
        cfg.input_channels,
        widths[0],
        7,
        stride(hw, 2),
    );
    let mut cin = widths[0];
    for (i, &cout) in widths.iter().enumerate() {
        let s = 4 << i;
        let out = stride(hw, s);
        for block in 0..2 {
            let name = format!("encoder.layer{}.{block}", i + 1);
            let first_in = if block == 0 { cin } else { cout };
            if block == 0 && (i > 0 || cin != cout) {
                t.conv_bn(&format!("{name}.downsample"), first_in, cout, 1, out);
            }
            t.conv_bn(&format!("{name}.conv1"), first_in, cout, 3, out);
            t.conv_bn(&format!("{name}.conv2"), cout, cout, 3, out);
        }
        cin = cout;
    }

    for (i, &width) in widths.iter().enumerate() {
        t.conv(
            &format!("decoder.skip{}", i + 1),
            width,
            c,
            1,
            1,
            false,
            stride(hw, 4 << i),
        );
    }
    t.gltb("decoder.block4", cfg, stride(hw, 32));
    t.gltb("decoder.block3", cfg, stride(hw, 16));
    t.gltb("decoder.block2", cfg, stride(hw, 8));
    t.push("decoder.fuse3".into(), 1, 0);
    t.push("decoder.fuse2".into(), 1, 0);

    let s4 = stride(hw, 4);
    t.push("head.fuse".into(), 1, 0);
    if cfg.use_frh {
        let r = c / CHANNEL_REDUCTION;
        t.conv("head.gates.reduce", c, r, 1, 1, true, (1, 1));
        t.conv("head.gates.expand", r, c, 1, 1, true, (1, 1));
        t.conv("head.gates.spatial", c, c, 3, c, true, s4);
    }
    t.conv("head.classifier", c, k, 1, 1, true, s4);

    if cfg.use_aux_head {
        t.train_only = true;
        let s8 = stride(hw, 8);
        t.conv_bn("aux_head.conv", c, c, 3, s8);
        t.conv("aux_head.classifier", c, k, 1, 1, true, s8);
    }
    Ok(t.rows)
}

/// Total learnable parameters (auxiliary head included, running statistics
/// excluded).
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(layer_table(cfg, ENCODER_STRIDE, ENCODER_STRIDE)?
        .iter()
        .map(|r| r.params)
        .sum())
}

/// Inference cost in GMACs at input size `h × w` (train-only layers excluded).
pub fn estimate_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<f64> {
    let macs: u64 = layer_table(cfg, h, w)?
        .iter()
        .filter(|r| !r.train_only)
        .map(|r| r.macs)
        .sum();
    Ok(macs as f64 / 1e9)
}
