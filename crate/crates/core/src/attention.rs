//! Global-local attention and the global-local Transformer block.
//!
//! The global branch runs multi-head self-attention inside non-overlapping
//! `w×w` windows, then lets windows exchange context through a horizontal
//! and a vertical strip average pool. The local branch is a pair of
//! parallel convolutions. Their sum is refined by a depthwise convolution,
//! batch norm and a pointwise projection.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ConvBn, Ctx};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, ParamId, ParamStore, PoolAxis, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub channels: usize,
    pub window_size: usize,
    pub num_heads: usize,
    /// Strip-pool context exchange between windows. Off gives the plain
    /// "window context + local context" sum.
    pub cross_window_interaction: bool,
    /// Adds the raw window context as a third summand of the interaction.
    pub include_identity_term: bool,
    /// Learned relative position bias inside each window.
    pub relative_position_bias: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            channels: 64,
            window_size: 8,
            num_heads: 8,
            cross_window_interaction: true,
            include_identity_term: false,
            relative_position_bias: false,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.num_heads == 0
            || !self.channels.is_multiple_of(self.num_heads)
        {
            return Err(TensorError::invalid(
                "attention config",
                format!(
                    "channels {} not divisible by heads {}",
                    self.channels, self.num_heads
                ),
            ));
        }
        if self.window_size == 0 {
            return Err(TensorError::invalid(
                "attention config",
                "window size must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.num_heads
    }
}

/// How a feature map was padded and cut into windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub batch: usize,
    pub channels: usize,
    pub window: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    /// Windows per column.
    pub rows: usize,
    /// Windows per row.
    pub cols: usize,
}

impl WindowGrid {
    pub fn new(shape: [usize; 4], window: usize) -> Self {
        let [batch, channels, height, width] = shape;
        let rows = height.div_ceil(window);
        let cols = width.div_ceil(window);
        WindowGrid {
            batch,
            channels,
            window,
            height,
            width,
            padded_height: rows * window,
            padded_width: cols * window,
            rows,
            cols,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.rows * self.cols
    }
}

/// Splits `[B, C, H, W]` into `[B·rows·cols, C, w, w]` windows in row-major
/// window order, zero-padding the bottom/right edges first.
pub fn window_partition<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    window: usize,
) -> Result<(Var<T>, WindowGrid)> {
    if window == 0 {
        return Err(TensorError::invalid(
            "window_partition",
            "window size must be >= 1",
        ));
    }
    let grid = WindowGrid::new(x.value().dims4("window_partition")?, window);
    let WindowGrid {
        batch,
        channels,
        rows,
        cols,
        ..
    } = grid;
    let padded = g.pad_to(x, grid.padded_height, grid.padded_width)?;
    let y = g.reshape(&padded, &[batch, channels, rows, window, cols, window])?;
    let y = g.permute(&y, &[0, 2, 4, 1, 3, 5])?;
    let y = g.reshape(&y, &[grid.num_windows(), channels, window, window])?;
    Ok((y, grid))
}

/// Inverse of [`window_partition`], including the crop back to the
/// original size. `windows` may carry a different channel count than the
/// partitioned map.
pub fn window_reverse<T: Scalar>(
    g: &Graph<T>,
    windows: &Var<T>,
    grid: &WindowGrid,
) -> Result<Var<T>> {
    let [n, c, wh, ww] = windows.value().dims4("window_reverse")?;
    let w = grid.window;
    if n != grid.num_windows() || wh != w || ww != w {
        return Err(TensorError::shape(
            "window_reverse",
            format!("{:?} does not match grid {grid:?}", windows.shape()),
        ));
    }
    let y = g.reshape(windows, &[grid.batch, grid.rows, grid.cols, c, w, w])?;
    let y = g.permute(&y, &[0, 3, 1, 4, 2, 5])?;
    let y = g.reshape(&y, &[grid.batch, c, grid.padded_height, grid.padded_width])?;
    g.crop_to(&y, grid.height, grid.width)
}

/// Index into a `[(2w-1)², heads]` bias table for every (head, query, key).
fn relative_position_index(window: usize, heads: usize) -> Vec<usize> {
    let area = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * area * area);
    for h in 0..heads {
        for q in 0..area {
            let (qy, qx) = (q / window, q % window);
            for k in 0..area {
                let (ky, kx) = (k / window, k % window);
                let dy = qy + window - 1 - ky;
                let dx = qx + window - 1 - kx;
                idx.push((dy * span + dx) * heads + h);
            }
        }
    }
    idx
}

/// Multi-head self-attention inside non-overlapping windows.
///
/// A bias-free 1×1 convolution produces Q, K and V (channel blocks of size
/// C in that order; head `h` owns channels `h·d .. (h+1)·d` of each block).
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Conv2d,
    pub rel_bias: Option<ParamId>,
    pub cfg: AttentionConfig,
    rel_index: Option<Rc<Vec<usize>>>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut b = b.child(name);
        let c = cfg.channels;
        let qkv = Conv2d::new(&mut b, "qkv", c, 3 * c, 1, Conv2dSpec::default(), false)?;
        let (rel_bias, rel_index) = if cfg.relative_position_bias {
            let span = 2 * cfg.window_size - 1;
            let table = b.uniform(&[span * span, cfg.num_heads], 0.02);
            (
                Some(b.trainable("relative_position_bias", table)?),
                Some(Rc::new(relative_position_index(
                    cfg.window_size,
                    cfg.num_heads,
                ))),
            )
        } else {
            (None, None)
        };
        Ok(WindowAttention {
            qkv,
            rel_bias,
            cfg,
            rel_index,
        })
    }

    /// Window context map `[B, C, H, W]` for input `[B, C, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let qkv = self.qkv.forward(ctx, x)?;
        let g = ctx.graph;
        let cfg = &self.cfg;
        let (w, heads, d) = (cfg.window_size, cfg.num_heads, cfg.head_dim());
        let area = w * w;
        let (windows, grid) = window_partition(g, &qkv, w)?;
        let n = grid.num_windows();
        // [N, 3, h, d, w·w] -> [3, N·h, w·w, d]
        let t = g.reshape(&windows, &[n, 3, heads, d, area])?;
        let t = g.permute(&t, &[1, 0, 2, 4, 3])?;
        let t = g.reshape(&t, &[3, n * heads, area, d])?;
        let pick = |i: usize| -> Result<Var<T>> {
            let s = g.narrow(&t, 0, i, 1)?;
            g.reshape(&s, &[n * heads, area, d])
        };
        let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
        let q = g.mul_scalar(&q, T::from_f64_lossy((d as f64).powf(-0.5)))?;
        let kt = g.permute(&k, &[0, 2, 1])?;
        let mut logits = g.matmul(&q, &kt)?;
        if let (Some(id), Some(index)) = (self.rel_bias, &self.rel_index) {
            let table = ctx.param(id);
            let bias = g.gather(&table, Rc::clone(index), &[1, heads, area, area])?;
            let l4 = g.reshape(&logits, &[n, heads, area, area])?;
            let l4 = g.add(&l4, &bias)?;
            logits = g.reshape(&l4, &[n * heads, area, area])?;
        }
        let attn = g.softmax(&logits, 2)?;
        let out = g.matmul(&attn, &v)?;
        // [N·h, w·w, d] -> [N, h·d, w, w]
        let out = g.reshape(&out, &[n, heads, area, d])?;
        let out = g.permute(&out, &[0, 1, 3, 2])?;
        let out = g.reshape(&out, &[n, cfg.channels, w, w])?;
        window_reverse(g, &out, &grid)
    }
}

/// Cross-shaped context exchange between windows: horizontal plus vertical
/// strip average pools of length `w` over the window context.
pub fn cross_window_interaction<T: Scalar>(
    g: &Graph<T>,
    window_ctx: &Var<T>,
    cfg: &AttentionConfig,
) -> Result<Var<T>> {
    if !cfg.cross_window_interaction {
        return Ok(window_ctx.clone());
    }
    let h = g.strip_avg_pool(window_ctx, PoolAxis::Horizontal, cfg.window_size)?;
    let v = g.strip_avg_pool(window_ctx, PoolAxis::Vertical, cfg.window_size)?;
    let sum = g.add(&h, &v)?;
    if cfg.include_identity_term {
        g.add(&sum, window_ctx)
    } else {
        Ok(sum)
    }
}

/// Parallel 3×3 and 1×1 bias-free convolutions, each batch-normalised,
/// summed.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub conv3: ConvBn,
    pub conv1: ConvBn,
}

impl LocalBranch {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.child(name);
        Ok(LocalBranch {
            conv3: ConvBn::new(
                &mut b,
                "conv3",
                channels,
                channels,
                3,
                Conv2dSpec::new(1, 1, 1),
            )?,
            conv1: ConvBn::new(
                &mut b,
                "conv1",
                channels,
                channels,
                1,
                Conv2dSpec::default(),
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let a = self.conv3.forward(ctx, x)?;
        let b = self.conv1.forward(ctx, x)?;
        ctx.graph.add(&a, &b)
    }
}

/// The efficient global-local attention.
#[derive(Clone, Debug)]
pub struct GlobalLocalAttention {
    pub local: LocalBranch,
    pub global: WindowAttention,
    pub dwconv: Conv2d,
    pub bn: BatchNorm2d,
    pub proj: Conv2d,
    pub cfg: AttentionConfig,
}

impl GlobalLocalAttention {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        let mut b = b.child(name);
        let c = cfg.channels;
        Ok(GlobalLocalAttention {
            local: LocalBranch::new(&mut b, "local", c)?,
            global: WindowAttention::new(&mut b, "window", cfg)?,
            dwconv: Conv2d::depthwise(&mut b, "dwconv", c, 3, false)?,
            bn: BatchNorm2d::new(&mut b, "bn", c)?,
            proj: Conv2d::new(&mut b, "proj", c, c, 1, Conv2dSpec::default(), true)?,
            cfg,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let local = self.local.forward(ctx, x)?;
        let window_ctx = self.global.forward(ctx, x)?;
        let global = cross_window_interaction(ctx.graph, &window_ctx, &self.cfg)?;
        let fused = ctx.graph.add(&local, &global)?;
        let y = self.dwconv.forward(ctx, &fused)?;
        let y = self.bn.forward(ctx, &y)?;
        self.proj.forward(ctx, &y)
    }
}

/// Pointwise MLP: C → 4C → relu6 → C.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

pub const MLP_RATIO: usize = 4;

impl Mlp {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.child(name);
        let hidden = channels * MLP_RATIO;
        Ok(Mlp {
            fc1: Conv2d::new(
                &mut b,
                "fc1",
                channels,
                hidden,
                1,
                Conv2dSpec::default(),
                true,
            )?,
            fc2: Conv2d::new(
                &mut b,
                "fc2",
                hidden,
                channels,
                1,
                Conv2dSpec::default(),
                true,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.graph.relu6(&h)?;
        self.fc2.forward(ctx, &h)
    }
}

/// Global-local Transformer block (pre-norm residual form):
/// `x += GLA(BN(x)); x += MLP(BN(x))`.
#[derive(Clone, Debug)]
pub struct Gltb {
    pub norm1: BatchNorm2d,
    pub attn: GlobalLocalAttention,
    pub norm2: BatchNorm2d,
    pub mlp: Mlp,
}

impl Gltb {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        let mut b = b.child(name);
        Ok(Gltb {
            norm1: BatchNorm2d::new(&mut b, "norm1", cfg.channels)?,
            attn: GlobalLocalAttention::new(&mut b, "attn", cfg)?,
            norm2: BatchNorm2d::new(&mut b, "norm2", cfg.channels)?,
            mlp: Mlp::new(&mut b, "mlp", cfg.channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, &h)?;
        let x = ctx.graph.add(x, &h)?;
        let h = self.norm2.forward(ctx, &x)?;
        let h = self.mlp.forward(ctx, &h)?;
        ctx.graph.add(&x, &h)
    }

    /// Zeroes the last projection of both residual branches, which turns
    /// the block into the identity.
    pub fn zero_residual_projections<T: Scalar>(&self, store: &mut ParamStore<T>) {
        self.attn.proj.zero_init(store);
        self.mlp.fc2.zero_init(store);
    }
}
