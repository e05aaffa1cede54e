//! Raw forward/backward kernels on plain tensors. The graph ops in
//! `ops.rs` wrap these and record the matching backward rule.

use super::{numel, strides_of, Tensor};
use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let &[batch, cin, h, w] = input else {
            return Err(TensorError::shape(
                "conv2d",
                format!("input must be rank 4, got {input:?}"),
            ));
        };
        let &[cout, cin_g, kh, kw] = weight else {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight must be rank 4, got {weight:?}"),
            ));
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("channels in={cin} out={cout} not divisible by groups={groups}"),
            ));
        }
        if cin / groups != cin_g {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "weight expects {cin_g} channels per group, input gives {}",
                    cin / groups
                ),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let span_h = h + 2 * padding.0;
        let span_w = w + 2 * padding.1;
        if span_h < kh || span_w < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {span_h}x{span_w}"),
            ));
        }
        Ok(ConvGeometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            ho: (span_h - kh) / stride.0 + 1,
            wo: (span_w - kw) / stride.1 + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.padding == (0, 0)
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }
}

/// Unfolds the channels `c0..c0+cin_g` of one image into `cols`
/// (`patch_len × ho·wo`).
fn im2col<T: Scalar>(img: &[T], c0: usize, g: &ConvGeometry, cols: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let howo = g.ho * g.wo;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    for c in 0..g.cin_g() {
        let plane = &img[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * sh + ki) as isize - ph;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw;
                        *slot = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto the image gradient.
fn col2im<T: Scalar>(cols: &[T], c0: usize, g: &ConvGeometry, img: &mut [T]) {
    let (h, w) = (g.h, g.w);
    let howo = g.ho * g.wo;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    for c in 0..g.cin_g() {
        let plane = &mut img[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * howo..(row + 1) * howo];
                for oy in 0..g.ho {
                    let iy = (oy * sh + ki) as isize - ph;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..g.wo {
                        let ix = (ox * sw + kj) as isize - pw;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let howo = g.ho * g.wo;
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.cout * howo;
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * plane_out];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * howo]
    };
    for b in 0..g.batch {
        let img = &x.data()[b * plane_in..(b + 1) * plane_in];
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let rhs: &[T] = if g.is_pointwise() {
                &img[c0 * howo..(c0 + g.cin_g()) * howo]
            } else {
                im2col(img, c0, g, &mut cols);
                &cols
            };
            let o0 = grp * g.cout_g();
            let wg = &weight.data()[o0 * patch..(o0 + g.cout_g()) * patch];
            let dst = &mut out[b * plane_out + o0 * howo..b * plane_out + (o0 + g.cout_g()) * howo];
            gemm(g.cout_g(), patch, howo, wg, false, rhs, false, dst, false);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                let off = b * plane_out + co * howo;
                for v in &mut out[off..off + howo] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(&g.output_shape(), out).expect("conv output shape")
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let howo = g.ho * g.wo;
    let plane_in = g.cin * g.h * g.w;
    let plane_out = g.cout * howo;
    let patch = g.patch_len();
    let mut gx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut gw = need[1].then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); patch * howo];
    let mut gcols = vec![T::zero(); patch * howo];
    let go = gout.data();
    for b in 0..g.batch {
        let img = &x.data()[b * plane_in..(b + 1) * plane_in];
        for grp in 0..g.groups {
            let c0 = grp * g.cin_g();
            let o0 = grp * g.cout_g();
            let gslice = &go[b * plane_out + o0 * howo..b * plane_out + (o0 + g.cout_g()) * howo];
            if let Some(gw) = gw.as_mut() {
                let rhs: &[T] = if g.is_pointwise() {
                    &img[c0 * howo..(c0 + g.cin_g()) * howo]
                } else {
                    im2col(img, c0, g, &mut cols);
                    &cols
                };
                let dst = &mut gw[o0 * patch..(o0 + g.cout_g()) * patch];
                gemm(g.cout_g(), howo, patch, gslice, false, rhs, true, dst, true);
            }
            if let Some(gx) = gx.as_mut() {
                let wg = &weight.data()[o0 * patch..(o0 + g.cout_g()) * patch];
                let gimg = &mut gx[b * plane_in..(b + 1) * plane_in];
                if g.is_pointwise() {
                    let dst = &mut gimg[c0 * howo..(c0 + g.cin_g()) * howo];
                    gemm(patch, g.cout_g(), howo, wg, true, gslice, false, dst, true);
                } else {
                    gemm(
                        patch,
                        g.cout_g(),
                        howo,
                        wg,
                        true,
                        gslice,
                        false,
                        &mut gcols,
                        false,
                    );
                    col2im(&gcols, c0, g, gimg);
                }
            }
        }
    }
    let gb = need[2].then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, slot) in gb.iter_mut().enumerate() {
                let off = b * plane_out + co * howo;
                *slot += go[off..off + howo].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec(&[g.cout], gb).expect("bias grad")
    });
    ConvGrads {
        input: gx.map(|d| Tensor::from_vec(x.shape(), d).expect("input grad")),
        weight: gw.map(|d| Tensor::from_vec(weight.shape(), d).expect("weight grad")),
        bias: gb,
    }
}

/// Max pooling with zero-free padding (padded cells never win). Returns the
/// pooled map and the flat input index chosen for every output element.
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims4("max_pool2d")?;
    if kernel == 0 || stride == 0 || padding * 2 > kernel {
        return Err(TensorError::invalid(
            "max_pool2d",
            format!("kernel={kernel} stride={stride} padding={padding}"),
        ));
    }
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(TensorError::shape(
            "max_pool2d",
            "input smaller than kernel",
        ));
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - padding as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - padding as isize;
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel as isize {
                    let iy = y0 + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel as isize {
                        let ix = x0 + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, ho, wo], out)?, arg))
}

/// Averaging window `[p - lo, p + hi]` for a length-`w` strip kernel.
pub fn strip_window(w: usize) -> (usize, usize) {
    let lo = (w - 1) / 2;
    (lo, w - 1 - lo)
}

/// Valid-count average over a centred length-`w` window along one axis
/// (`axis` 3 = along width, 2 = along height).
///
/// The mean is taken relative to the window's centre element, so constant
/// lines reproduce their value exactly.
pub fn strip_pool_forward<T: Scalar>(x: &Tensor<T>, axis: usize, w: usize) -> Tensor<T> {
    let shape = x.shape();
    let n = shape[axis];
    let step = strides_of(shape)[axis];
    let (lo, hi) = strip_window(w);
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for_each_line(shape, axis, |base| {
        for p in 0..n {
            let start = p.saturating_sub(lo);
            let end = (p + hi).min(n - 1);
            let centre = xd[base + p * step];
            let mut acc = T::zero();
            for q in start..=end {
                acc += xd[base + q * step] - centre;
            }
            out[base + p * step] = centre + acc / T::from_usize_lossy(end - start + 1);
        }
    });
    Tensor::from_vec(shape, out).expect("strip pool shape")
}

pub fn strip_pool_backward<T: Scalar>(gout: &Tensor<T>, axis: usize, w: usize) -> Tensor<T> {
    let shape = gout.shape();
    let n = shape[axis];
    let step = strides_of(shape)[axis];
    let (lo, hi) = strip_window(w);
    let mut gx = vec![T::zero(); gout.len()];
    let gd = gout.data();
    for_each_line(shape, axis, |base| {
        for p in 0..n {
            let start = p.saturating_sub(lo);
            let end = (p + hi).min(n - 1);
            let share = gd[base + p * step] / T::from_usize_lossy(end - start + 1);
            for q in start..=end {
                gx[base + q * step] += share;
            }
        }
    });
    Tensor::from_vec(shape, gx).expect("strip pool grad shape")
}

/// Calls `f(base_offset)` for the first element of every 1-D line along `axis`.
fn for_each_line(shape: &[usize], axis: usize, mut f: impl FnMut(usize)) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            f(o * n * inner + i);
        }
    }
}

/// Source index pair and interpolation weight for each output coordinate of a
/// half-pixel-centred bilinear resize by an integer factor.
fn bilinear_taps(len: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..len * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("bilinear_upsample")?;
    if scale == 0 {
        return Err(TensorError::invalid(
            "bilinear_upsample",
            "scale must be >= 1",
        ));
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![T::zero(); b * c * oh * ow];
    let xd = x.data();
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let hx = T::one() - lx;
                dst[oy * ow + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], out)
}

pub fn bilinear_backward<T: Scalar>(
    gout: &Tensor<T>,
    in_shape: &[usize],
    scale: usize,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    if scale == 1 {
        return gout.clone();
    }
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let (oh, ow) = (h * scale, w * scale);
    let planes = in_shape[0] * in_shape[1];
    let mut gx = vec![T::zero(); planes * h * w];
    let gd = gout.data();
    for plane in 0..planes {
        let src = &gd[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64_lossy(lx);
                let hx = T::one() - lx;
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += hy * hx * g;
                dst[y0 * w + x1] += hy * lx * g;
                dst[y1 * w + x0] += ly * hx * g;
                dst[y1 * w + x1] += ly * lx * g;
            }
        }
    }
    Tensor::from_vec(in_shape, gx).expect("bilinear grad shape")
}

/// Copies `x` into the axis order given by `axes`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(TensorError::invalid(
            "permute",
            format!("{axes:?} is not a permutation of {rank} axes"),
        ));
    }
    let in_strides = strides_of(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let xd = x.data();
    if rank == 0 || x.is_empty() {
        return Tensor::from_vec(&out_shape, xd.to_vec());
    }
    let inner = rank - 1;
    let (n_inner, s_inner) = (out_shape[inner], src_strides[inner]);
    let outer_count = numel(&out_shape[..inner]);
    let mut idx = vec![0usize; inner];
    let mut base = 0usize;
    for _ in 0..outer_count {
        for i in 0..n_inner {
            out.push(xd[base + i * s_inner]);
        }
        // odometer over the outer axes
        for d in (0..inner).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::shape("broadcast", format!("{a:?} vs {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every output element with the matching offsets into `a` and `b`.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::from_vec(&out_shape, out)
}

/// Sums `g` over the axes along which `shape` was broadcast to `g.shape()`.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let sr = broadcast_strides(shape, g.shape());
    let zero = vec![0; g.rank()];
    let mut out = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_broadcast(g.shape(), &sr, &zero, |o, ir, _| out[ir] += gd[o]);
    Tensor::from_vec(shape, out).expect("reduce shape")
}

/// `(outer, n, inner)` split of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..n {
                let e = (xd[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                out[base + k * inner] /= s;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("softmax shape")
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..n {
                s += (xd[base + k * inner] - m).exp();
            }
            let lse = m + s.ln();
            for k in 0..n {
                out[base + k * inner] = xd[base + k * inner] - lse;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("log_softmax shape")
}

/// Sum along `axis`; the reduced axis is kept with size 1.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for k in 0..n {
            let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_vec(&shape, out).expect("sum_axis shape")
}

/// Repeats a size-1 `axis` of `x` `n` times.
pub fn expand_axis<T: Scalar>(x: &Tensor<T>, axis: usize, n: usize) -> Tensor<T> {
    let (outer, one, inner) = axis_split(x.shape(), axis);
    debug_assert_eq!(one, 1);
    let mut out = Vec::with_capacity(outer * n * inner);
    let xd = x.data();
    for o in 0..outer {
        for _ in 0..n {
            out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = n;
    Tensor::from_vec(&shape, out).expect("expand shape")
}

/// `x[.., start..start+len, ..]` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    let xd = x.data();
    for o in 0..outer {
        let from = (o * n + start) * inner;
        out.extend_from_slice(&xd[from..from + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, out).expect("narrow shape")
}

/// Zero-pads `x` along `axis` with `before` and `after` cells.
pub fn pad_axis<T: Scalar>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let m = n + before + after;
    let mut out = vec![T::zero(); outer * m * inner];
    let xd = x.data();
    for o in 0..outer {
        let dst = (o * m + before) * inner;
        out[dst..dst + n * inner].copy_from_slice(&xd[o * n * inner..(o + 1) * n * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = m;
    Tensor::from_vec(&shape, out).expect("pad shape")
}

/// Batched matrix product over the last two axes; leading axes must agree.
pub fn matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(TensorError::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (a0, a1) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (b0, b1) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(TensorError::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let batch = numel(&a.shape()[..ra - 2]);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            trans_a,
            &b.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    Tensor::from_vec(&shape, out)
}
