//! Differentiable ops recorded on a [`Graph`].

use std::rc::Rc;

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeometry};
use super::{numel, Tensor};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Stride, padding and grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

/// Direction of a strip average pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Slides along the width axis (pools within each row).
    Horizontal,
    /// Slides along the height axis (pools within each column).
    Vertical,
}

impl PoolAxis {
    fn tensor_axis(self) -> usize {
        match self {
            PoolAxis::Horizontal => 3,
            PoolAxis::Vertical => 2,
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        spec: Conv2dSpec,
    ) -> Result<Var<T>> {
        let geom = ConvGeometry::new(
            x.shape(),
            weight.shape(),
            spec.stride,
            spec.padding,
            spec.groups,
        )?;
        if let Some(b) = bias {
            if b.shape() != [geom.cout] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", b.shape(), geom.cout),
                ));
            }
        }
        let out =
            kernels::conv2d_forward(x.value(), weight.value(), bias.map(|b| b.value()), &geom);
        let (xv, wv) = (x.rc(), weight.rc());
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record("conv2d", out, &inputs, move |g, needs| {
            let grads = kernels::conv2d_backward(
                &xv,
                &wv,
                g,
                &geom,
                [needs[0], needs[1], has_bias && needs[2]],
            );
            let mut v = vec![grads.input, grads.weight];
            if has_bias {
                v.push(grads.bias);
            }
            Ok(v)
        })
    }

    /// Batch normalisation over `(B, H, W)` per channel.
    ///
    /// In training mode the batch statistics normalise the input and the
    /// running statistics move toward them by `momentum` (the variance
    /// update uses the unbiased estimate). In evaluation mode the running
    /// statistics are used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        train: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var<T>> {
        let [b, c, h, w] = x.value().dims4("batchnorm2d")?;
        for (what, t) in [
            ("gamma", gamma.value()),
            ("beta", beta.value()),
            ("running_mean", &*running_mean),
            ("running_var", &*running_var),
        ] {
            if t.shape() != [c] {
                return Err(TensorError::shape(
                    "batchnorm2d",
                    format!("{what} has shape {:?}, expected [{c}]", t.shape()),
                ));
            }
        }
        let hw = h * w;
        let count = b * hw;
        let xd = x.value().data();
        let (mean, var) = if train {
            if count < 2 {
                return Err(TensorError::invalid(
                    "batchnorm2d",
                    "training mode needs more than one value per channel",
                ));
            }
            let n = T::from_usize_lossy(count);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                let m = s / n;
                let mut sq = T::zero();
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq / n;
            }
            let unbias = n / (n - T::one());
            for ch in 0..c {
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - momentum) * *rm + momentum * mean[ch];
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - momentum) * *rv + momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.value().len()];
        let mut out = vec![T::zero(); x.value().len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        let gamma_v = gamma.rc();
        let shape = x.shape().to_vec();
        self.record("batchnorm2d", out, &[x, gamma, beta], move |g, needs| {
            let gdat = g.data();
            let gam = gamma_v.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += gdat[i] * xhat[i];
                        dbeta[ch] += gdat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); gdat.len()];
                let n = T::from_usize_lossy(count);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch];
                        for i in off..off + hw {
                            dx[i] = if train {
                                k * (gdat[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                            } else {
                                k * gdat[i]
                            };
                        }
                    }
                }
                Tensor::from_vec(&shape, dx).expect("bn dx")
            });
            Ok(vec![
                dx,
                needs[1].then(|| Tensor::from_vec(&[c], dgamma).expect("bn dgamma")),
                needs[2].then(|| Tensor::from_vec(&[c], dbeta).expect("bn dbeta")),
            ])
        })
    }

    pub fn max_pool2d(
        &self,
        x: &Var<T>,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let (out, arg) = kernels::max_pool2d_forward(x.value(), kernel, stride, padding)?;
        let in_shape = x.shape().to_vec();
        self.record("max_pool2d", out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for (&i, &gv) in arg.iter().zip(g.data()) {
                gxd[i] += gv;
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Valid-count average over a centred length-`window` strip.
    pub fn strip_avg_pool(&self, x: &Var<T>, axis: PoolAxis, window: usize) -> Result<Var<T>> {
        x.value().dims4("strip_avg_pool")?;
        if window == 0 {
            return Err(TensorError::invalid(
                "strip_avg_pool",
                "window must be >= 1",
            ));
        }
        let ax = axis.tensor_axis();
        let out = kernels::strip_pool_forward(x.value(), ax, window);
        self.record("strip_avg_pool", out, &[x], move |g, _| {
            Ok(vec![Some(kernels::strip_pool_backward(g, ax, window))])
        })
    }

    /// Bilinear upsampling by an integer factor with half-pixel sampling.
    pub fn bilinear_upsample(&self, x: &Var<T>, scale: usize) -> Result<Var<T>> {
        let out = kernels::bilinear_forward(x.value(), scale)?;
        let in_shape = x.shape().to_vec();
        self.record("bilinear_upsample", out, &[x], move |g, _| {
            Ok(vec![Some(kernels::bilinear_backward(g, &in_shape, scale))])
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::broadcast_zip(a.value(), b.value(), |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record("add", out, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| kernels::reduce_to_shape(g, &sa)),
                needs[1].then(|| kernels::reduce_to_shape(g, &sb)),
            ])
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::broadcast_zip(a.value(), b.value(), |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.record("sub", out, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| kernels::reduce_to_shape(g, &sa)),
                needs[1].then(|| kernels::reduce_to_shape(&g.map(|v| -v), &sb)),
            ])
        })
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::broadcast_zip(a.value(), b.value(), |x, y| x * y)?;
        let (av, bv) = (a.rc(), b.rc());
        self.record("mul", out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                let t = kernels::broadcast_zip(g, &bv, |x, y| x * y)?;
                Some(kernels::reduce_to_shape(&t, av.shape()))
            } else {
                None
            };
            let gb = if needs[1] {
                let t = kernels::broadcast_zip(g, &av, |x, y| x * y)?;
                Some(kernels::reduce_to_shape(&t, bv.shape()))
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::broadcast_zip(a.value(), b.value(), |x, y| x / y)?;
        let (av, bv) = (a.rc(), b.rc());
        self.record("div", out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                let t = kernels::broadcast_zip(g, &bv, |x, y| x / y)?;
                Some(kernels::reduce_to_shape(&t, av.shape()))
            } else {
                None
            };
            let gb = if needs[1] {
                let q = kernels::broadcast_zip(&av, &bv, |x, y| x / (y * y))?;
                let t = kernels::broadcast_zip(g, &q, |x, y| -x * y)?;
                Some(kernels::reduce_to_shape(&t, bv.shape()))
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn add_scalar(&self, x: &Var<T>, s: T) -> Result<Var<T>> {
        self.record("add_scalar", x.value().map(|v| v + s), &[x], |g, _| {
            Ok(vec![Some(g.clone())])
        })
    }

    pub fn mul_scalar(&self, x: &Var<T>, s: T) -> Result<Var<T>> {
        self.record("mul_scalar", x.value().map(|v| v * s), &[x], move |g, _| {
            Ok(vec![Some(g.map(|v| v * s))])
        })
    }

    pub fn neg(&self, x: &Var<T>) -> Result<Var<T>> {
        self.mul_scalar(x, -T::one())
    }

    fn unary(
        &self,
        op: &'static str,
        x: &Var<T>,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        let out = x.value().map(f);
        let (xv, yv) = (x.rc(), Rc::new(out.clone()));
        self.record(op, out, &[x], move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gv, (&xi, &yi))| gv * df(xi, yi))
                .collect();
            Ok(vec![Some(Tensor::from_vec(g.shape(), d)?)])
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn relu6(&self, x: &Var<T>) -> Result<Var<T>> {
        let six = T::from_f64_lossy(6.0);
        self.unary(
            "relu6",
            x,
            move |v| v.max(T::zero()).min(six),
            move |xi, _| {
                if xi > T::zero() && xi < six {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(
            "sigmoid",
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("ln", x, |v| v.ln(), |xi, _| T::one() / xi)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::matmul(a.value(), b.value(), false, false)?;
        let (av, bv) = (a.rc(), b.rc());
        self.record("matmul", out, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0]
                    .then(|| kernels::matmul(g, &bv, false, true))
                    .transpose()?,
                needs[1]
                    .then(|| kernels::matmul(&av, g, true, false))
                    .transpose()?,
            ])
        })
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        self.check_axis("softmax", x, axis)?;
        let out = kernels::softmax(x.value(), axis);
        let yv = Rc::new(out.clone());
        self.record("softmax", out, &[x], move |g, _| {
            // dx = y * (g - sum(g * y))
            let gy = g.zip_map(&yv, |a, b| a * b)?;
            let s = kernels::expand_axis(&kernels::sum_axis(&gy, axis), axis, yv.shape()[axis]);
            let d = g.zip_map(&s, |a, b| a - b)?.zip_map(&yv, |a, b| a * b)?;
            Ok(vec![Some(d)])
        })
    }

    pub fn log_softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        self.check_axis("log_softmax", x, axis)?;
        let out = kernels::log_softmax(x.value(), axis);
        let pv = Rc::new(out.map(|v| v.exp()));
        self.record("log_softmax", out, &[x], move |g, _| {
            // dx = g - softmax * sum(g)
            let s = kernels::expand_axis(&kernels::sum_axis(g, axis), axis, pv.shape()[axis]);
            let d = g.zip_map(&s.zip_map(&pv, |a, b| a * b)?, |a, b| a - b)?;
            Ok(vec![Some(d)])
        })
    }

    fn check_axis(&self, op: &'static str, x: &Var<T>, axis: usize) -> Result<()> {
        if axis >= x.value().rank() {
            return Err(TensorError::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        self.record(
            "sum_all",
            Tensor::scalar(x.value().sum()),
            &[x],
            move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value().len();
        if n == 0 {
            return Err(TensorError::invalid("mean_all", "empty tensor"));
        }
        let s = self.sum_all(x)?;
        self.mul_scalar(&s, T::one() / T::from_usize_lossy(n))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        self.check_axis("sum_axis", x, axis)?;
        let n = x.shape()[axis];
        self.record(
            "sum_axis",
            kernels::sum_axis(x.value(), axis),
            &[x],
            move |g, _| Ok(vec![Some(kernels::expand_axis(g, axis, n))]),
        )
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        self.check_axis("mean_axis", x, axis)?;
        let n = x.shape()[axis];
        if n == 0 {
            return Err(TensorError::invalid("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(&s, T::one() / T::from_usize_lossy(n))
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let [b, c, h, w] = x.value().dims4("global_avg_pool")?;
        let flat = self.reshape(x, &[b, c, h * w])?;
        let m = self.mean_axis(&flat, 2)?;
        self.reshape(&m, &[b, c, 1, 1])
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != x.value().len() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", x.shape()),
            ));
        }
        let out = x.value().clone().reshaped(shape)?;
        let in_shape = x.shape().to_vec();
        self.record("reshape", out, &[x], move |g, _| {
            Ok(vec![Some(g.clone().reshaped(&in_shape)?)])
        })
    }

    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = kernels::permute(x.value(), axes)?;
        let inv = kernels::inverse_permutation(axes);
        self.record("permute", out, &[x], move |g, _| {
            Ok(vec![Some(kernels::permute(g, &inv)?)])
        })
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let rank = first.value().rank();
        for x in xs {
            let ok = x.value().rank() == rank
                && (0..rank).all(|d| d == axis || x.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), x.shape()),
                ));
            }
        }
        let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = kernels::axis_split(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &n) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&x.value().data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, out)?;
        self.record("concat", out, xs, move |g, needs| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (&n, &need) in sizes.iter().zip(needs) {
                grads.push(need.then(|| kernels::narrow(g, axis, start, n)));
                start += n;
            }
            Ok(grads)
        })
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        self.check_axis("narrow", x, axis)?;
        let n = x.shape()[axis];
        if start + len > n {
            return Err(TensorError::shape(
                "narrow",
                format!("range {start}..{} exceeds axis size {n}", start + len),
            ));
        }
        if start == 0 && len == n {
            return Ok(x.clone());
        }
        let out = kernels::narrow(x.value(), axis, start, len);
        self.record("narrow", out, &[x], move |g, _| {
            Ok(vec![Some(kernels::pad_axis(
                g,
                axis,
                start,
                n - start - len,
            ))])
        })
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: &Var<T>, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<T>> {
        if numel(shape) != indices.len() {
            return Err(TensorError::shape(
                "gather",
                format!("{} indices cannot fill {shape:?}", indices.len()),
            ));
        }
        let n = x.value().len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of range {n}"),
            ));
        }
        let xd = x.value().data();
        let out = Tensor::from_vec(shape, indices.iter().map(|&i| xd[i]).collect())?;
        let in_shape = x.shape().to_vec();
        self.record("gather", out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let d = gx.data_mut();
            for (&i, &gv) in indices.iter().zip(g.data()) {
                d[i] += gv;
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Zero padding along `axis`.
    pub fn pad(&self, x: &Var<T>, axis: usize, before: usize, after: usize) -> Result<Var<T>> {
        self.check_axis("pad", x, axis)?;
        if before == 0 && after == 0 {
            return Ok(x.clone());
        }
        let n = x.shape()[axis];
        let out = kernels::pad_axis(x.value(), axis, before, after);
        self.record("pad", out, &[x], move |g, _| {
            Ok(vec![Some(kernels::narrow(g, axis, before, n))])
        })
    }

    /// Zero-pads height and width on the bottom/right to the given size.
    pub fn pad_to(&self, x: &Var<T>, height: usize, width: usize) -> Result<Var<T>> {
        let [_, _, h, w] = x.value().dims4("pad_to")?;
        if height < h || width < w {
            return Err(TensorError::shape(
                "pad_to",
                format!("{h}x{w} does not fit in {height}x{width}"),
            ));
        }
        let y = self.pad(x, 2, 0, height - h)?;
        self.pad(&y, 3, 0, width - w)
    }

    /// Keeps the top-left `height × width` region.
    pub fn crop_to(&self, x: &Var<T>, height: usize, width: usize) -> Result<Var<T>> {
        let y = self.narrow(x, 2, 0, height)?;
        self.narrow(&y, 3, 0, width)
    }
}
