//! Parameterised layers shared by the encoder, decoder and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng::uniform;
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a forward pass needs: the graph to record on and the parameters.
pub struct Ctx<'a, T> {
    pub graph: &'a Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx { graph, store, mode }
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        self.graph.param(self.store, id)
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from one random stream.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn child(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.path(name);
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn trainable(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.register(path, ParamKind::Trainable, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.register(path, ParamKind::Buffer, value)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        uniform(self.rng, shape, -bound, bound)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        self.rng
    }
}

/// 2-D convolution with Kaiming-uniform (fan-in, ReLU gain) weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.child(name);
        let fan_in = (cin / spec.groups) * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = b.uniform(&[cout, cin / spec.groups, kernel, kernel], bound);
        let weight = b.trainable("weight", w)?;
        let bias = if bias {
            let v = b.uniform(&[cout], 1.0 / (fan_in as f64).sqrt());
            Some(b.trainable("bias", v)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    /// `k×k` convolution, stride 1, "same" padding.
    pub fn same<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(b, name, cin, cout, k, Conv2dSpec::new(1, k / 2, 1), bias)
    }

    /// Depthwise `k×k` convolution, stride 1, "same" padding.
    pub fn depthwise<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        k: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(
            b,
            name,
            channels,
            channels,
            k,
            Conv2dSpec::new(1, k / 2, channels),
            bias,
        )
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.graph.conv2d(x, &w, b.as_ref(), self.spec)
    }

    /// Sets weight and bias to zero.
    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(T::zero());
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.child(name);
        Ok(BatchNorm2d {
            weight: b.trainable("weight", Tensor::ones(&[channels]))?,
            bias: b.trainable("bias", Tensor::zeros(&[channels]))?,
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: b.buffer("running_var", Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = ctx.param(self.weight);
        let beta = ctx.param(self.bias);
        let train = ctx.mode == Mode::Train;
        let (rm, rv) = ctx.store.pair_mut(self.running_mean, self.running_var);
        ctx.graph.batchnorm2d(
            x,
            &gamma,
            &beta,
            rm,
            rv,
            train,
            T::from_f64_lossy(BN_MOMENTUM),
            T::from_f64_lossy(BN_EPS),
        )
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let mut b = b.child(name);
        Ok(ConvBn {
            conv: Conv2d::new(&mut b, "conv", cin, cout, kernel, spec, false)?,
            bn: BatchNorm2d::new(&mut b, "bn", cout)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, &y)
    }
}
