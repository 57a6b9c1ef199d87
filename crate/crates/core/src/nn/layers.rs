use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::params::{Init, ParamId, ParamStore};

/// Default layer-norm variance guard.
pub const LN_EPS: f64 = 1e-5;

/// Everything a forward pass needs: the tape to record on and the weights.
#[derive(Clone, Copy)]
pub struct Ctx<'t, 'p, T: Real> {
    pub tape: &'t Tape<T>,
    pub params: &'p ParamStore<T>,
}

impl<'t, 'p, T: Real> Ctx<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ParamStore<T>) -> Self {
        Self { tape, params }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params.var(self.tape, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(t)
    }
}

/// Registers parameters under a `/`-separated name prefix.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    init: &'a mut Init,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, init: &'a mut Init) -> Self {
        Self { store, init, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}/{name}", self.prefix) };
        Builder { store: self.store, init: self.init, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let t = self.init.fan_in(shape, fan_in);
        self.store.add(self.full_name(name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.add(self.full_name(name), Tensor::zeros(shape))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(self.full_name(name), value)
    }
}

/// `x · W + b` on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            weight: s.uniform("weight", vec![fan_in, fan_out], fan_in)?,
            bias: Some(s.zeros("bias", vec![fan_out])?),
            fan_in,
            fan_out,
        })
    }

    /// Zero weights and bias: the layer outputs zeros until trained.
    pub fn zeroed<T: Real>(b: &mut Builder<'_, T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            weight: s.zeros("weight", vec![fan_in, fan_out])?,
            bias: Some(s.zeros("bias", vec![fan_out])?),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self { gamma: s.tensor("gamma", Tensor::ones(vec![width]))?, beta: s.zeros("beta", vec![width])? })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), T::lit(LN_EPS))
    }
}

/// Pre-norm channel MLP sub-layer with residual: `x + W₂ gelu(W₁ LN(x))`,
/// `W₂` zero-initialised.
#[derive(Clone, Debug)]
pub struct ChannelMlp {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl ChannelMlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, width: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", width)?,
            up: Linear::new(&mut s, "up", width, hidden)?,
            down: Linear::zeroed(&mut s, "down", hidden, width)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.up.forward(ctx, self.norm.forward(ctx, x)?)?.gelu()?;
        x.add(self.down.forward(ctx, h)?)
    }

    pub fn hidden(&self) -> usize {
        self.up.fan_out
    }
}
