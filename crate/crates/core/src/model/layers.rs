use rand::Rng;

use crate::error::Result;
use crate::tensor::{BnMode, Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};

/// Whether batch norm normalises with batch statistics (and records them) or
/// with its running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: Mode,
    pub bn_eps: f64,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.params, id)
    }
}

pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_conv_weight(format!("{name}.weight"), [cout, cin, k, k], rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Weight, Tensor::full(&[c], T::one()))?,
            beta: store.add(format!("{name}.beta"), ParamKind::Bias, Tensor::zeros(&[c]))?,
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?,
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[c], T::one()))?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let params = cx.params;
        let mode = match cx.mode {
            Mode::Train => BnMode::Train { running: Some((self.running_mean, self.running_var)) },
            Mode::Eval => BnMode::Eval {
                mean: params.get(self.running_mean).data(),
                var: params.get(self.running_var).data(),
            },
        };
        cx.graph.batch_norm(x, gamma, beta, mode, cx.bn_eps)
    }
}

/// Convolution followed by batch norm, with an optional ReLU.
pub(crate) struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), dims, stride, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), dims.1)?,
            relu,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.graph.relu(y) } else { y })
    }
}

/// Two 3×3 conv-BN layers with an identity or projected shortcut.
pub(crate) struct Residual {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Residual {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let first = ConvBn::new(store, &format!("{name}.conv1"), (cin, cout, 3), stride, true, rng)?;
        let second = ConvBn::new(store, &format!("{name}.conv2"), (cout, cout, 3), 1, false, rng)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(ConvBn::new(store, &format!("{name}.shortcut"), (cin, cout, 1), stride, false, rng)?)
        } else {
            None
        };
        Ok(Self { first, second, shortcut })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        let y = self.second.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        let sum = cx.graph.add(y, skip)?;
        Ok(cx.graph.relu(sum))
    }
}

/// One DSTM set function: a single conv-BN-ReLU layer or a residual block.
pub(crate) enum Block {
    Single(ConvBn),
    Residual(Residual),
}

impl Block {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Single(l) => l.forward(cx, x),
            Block::Residual(r) => r.forward(cx, x),
        }
    }
}
