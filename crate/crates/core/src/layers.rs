//! Building blocks of the detector: CBS, bottleneck, C3 (plain and
//! attention-modified) and SPPF.

use pavescan_tensor::{NormMode, Pool, Real, Tensor, Var};

use crate::cbam::{self, CbamVars};
use crate::error::{Error, Result};
use crate::params::{Builder, Mode, ParamId, Session};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn build<T: Real>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = b.uniform("weight", &[cout, cin, k, k], fan_in);
        let bias = with_bias.then(|| b.uniform("bias", &[cout], fan_in));
        Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.var(self.weight);
        let b = self.bias.map(|b| s.var(b));
        Ok(s.tape.conv2d(x, w, b, self.stride, self.padding)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Self {
        Self {
            gamma: b.tensor("gamma", Tensor::ones([c]), true),
            beta: b.tensor("beta", Tensor::zeros([c]), true),
            running_mean: b.tensor("running_mean", Tensor::zeros([c]), false),
            running_var: b.tensor("running_var", Tensor::ones([c]), false),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.var(self.gamma), s.var(self.beta));
        let eps = T::of(BN_EPS);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.tape.batchnorm2d(x, g, b, NormMode::Train, eps)?;
                if let Some(stats) = stats {
                    s.push_bn_stats(self.running_mean, self.running_var, stats);
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                let mode = NormMode::Eval {
                    running_mean: store.get(self.running_mean).data(),
                    running_var: store.get(self.running_var).data(),
                };
                Ok(s.tape.batchnorm2d(x, g, b, mode, eps)?.0)
            }
        }
    }
}

/// Convolution, batch norm, SiLU.
#[derive(Clone, Debug)]
pub struct Cbs {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub cin: usize,
    pub cout: usize,
}

impl Cbs {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        b.scoped(name, |b| Self {
            conv: b.scoped("conv", |b| Conv::build(b, cin, cout, k, stride, false)),
            bn: b.scoped("bn", |b| BatchNorm::build(b, cout)),
            cin,
            cout,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_channels(s, x, self.cin, "CBS")?;
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.tape.silu(y))
    }
}

fn check_channels<T: Real>(s: &Session<'_, T>, x: Var, expected: usize, what: &str) -> Result<()> {
    let shape = s.tape.shape(x);
    if shape.len() != 4 || shape[1] != expected {
        return Err(Error::Config(format!(
            "{what} expects {expected} input channels, got shape {shape:?}"
        )));
    }
    Ok(())
}

/// `x + cv2(cv1(x))` when `shortcut`, else `cv2(cv1(x))`.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, c: usize, shortcut: bool) -> Self {
        b.scoped(name, |b| Self {
            cv1: Cbs::build(b, "cv1", c, c, 1, 1),
            cv2: Cbs::build(b, "cv2", c, c, 3, 1),
            shortcut,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(s, x)?;
        let y = self.cv2.forward(s, y)?;
        if self.shortcut {
            Ok(s.tape.add(x, y)?)
        } else {
            Ok(y)
        }
    }
}

/// Cross-stage partial block: `cv3(concat(bottlenecks(cv1(x)), cv2(x)))`.
#[derive(Clone, Debug)]
pub struct C3 {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub cv3: Cbs,
    pub m: Vec<Bottleneck>,
}

impl C3 {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, n: usize, shortcut: bool) -> Self {
        let hidden = (cout / 2).max(1);
        Self {
            cv1: Cbs::build(b, "cv1", cin, hidden, 1, 1),
            cv2: Cbs::build(b, "cv2", cin, hidden, 1, 1),
            cv3: Cbs::build(b, "cv3", 2 * hidden, cout, 1, 1),
            m: (0..n).map(|i| Bottleneck::build(b, &format!("m{i}"), hidden, shortcut)).collect(),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(s, x)?;
        for bottleneck in &self.m {
            a = bottleneck.forward(s, a)?;
        }
        let b = self.cv2.forward(s, x)?;
        let cat = s.tape.concat(&[a, b], 1)?;
        self.cv3.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub struct CbamLayer {
    pub w0: ParamId,
    pub w1: ParamId,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub channels: usize,
}

impl CbamLayer {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, c: usize, reduction: usize, with_bias: bool) -> Result<Self> {
        let r = cbam::effective_reduction(c, reduction)?;
        let hidden = c / r;
        let k = cbam::SPATIAL_KERNEL;
        Ok(b.scoped("cbam", |b| Self {
            w0: b.uniform("w0", &[hidden, c], c),
            w1: b.uniform("w1", &[c, hidden], hidden),
            kernel: b.uniform("spatial", &[1, 2, k, k], 2 * k * k),
            bias: with_bias.then(|| b.tensor("spatial_bias", Tensor::zeros([1]), true)),
            channels: c,
        }))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        check_channels(s, x, self.channels, "CBAM")?;
        if let Some(gate) = s.cbam_gate() {
            return Ok(s.tape.scale(x, gate));
        }
        let vars = CbamVars {
            w0: s.var(self.w0),
            w1: s.var(self.w1),
            kernel: s.var(self.kernel),
            bias: self.bias.map(|b| s.var(b)),
        };
        cbam::cbam_forward(s.tape, x, vars)
    }
}

/// C3 block whose first convolution is replaced by CBAM.
///
/// Wiring: branch A runs CBAM then the bottlenecks at the full input width
/// `C`; branches B1 and B2 are two parallel 1x1 CBS layers from the block
/// input; a closing 1x1 CBS maps `concat(A, B1, B2)` to `C_out`.
#[derive(Clone, Debug)]
pub struct C3Cbam {
    pub cbam: CbamLayer,
    pub m: Vec<Bottleneck>,
    pub branch1: Cbs,
    pub branch2: Cbs,
    pub out: Cbs,
}

impl C3Cbam {
    pub fn build<T: Real>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (cout / 2).max(1);
        Ok(Self {
            cbam: CbamLayer::build(b, cin, reduction, false)?,
            m: (0..n).map(|i| Bottleneck::build(b, &format!("m{i}"), cin, shortcut)).collect(),
            branch1: Cbs::build(b, "b1", cin, hidden, 1, 1),
            branch2: Cbs::build(b, "b2", cin, hidden, 1, 1),
            out: Cbs::build(b, "out", cin + 2 * hidden, cout, 1, 1),
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut a = self.cbam.forward(s, x)?;
        for bottleneck in &self.m {
            a = bottleneck.forward(s, a)?;
        }
        let b1 = self.branch1.forward(s, x)?;
        let b2 = self.branch2.forward(s, x)?;
        let cat = s.tape.concat(&[a, b1, b2], 1)?;
        self.out.forward(s, cat)
    }
}

#[derive(Clone, Debug)]
pub enum C3Block {
    Plain(C3),
    Cbam(C3Cbam),
}

impl C3Block {
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            C3Block::Plain(b) => b.forward(s, x),
            C3Block::Cbam(b) => b.forward(s, x),
        }
    }

    pub fn has_cbam(&self) -> bool {
        matches!(self, C3Block::Cbam(_))
    }
}

/// Spatial pyramid pooling (fast): three chained stride-1 max pools.
#[derive(Clone, Debug)]
pub struct Sppf {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub kernel: usize,
}

impl Sppf {
    pub fn build<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, kernel: usize) -> Self {
        let hidden = (cin / 2).max(1);
        Self {
            cv1: Cbs::build(b, "cv1", cin, hidden, 1, 1),
            cv2: Cbs::build(b, "cv2", 4 * hidden, cout, 1, 1),
            kernel,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let x = self.cv1.forward(s, x)?;
        let pool = Pool::MaxPool2d {
            kernel: self.kernel,
            stride: 1,
            padding: self.kernel / 2,
        };
        let y1 = s.tape.pool(x, pool)?;
        let y2 = s.tape.pool(y1, pool)?;
        let y3 = s.tape.pool(y2, pool)?;
        let cat = s.tape.concat(&[x, y1, y2, y3], 1)?;
        self.cv2.forward(s, cat)
    }
}
