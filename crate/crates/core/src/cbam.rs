//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! For a feature map `F` of shape `[N, C, H, W]`:
//!
//! ```text
//! M_C(F) = σ(W1·relu(W0·avgpool(F)) + W1·relu(W0·maxpool(F)))    [N, C, 1, 1]
//! M_S(F) = σ(conv7x7([avg_c(F); max_c(F)]))                       [N, 1, H, W]
//! F'  = M_C(F) ⊗ F
//! F'' = M_S(F') ⊗ F'
//! ```
//!
//! The MLP is bias-free with a ReLU between its two layers and a hidden
//! width of `C / r`. The same `W0`, `W1` serve both pooled descriptors.

use pavescan_tensor::{Pool, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Reduction ratio actually used for `channels`: `r` clamped so the hidden
/// width is at least one. Fails when the clamped ratio does not divide `C`.
pub fn effective_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 {
        return Err(Error::Config(format!(
            "CBAM needs positive channels and reduction, got C={channels}, r={reduction}"
        )));
    }
    let r = reduction.min(channels);
    if channels % r != 0 {
        return Err(Error::Config(format!(
            "CBAM reduction ratio {r} does not divide {channels} channels"
        )));
    }
    Ok(r)
}

fn shared_mlp<T: Real>(tape: &Tape<T>, pooled: Var, w0: Var, w1: Var, n: usize, c: usize) -> Result<Var> {
    let flat = tape.reshape(pooled, [n, c])?;
    let hidden = tape.linear(flat, w0)?;
    let hidden = tape.relu(hidden);
    Ok(tape.linear(hidden, w1)?)
}

/// Channel gate `M_C`, shape `[N, C, 1, 1]`.
pub fn channel_attention<T: Real>(tape: &Tape<T>, f: Var, w0: Var, w1: Var) -> Result<Var> {
    let (n, c, _, _) = tape.value(f).dims4("channel_attention")?;
    let avg = tape.pool(f, Pool::GlobalAvgSpatial)?;
    let max = tape.pool(f, Pool::GlobalMaxSpatial)?;
    let a = shared_mlp(tape, avg, w0, w1, n, c)?;
    let m = shared_mlp(tape, max, w0, w1, n, c)?;
    let s = tape.add(a, m)?;
    let gate = tape.sigmoid(s);
    Ok(tape.reshape(gate, [n, c, 1, 1])?)
}

/// Spatial gate `M_S`, shape `[N, 1, H, W]`.
pub fn spatial_attention<T: Real>(tape: &Tape<T>, f: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let avg = tape.pool(f, Pool::AvgOverChannels)?;
    let max = tape.pool(f, Pool::MaxOverChannels)?;
    let desc = tape.concat(&[avg, max], 1)?;
    let k = tape.shape(kernel);
    if k.len() != 4 || k[0] != 1 || k[1] != 2 || k[2] != k[3] || k[2] % 2 == 0 {
        return Err(Error::Config(format!(
            "spatial attention kernel must be [1, 2, k, k] with odd k, got {k:?}"
        )));
    }
    let logits = tape.conv2d(desc, kernel, bias, 1, k[2] / 2)?;
    Ok(tape.sigmoid(logits))
}

/// Variables of one CBAM block on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub w0: Var,
    pub w1: Var,
    pub kernel: Var,
    pub bias: Option<Var>,
}

/// `F'' = M_S(F') ⊗ F'` with `F' = M_C(F) ⊗ F`.
pub fn cbam_forward<T: Real>(tape: &Tape<T>, f: Var, p: CbamVars) -> Result<Var> {
    let c = tape.value(f).dims4("cbam")?.1;
    let w0 = tape.shape(p.w0);
    let w1 = tape.shape(p.w1);
    if w0.len() != 2 || w0[1] != c || w1 != [c, w0[0]] {
        return Err(Error::Config(format!(
            "CBAM weights {w0:?}/{w1:?} are not dimensioned for {c} channels"
        )));
    }
    let mc = channel_attention(tape, f, p.w0, p.w1)?;
    let f1 = tape.mul(f, mc)?;
    let ms = spatial_attention(tape, f1, p.kernel, p.bias)?;
    Ok(tape.mul(f1, ms)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams<T> {
    /// `[C/r, C]`
    pub w0: Tensor<T>,
    /// `[C, C/r]`
    pub w1: Tensor<T>,
    pub reduction: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams<T> {
    /// `[1, 2, 7, 7]`
    pub kernel: Tensor<T>,
    pub bias: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamBlock<T> {
    pub channel: ChannelAttentionParams<T>,
    pub spatial: SpatialAttentionParams<T>,
}

impl<T: Real> CbamBlock<T> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let r = effective_reduction(channels, reduction)?;
        let hidden = channels / r;
        Ok(Self {
            channel: ChannelAttentionParams {
                w0: Tensor::zeros([hidden, channels]),
                w1: Tensor::zeros([channels, hidden]),
                reduction: r,
            },
            spatial: SpatialAttentionParams {
                kernel: Tensor::zeros([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
                bias: None,
            },
        })
    }

    /// Uniform weights with bound `scale`.
    pub fn random(channels: usize, reduction: usize, scale: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut b = Self::zeros(channels, reduction)?;
        for t in [&mut b.channel.w0, &mut b.channel.w1, &mut b.spatial.kernel] {
            t.data_mut().iter_mut().for_each(|v| *v = T::of(rng.gen_range(-scale..scale)));
        }
        Ok(b)
    }

    pub fn channels(&self) -> usize {
        self.channel.w0.shape()[1]
    }

    /// Records the parameters on `tape` as constants or gradient leaves.
    pub fn vars(&self, tape: &Tape<T>, requires_grad: bool) -> CbamVars {
        CbamVars {
            w0: tape.leaf(self.channel.w0.clone(), requires_grad),
            w1: tape.leaf(self.channel.w1.clone(), requires_grad),
            kernel: tape.leaf(self.spatial.kernel.clone(), requires_grad),
            bias: self
                .spatial
                .bias
                .map(|b| tape.leaf(Tensor::new([1], vec![b]).expect("one element"), requires_grad)),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, f: Var) -> Result<Var> {
        let c = tape.value(f).dims4("cbam")?.1;
        if c != self.channels() {
            return Err(Error::Config(format!(
                "CBAM block built for {} channels applied to {c}",
                self.channels()
            )));
        }
        cbam_forward(tape, f, self.vars(tape, false))
    }

    pub fn channel_gate(&self, tape: &Tape<T>, f: Var) -> Result<Var> {
        let v = self.vars(tape, false);
        channel_attention(tape, f, v.w0, v.w1)
    }

    pub fn spatial_gate(&self, tape: &Tape<T>, f: Var) -> Result<Var> {
        let v = self.vars(tape, false);
        spatial_attention(tape, f, v.kernel, v.bias)
    }
}
