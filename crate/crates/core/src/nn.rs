//! Parameterized building blocks. Each block holds [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Tape`].

use rand::Rng;

use crate::tensor::{Mask, ParamId, ParamStore, Result, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

fn xavier<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (din + dout) as f64).sqrt();
    Tensor::randn(vec![din, dout], std, rng)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), xavier(din, dout, rng))?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![dout]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![d]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer position-wise network with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, dropout)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            // a key bias shifts every score in a row equally and never
            // changes the weights
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }

    /// `query: [n, d]`, `memory: [m, d]`; `mask` broadcasts to `[heads, n, m]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        self.forward_with_weights(tape, store, query, memory, mask)
            .map(|(out, _)| out)
    }

    /// Also returns the `[heads, n, m]` attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<&Mask>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(query)[0];
        let m = tape.shape(memory)[0];
        let d = tape.shape(query)[1];
        let h = self.heads;
        let dh = d / h;
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let q = tape.reshape(q, vec![n, h, dh])?;
        let q = tape.permute(q, &[1, 0, 2])?;
        let k = tape.reshape(k, vec![m, h, dh])?;
        let kt = tape.permute(k, &[1, 2, 0])?;
        let v = tape.reshape(v, vec![m, h, dh])?;
        let v = tape.permute(v, &[1, 0, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax(scores, 2, mask)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, vec![n, d])?;
        let out = self.o.forward(tape, store, ctx)?;
        Ok((out, weights))
    }
}

/// Sinusoidal position table `[n, d]`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("sized above")
}
