//! Small layers shared by the planner and the world model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.xavier(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Zeroes weight and bias, turning the layer into a constant-zero map.
    pub fn zero(&self, p: &mut ParamStore) {
        p.get_mut(self.weight).data_mut().fill(0.0);
        p.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Two-layer perceptron with a SiLU hidden activation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.silu(h);
        self.out.forward(g, p, h)
    }
}

/// `softmax(q·kᵀ·scale)·v`, returning the output and the attention weights.
pub fn softmax_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    if qv.cols() != kv.cols() || kv.rows() != vv.rows() {
        return Err(Error::Shape {
            op: "attention",
            lhs: qv.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::contract(format!("attention scale must be > 0, got {scale}")));
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale);
    let weights = g.softmax_rows(logits);
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Single-head attention of `queries` over `context`, without residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), query_dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, query_dim, rng),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, p, queries)?;
        let k = self.k.forward(g, p, context)?;
        let v = self.v.forward(g, p, context)?;
        let (att, _) = softmax_attention(g, q, k, v, 1.0 / (self.dim as f64).sqrt())?;
        self.o.forward(g, p, att)
    }
}

/// `x ← x + attn(x, ctx); x ← x + ffn(x)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub attn: Attention,
    pub ffn: Mlp,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: Attention::new(store, &format!("{name}.attn"), dim, context_dim, dim, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), (dim, 2 * dim, dim), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, context: Var) -> Result<Var> {
        let a = self.attn.forward(g, p, x, context)?;
        let x = g.add(x, a)?;
        let f = self.ffn.forward(g, p, x)?;
        g.add(x, f)
    }

    /// Zeroes both residual branches so the block is the identity.
    pub fn zero_residuals(&self, p: &mut ParamStore) {
        self.attn.o.zero(p);
        self.ffn.out.zero(p);
    }
}

/// Sinusoidal embedding of a scalar in `[0, 1]`.
pub fn sinusoidal_embedding(s: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * s * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::row(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights_of(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> (Tensor, Tensor) {
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let scale = 1.0 / (g.value(q).cols() as f64).sqrt();
        let (o, w) = softmax_attention(g, q, k, v, scale).unwrap();
        (g.value(o).clone(), g.value(w).clone())
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let k = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let v = Tensor::matrix(3, 1, vec![1.0, 2.0, 6.0]).unwrap();
        let (o, _) = weights_of(&mut g, q, k, v);
        assert!(o.data().iter().all(|x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let k = Tensor::row(vec![4.0, -3.0]);
        let v = Tensor::row(vec![7.0, -1.5, 0.25]);
        let (o, _) = weights_of(&mut g, q, k, v);
        assert_eq!(o.row_slice(0), &[7.0, -1.5, 0.25]);
        assert_eq!(o.row_slice(1), &[7.0, -1.5, 0.25]);
    }

    #[test]
    fn two_keys_with_log_three_logit_gap() {
        // q·k0 = 0 and q·k1 = ln 3 with scale 1
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![1.0]));
        let k = g.constant(Tensor::matrix(2, 1, vec![0.0, 3f64.ln()]).unwrap());
        let v = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let (o, w) = softmax_attention(&mut g, q, k, v, 1.0).unwrap();
        let w = g.value(w).data();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        let o = g.value(o).data();
        assert!((o[0] - 0.25).abs() < 1e-12 && (o[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_shape_mismatch() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(2, 3));
        let k = g.constant(Tensor::zeros(2, 2));
        let v = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            softmax_attention(&mut g, q, k, v, 1.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sinusoidal_embedding_is_bounded() {
        let e = sinusoidal_embedding(0.37, 16);
        assert_eq!(e.cols(), 16);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(sinusoidal_embedding(0.0, 4).data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
