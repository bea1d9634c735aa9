//! Transformer building blocks expressed on the autodiff [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian init with std `gain / sqrt(in_dim)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let std = gain / (in_dim as f32).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn([in_dim, out_dim], std, rng), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros([out_dim]), true);
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }

    /// Multiply-accumulates for `n` input rows.
    pub fn macs(&self, n: usize) -> u64 {
        (n * self.in_dim * self.out_dim) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled([dim], 1.0), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]), true);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(p, self.gamma);
        let beta = g.param(p, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention on already-projected inputs.
/// `q: [nq×C]`, `k, v: [nk×C]`; each head sees a `C/heads` column slice and
/// is scaled by `1/sqrt(C/heads)`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let c = g.value(q).cols();
    if heads == 0 || c % heads != 0 {
        return Err(Error::arg("heads", format!("channel width {c} not divisible by {heads} heads")));
    }
    if g.value(k).cols() != c || g.value(v).cols() != c {
        return Err(Error::shape("attention", "q, k, v widths differ"));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(Error::shape("attention", "k and v row counts differ"));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * d, d)?, g.slice_cols(k, h * d, d)?, g.slice_cols(v, h * d, d)?)
        };
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Attention with its own query/key/value/output projections.
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
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::arg("heads", format!("channel width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, 0.5, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.q.forward(g, p, xq)?;
        let k = self.k.forward(g, p, xkv)?;
        let v = self.v.forward(g, p, xkv)?;
        let a = attention(g, q, k, v, self.heads)?;
        self.o.forward(g, p, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, 0.5, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block: `x + Attn(LN x)`, then `x + MLP(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

pub const MLP_RATIO: usize = 4;

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, MLP_RATIO, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }

    /// Zero both residual-branch output projections, making the block the identity.
    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attn.o.zero(store);
        self.mlp.fc2.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = attention(&mut g, q, k, v, heads).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn single_key_attention_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let kv = Tensor::randn([1, 4], 1.0, &mut rng);
        let q = Tensor::randn([3, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
        let out = mha.forward(&mut g, &store, qv, kvv).unwrap();
        let out = g.value(out).clone();
        // Every row equals the projected single value row.
        let mut g2 = Graph::new();
        let x = g2.constant(kv);
        let v = mha.v.forward(&mut g2, &store, x).unwrap();
        let expect = mha.o.forward(&mut g2, &store, v).unwrap();
        let expect = g2.value(expect);
        for r in 0..3 {
            for (a, b) in out.row(r).iter().zip(expect.row(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_inputs_single_head() {
        let i = Tensor::eye(2);
        let out = run_attention(&i, &i, &i, 1);
        // Row 0: softmax([1, 0] / sqrt 2) = [e^{1/√2}, 1] / (e^{1/√2} + 1).
        let e = (1.0f32 / 2f32.sqrt()).exp();
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let want = [hi, lo, lo, hi];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn joint_kv_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn([3, 8], 1.0, &mut rng);
        let k = Tensor::randn([5, 8], 1.0, &mut rng);
        let v = Tensor::randn([5, 8], 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let out = run_attention(&q, &k, &v, 2);
        let out_p = run_attention(&q, &k.select_rows(&perm).unwrap(), &v.select_rows(&perm).unwrap(), 2);
        assert!(out.max_abs_diff(&out_p) < 1e-6);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let i = Tensor::eye(3);
        let mut g = Graph::new();
        let x = g.constant(i);
        assert!(attention(&mut g, x, x, x, 2).is_err());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let blk = TransformerBlock::new(&mut store, "b", 8, 2, &mut rng).unwrap();
        blk.zero_outputs(&mut store);
        let x = Tensor::randn([5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = blk.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }
}
