//! Parameter storage and the transformer building blocks shared by the
//! prior, the backbone and the diffusion head.

use crate::numerics::{Graph, NumericsError, ParamId, Real, Rng, Tensor, Var};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let s = S::lit(std);
        let t = Tensor::from_fn(shape, |_| rng.normal::<S>() * s);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, S::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Replaces every tensor; names and shapes must match exactly.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor<S>>) -> Result<(), NumericsError> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(NumericsError::InvalidArgument("parameter names differ from model layout".into()));
        }
        for (cur, new) in self.values.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "load",
                    left: cur.shape().to_vec(),
                    right: new.shape().to_vec(),
                });
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn var(&self, g: &mut Graph<S>, id: ParamId) -> Var {
        g.param(id, self.get(id))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_std(store, name, fan_in, fan_out, std, rng)
    }

    pub fn with_std<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var, NumericsError> {
        let w = store.var(g, self.weight);
        let b = store.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[width]),
            beta: store.zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var, NumericsError> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multiplies by a Bernoulli keep-mask scaled by `1/(1-p)`.
pub fn dropout<S: Real>(g: &mut Graph<S>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var, NumericsError> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = S::lit(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.uniform::<f64>() < p { S::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Multi-head self-attention over `batch` sequences of length `seq`
/// stacked row-wise in a `[batch·seq, width]` matrix.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must be divisible by heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
            width,
        }
    }

    /// `mask` is an additive `[seq, seq]` bias (e.g. `-1e9` above the
    /// diagonal for causal attention).
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<Var>,
    ) -> Result<Var, NumericsError> {
        let w = self.width;
        let dh = w / self.heads;
        let qkv = self.qkv.forward(g, store, x)?;
        let qkv = g.split(qkv, &[w, w, w], 1)?;
        let per_seq = |g: &mut Graph<S>, v: Var| -> Result<Vec<Var>, NumericsError> {
            if batch == 1 {
                Ok(vec![v])
            } else {
                g.split(v, &vec![seq; batch], 0)
            }
        };
        let (qs, ks, vs) = (per_seq(g, qkv[0])?, per_seq(g, qkv[1])?, per_seq(g, qkv[2])?);
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let head_sizes = vec![dh; self.heads];
        let mut outs = Vec::with_capacity(batch);
        for b in 0..batch {
            let qh = g.split(qs[b], &head_sizes, 1)?;
            let kh = g.split(ks[b], &head_sizes, 1)?;
            let vh = g.split(vs[b], &head_sizes, 1)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let kt = g.transpose(kh[h])?;
                let scores = g.matmul(qh[h], kt)?;
                let mut scores = g.scale(scores, scale)?;
                if let Some(m) = mask {
                    scores = g.add(scores, m)?;
                }
                let attn = g.softmax(scores)?;
                heads.push(g.matmul(attn, vh[h])?);
            }
            outs.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
        self.out.forward(g, store, merged)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * width, width, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        batch: usize,
        seq: usize,
        mask: Option<Var>,
        dropout_p: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, NumericsError> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, batch, seq, mask)?;
        let a = dropout(g, a, dropout_p, rng.as_deref_mut())?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        let h = dropout(g, h, dropout_p, rng)?;
        g.add(x, h)
    }
}

/// Additive causal mask: 0 on and below the diagonal, a large negative
/// value above it.
pub fn causal_mask<S: Real>(seq: usize) -> Tensor<S> {
    Tensor::from_fn(&[seq, seq], |i| {
        if i % seq > i / seq {
            S::lit(-1e9)
        } else {
            S::zero()
        }
    })
}

/// Sinusoidal features of integer positions / timesteps, `[n, dim]`.
pub fn sinusoidal<S: Real>(values: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[values.len(), dim], |i| {
        let (r, c) = (i / dim, i % dim);
        let k = c % half.max(1);
        let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        let arg = values[r] as f64 * freq;
        S::lit(if c < half { arg.cos() } else { arg.sin() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn attention_is_permutation_equivariant_without_positions() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", 8, 2, &mut rng);
        let seq = 5;
        let x = Tensor::from_fn(&[seq, 8], |_| rng.normal());
        let perm = [3usize, 0, 4, 1, 2];
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::inference();
            let v = g.constant(input.clone());
            let y = block.forward(&mut g, &store, v, 1, seq, None, 0.0, None).unwrap();
            g.value(y).clone()
        };
        let y = run(&x);
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(x.row(p));
        }
        let yp = run(&Tensor::new(vec![seq, 8], xp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", 4, 2, &mut rng);
        let x = Tensor::from_fn(&[6, 4], |_| rng.normal());
        let mask = causal_mask::<f64>(3);
        let err = grad_check(
            |g, v| {
                let m = g.constant(mask.clone());
                let y = block.forward(g, &store, v, 2, 3, Some(m), 0.0, None)?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
