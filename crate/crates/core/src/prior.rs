//! Class-conditional causal transformer over discrete token sequences,
//! sampled left to right with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::nn::{causal_mask, Block, LayerNorm, Linear, ParamStore};
use crate::numerics::{Graph, NumericsError, ParamId, Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub cfg_null_prob: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            vocab: 16,
            seq_len: 16,
            n_classes: 4,
            dropout: 0.0,
            cfg_null_prob: 0.1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |m: &str| Err(NumericsError::InvalidArgument(format!("prior config: {m}")));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.vocab == 0 || self.seq_len == 0 || self.n_classes == 0 {
            return bad("sizes must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.cfg_null_prob) {
            return bad("dropout and cfg_null_prob must lie in [0, 1)");
        }
        Ok(())
    }

    /// Index of the learned unconditional class embedding.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }
}

#[derive(Clone, Debug)]
pub struct PriorModel<S> {
    pub config: PriorConfig,
    pub store: ParamStore<S>,
    tok_emb: ParamId,
    cls_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl<S: Real> PriorModel<S> {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self, NumericsError> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let tok_emb = store.normal("prior.tok_emb", &[config.vocab, w], 0.02, &mut rng);
        let cls_emb = store.normal("prior.cls_emb", &[config.n_classes + 1, w], 0.02, &mut rng);
        let pos_emb = store.normal("prior.pos_emb", &[config.seq_len, w], 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut store, &format!("prior.block{i}"), w, config.heads, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "prior.ln_f", w);
        let head = Linear::with_std(&mut store, "prior.head", w, config.vocab, 0.02 / (w as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            store,
            tok_emb,
            cls_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    fn check_inputs(&self, tokens: &[usize], classes: &[usize]) -> Result<(), NumericsError> {
        let m = self.config.seq_len;
        if tokens.len() != classes.len() * m {
            return Err(NumericsError::ShapeMismatch {
                op: "prior",
                left: vec![tokens.len()],
                right: vec![classes.len(), m],
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(NumericsError::IndexOutOfRange {
                op: "prior token",
                index: t,
                bound: self.config.vocab,
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c > self.config.null_class()) {
            return Err(NumericsError::IndexOutOfRange {
                op: "prior class",
                index: c,
                bound: self.config.n_classes + 1,
            });
        }
        Ok(())
    }

    /// Next-token logits `[B·M, V]`: row `b·M + i` predicts token `i` of
    /// sequence `b` from its class and tokens `< i`. `classes` may contain
    /// the null class.
    pub fn logits(
        &self,
        g: &mut Graph<S>,
        tokens: &[usize],
        classes: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, NumericsError> {
        self.check_inputs(tokens, classes)?;
        let (m, b) = (self.config.seq_len, classes.len());
        let tok = self.store.var(g, self.tok_emb);
        let cls = self.store.var(g, self.cls_emb);
        let pos = self.store.var(g, self.pos_emb);
        // Position 0 sees the class; position i > 0 sees token i − 1.
        let mut parts = Vec::with_capacity(2 * b);
        for (s, &c) in classes.iter().enumerate() {
            parts.push(g.gather_rows(cls, &[c])?);
            if m > 1 {
                parts.push(g.embedding(tok, &tokens[s * m..s * m + m - 1])?);
            }
        }
        let x = g.concat(&parts, 0)?;
        let pos_rows: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let p = g.gather_rows(pos, &pos_rows)?;
        let mut x = g.add(x, p)?;
        let mask = g.constant(causal_mask(m));
        for block in &self.blocks {
            x = block.forward(g, &self.store, x, b, m, Some(mask), self.config.dropout, rng.as_deref_mut())?;
        }
        let x = self.ln_f.forward(g, &self.store, x)?;
        self.head.forward(g, &self.store, x)
    }

    /// Mean next-token cross-entropy. With `rng`, classes are replaced by
    /// the null class with probability `cfg_null_prob` and dropout is active.
    pub fn loss(
        &self,
        g: &mut Graph<S>,
        tokens: &[usize],
        classes: &[usize],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, NumericsError> {
        let classes: Vec<usize> = match rng.as_deref_mut() {
            Some(r) => classes
                .iter()
                .map(|&c| {
                    if r.uniform::<f64>() < self.config.cfg_null_prob {
                        self.config.null_class()
                    } else {
                        c
                    }
                })
                .collect(),
            None => classes.to_vec(),
        };
        let logits = self.logits(g, tokens, &classes, rng)?;
        g.cross_entropy(logits, tokens)
    }

    /// Per-position guided, tempered log-probabilities `[B·M, V]` for full
    /// sequences, matching what [`PriorModel::sample`] draws from.
    pub fn guided_log_probs(
        &self,
        tokens: &[usize],
        classes: &[usize],
        cfg_scale: f64,
        temperature: f64,
    ) -> Result<Tensor<S>, NumericsError> {
        let mut g = Graph::inference();
        let cond = self.logits(&mut g, tokens, classes, None)?;
        let cond = g.value(cond).clone();
        let null = if cfg_scale == 1.0 {
            None
        } else {
            let nulls = vec![self.config.null_class(); classes.len()];
            let v = self.logits(&mut g, tokens, &nulls, None)?;
            Some(g.value(v).clone())
        };
        let v = self.config.vocab;
        let (s, tau) = (S::lit(cfg_scale), S::lit(temperature));
        let mut out = cond.clone();
        for (r, row) in out.data_mut().chunks_mut(v).enumerate() {
            if let Some(null) = &null {
                let n = null.row(r);
                for (k, x) in row.iter_mut().enumerate() {
                    *x = n[k] + s * (*x - n[k]);
                }
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            for x in row.iter_mut() {
                *x = (*x - max) / tau;
            }
            let lse = row.iter().map(|x| x.exp()).sum::<S>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(out)
    }

    /// Log-probability of each full sequence under guided, tempered sampling.
    pub fn sequence_log_prob(
        &self,
        tokens: &[usize],
        classes: &[usize],
        cfg_scale: f64,
        temperature: f64,
    ) -> Result<Vec<S>, NumericsError> {
        let lp = self.guided_log_probs(tokens, classes, cfg_scale, temperature)?;
        let m = self.config.seq_len;
        Ok((0..classes.len())
            .map(|b| (0..m).map(|i| lp.at(b * m + i, tokens[b * m + i])).sum())
            .collect())
    }

    /// Ancestral left-to-right sampling, one sequence per entry of
    /// `classes`. Sequence `b` draws from `rng.split(b)`.
    pub fn sample(
        &self,
        classes: &[usize],
        cfg_scale: f64,
        temperature: f64,
        rng: &Rng,
    ) -> Result<Vec<usize>, NumericsError> {
        if !(temperature > 0.0) || !(cfg_scale >= 0.0) {
            return Err(NumericsError::InvalidArgument(
                "temperature must be positive and cfg_scale non-negative".into(),
            ));
        }
        let m = self.config.seq_len;
        let mut rngs: Vec<Rng> = (0..classes.len()).map(|b| rng.split(b as u64)).collect();
        let mut tokens = vec![0usize; classes.len() * m];
        for i in 0..m {
            let lp = self.guided_log_probs(&tokens, classes, cfg_scale, temperature)?;
            for (b, r) in rngs.iter_mut().enumerate() {
                let probs: Vec<S> = lp.row(b * m + i).iter().map(|x| x.exp()).collect();
                tokens[b * m + i] = r.categorical(&probs);
            }
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(layers: usize) -> PriorModel<f64> {
        PriorModel::new(
            PriorConfig {
                layers,
                width: 8,
                heads: 2,
                vocab: 5,
                seq_len: 6,
                n_classes: 3,
                dropout: 0.0,
                cfg_null_prob: 0.1,
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let m = tiny(2);
        let mut g = Graph::inference();
        let toks = vec![0, 1, 2, 3, 4, 0, 4, 4, 3, 2, 1, 0];
        let l = m.loss(&mut g, &toks, &[0, 2], None).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 0.01);
    }

    #[test]
    fn logits_depend_only_on_earlier_tokens() {
        for layers in 1..=3 {
            let m = tiny(layers);
            let base = vec![0, 1, 2, 3, 4, 0];
            let run = |t: &[usize]| {
                let mut g = Graph::inference();
                let l = m.logits(&mut g, t, &[1], None).unwrap();
                g.value(l).clone()
            };
            let a = run(&base);
            for j in 0..6 {
                let mut p = base.clone();
                p[j] = (p[j] + 2) % 5;
                let b = run(&p);
                for i in 0..6 {
                    let same = a.row(i) == b.row(i);
                    assert_eq!(same, i <= j, "layers {layers}, perturb {j}, row {i}");
                }
            }
        }
    }

    #[test]
    fn out_of_range_inputs_error() {
        let m = tiny(1);
        let mut g = Graph::inference();
        assert!(matches!(
            m.logits(&mut g, &[0, 0, 0, 0, 0, 5], &[0], None),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
        assert!(m.logits(&mut g, &[0; 6], &[4], None).is_err());
        assert!(m.logits(&mut g, &[0; 5], &[0], None).is_err());
    }

    #[test]
    fn unit_guidance_equals_conditional_logits() {
        let m = tiny(2);
        let toks = vec![1, 2, 3, 0, 4, 1];
        let guided = m.guided_log_probs(&toks, &[2], 1.0, 1.0).unwrap();
        let mut g = Graph::inference();
        let l = m.logits(&mut g, &toks, &[2], None).unwrap();
        let l = g.value(l);
        for i in 0..6 {
            let row = l.row(i);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            for k in 0..5 {
                assert!((guided.at(i, k) - (row[k] - lse)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_and_cold_sampling_is_greedy() {
        let m = tiny(2);
        let a = m.sample(&[0, 1, 2], 2.0, 1.0, &Rng::new(3)).unwrap();
        assert_eq!(a, m.sample(&[0, 1, 2], 2.0, 1.0, &Rng::new(3)).unwrap());

        let cold = m.sample(&[1], 1.5, 1e-6, &Rng::new(9)).unwrap();
        let lp = m.guided_log_probs(&cold, &[1], 1.5, 1.0).unwrap();
        for i in 0..6 {
            let row = lp.row(i);
            let argmax = (0..5).max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap()).unwrap();
            assert_eq!(cold[i], argmax);
        }
    }
}
