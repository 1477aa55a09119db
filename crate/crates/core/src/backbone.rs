//! Masked bidirectional transformer over continuous tokens, optionally
//! conditioned on the full discrete sequence through an embedded prefix.
//! Its outputs at masked positions are the latents fed to the diffusion head.

use serde::{Deserialize, Serialize};

use crate::diffhead::{diffusion_loss, DiffHead, DiffHeadConfig};
use crate::nn::{Block, LayerNorm, Linear, ParamStore};
use crate::numerics::{Graph, NumericsError, ParamId, Real, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Prefix,
    Disabled,
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::Prefix => "prefix",
            Conditioning::Disabled => "disabled",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisConConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub token_dim: usize,
    pub vocab: usize,
    pub n_classes: usize,
    pub mask_ratio_lo: f64,
    pub mask_ratio_hi: f64,
    pub conditioning: Conditioning,
    pub dropout: f64,
    pub head_depth: usize,
    pub head_width: usize,
    pub diffusion_steps: usize,
    /// Noise draws per masked token in the training loss.
    pub diffusion_repeats: usize,
    /// See [`DiffHeadConfig::x0_clip`].
    #[serde(default)]
    pub x0_clip: Option<f64>,
}

impl Default for DisConConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            width: 128,
            heads: 4,
            seq_len: 16,
            token_dim: 2,
            vocab: 16,
            n_classes: 4,
            mask_ratio_lo: 0.7,
            mask_ratio_hi: 1.0,
            conditioning: Conditioning::Prefix,
            dropout: 0.0,
            head_depth: 3,
            head_width: 128,
            diffusion_steps: 100,
            diffusion_repeats: 4,
            x0_clip: Some(5.0),
        }
    }
}

impl DisConConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |m: &str| Err(NumericsError::InvalidArgument(format!("discon config: {m}")));
        if [self.layers, self.width, self.heads, self.token_dim, self.vocab, self.n_classes, self.head_depth]
            .contains(&0)
        {
            return bad("sizes must be positive");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if !(self.mask_ratio_lo > 0.0 && self.mask_ratio_lo <= self.mask_ratio_hi && self.mask_ratio_hi <= 1.0) {
            return bad("mask ratio range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) || self.diffusion_repeats == 0 || self.head_width < 2 {
            return bad("dropout in [0,1), repeats >= 1, head_width >= 2");
        }
        Ok(())
    }

    pub fn z_dim(&self) -> usize {
        self.width
    }

    pub fn head_config(&self) -> DiffHeadConfig {
        DiffHeadConfig {
            depth: self.head_depth,
            width: self.head_width,
            token_dim: self.token_dim,
            z_dim: self.z_dim(),
            steps: self.diffusion_steps,
            x0_clip: self.x0_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskState {
    /// `true` = hidden.
    pub mask: Vec<bool>,
    /// The masked positions in the order they will be revealed.
    pub reveal_order: Vec<usize>,
}

impl MaskState {
    pub fn all_masked(m: usize, rng: &mut Rng) -> Self {
        Self {
            mask: vec![true; m],
            reveal_order: rng.permutation(m),
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Number of hidden positions for a mask ratio: `ratio·M` rounded half up,
/// clamped to `[1, M]`.
pub fn mask_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64 + 0.5).floor() as usize).clamp(1, m)
}

pub fn sample_mask(m: usize, lo: f64, hi: f64, rng: &mut Rng) -> Result<MaskState, NumericsError> {
    if m < 2 || !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(NumericsError::InvalidArgument(format!("sample_mask(M={m}, [{lo}, {hi}])")));
    }
    let ratio = if lo == hi { lo } else { rng.uniform_range(lo, hi) };
    let k = mask_count(ratio, m);
    let order = rng.permutation(m);
    let mut mask = vec![false; m];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(MaskState {
        mask,
        reveal_order: order[..k].to_vec(),
    })
}

/// One batch element for the backbone.
pub struct Context<'a, S> {
    /// `M×d` normalized continuous tokens (masked values are ignored).
    pub x_c: &'a [S],
    pub x_d: &'a [usize],
    pub class: usize,
    /// Hidden positions.
    pub mask: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: DisConConfig,
    cls_emb: ParamId,
    mask_emb: ParamId,
    pos_emb: ParamId,
    input: Linear,
    /// Token table and positional table of the discrete prefix; absent when
    /// conditioning is disabled.
    prefix: Option<(ParamId, ParamId)>,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    z_proj: Linear,
}

impl Backbone {
    pub fn new<S: Real>(store: &mut ParamStore<S>, config: DisConConfig, rng: &mut Rng) -> Result<Self, NumericsError> {
        config.validate()?;
        let (w, m) = (config.width, config.seq_len);
        let cls_emb = store.normal("backbone.cls_emb", &[config.n_classes, w], 0.02, rng);
        let mask_emb = store.normal("backbone.mask_emb", &[w], 0.02, rng);
        let pos_emb = store.normal("backbone.pos_emb", &[m, w], 0.02, rng);
        let input = Linear::new(store, "backbone.input", config.token_dim, w, rng);
        let prefix = match config.conditioning {
            Conditioning::Prefix => {
                let tok = store.normal("backbone.disc_emb", &[config.vocab, w], 0.02, rng);
                let pos = store.get(pos_emb).clone();
                let pos = store.add("backbone.disc_pos_emb", pos);
                Some((tok, pos))
            }
            Conditioning::Disabled => None,
        };
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("backbone.block{i}"), w, config.heads, rng))
            .collect();
        Ok(Self {
            ln_f: LayerNorm::new(store, "backbone.ln_f", w),
            z_proj: Linear::new(store, "backbone.z_proj", w, config.z_dim(), rng),
            config,
            cls_emb,
            mask_emb,
            pos_emb,
            input,
            prefix,
            blocks,
        })
    }

    /// Length of one backbone sequence: class token, optional discrete
    /// prefix, continuous positions.
    pub fn seq_len(&self) -> usize {
        let m = self.config.seq_len;
        1 + m + if self.prefix.is_some() { m } else { 0 }
    }

    fn check<S>(&self, batch: &[Context<'_, S>]) -> Result<(), NumericsError> {
        let (m, d) = (self.config.seq_len, self.config.token_dim);
        for c in batch {
            if c.x_c.len() != m * d || c.mask.len() != m || c.x_d.len() != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "backbone context",
                    left: vec![c.x_c.len() / d.max(1), c.mask.len(), c.x_d.len()],
                    right: vec![m, m, m],
                });
            }
            if let Some(&t) = c.x_d.iter().find(|&&t| t >= self.config.vocab) {
                return Err(NumericsError::IndexOutOfRange {
                    op: "backbone token",
                    index: t,
                    bound: self.config.vocab,
                });
            }
            if c.class >= self.config.n_classes {
                return Err(NumericsError::IndexOutOfRange {
                    op: "backbone class",
                    index: c.class,
                    bound: self.config.n_classes,
                });
            }
        }
        Ok(())
    }

    /// Latents `[rows, z_dim]` for the requested `(batch index, position)`
    /// pairs, which must be masked positions.
    pub fn encode<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        batch: &[Context<'_, S>],
        targets: &[(usize, usize)],
        mut rng: Option<&mut Rng>,
    ) -> Result<Var, NumericsError> {
        self.check(batch)?;
        let (m, d, w) = (self.config.seq_len, self.config.token_dim, self.config.width);
        let b = batch.len();
        for &(s, i) in targets {
            if s >= b || i >= m || !batch[s].mask[i] {
                return Err(NumericsError::InvalidArgument(format!("latent requested at unmasked slot ({s}, {i})")));
            }
        }
        let tiled: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let pos = store.var(g, self.pos_emb);
        let pos = g.gather_rows(pos, &tiled)?;

        // Continuous rows: projected token where visible, mask embedding where hidden.
        let x_c: Vec<S> = batch.iter().flat_map(|c| c.x_c.iter().copied()).collect();
        let x_c = g.constant(Tensor::new(vec![b * m, d], x_c)?);
        let proj = self.input.forward(g, store, x_c)?;
        let hidden = |c: &Context<'_, S>, i: usize| c.mask[i];
        let keep = Tensor::from_fn(&[b * m, w], |k| {
            let (r, _) = (k / w, k % w);
            if hidden(&batch[r / m], r % m) {
                S::zero()
            } else {
                S::one()
            }
        });
        let hide = keep.map(|v| S::one() - v);
        let keep = g.constant(keep);
        let hide = g.constant(hide);
        let visible = g.mul(proj, keep)?;
        let mask_emb = store.var(g, self.mask_emb);
        let masked = g.mul(hide, mask_emb)?;
        let cont = g.add(visible, masked)?;
        let cont = g.add(cont, pos)?;

        let classes: Vec<usize> = batch.iter().map(|c| c.class).collect();
        let cls = store.var(g, self.cls_emb);
        let cls = g.embedding(cls, &classes)?;

        let mut blocks = vec![cls];
        let mut offsets = vec![0usize, b];
        if let Some((tok, dpos)) = self.prefix {
            let ids: Vec<usize> = batch.iter().flat_map(|c| c.x_d.iter().copied()).collect();
            let tok = store.var(g, tok);
            let disc = g.embedding(tok, &ids)?;
            let dpos = store.var(g, dpos);
            let dpos = g.gather_rows(dpos, &tiled)?;
            blocks.push(g.add(disc, dpos)?);
            offsets.push(b + b * m);
        }
        let cont_off = *offsets.last().expect("non-empty");
        blocks.push(cont);
        let stacked = g.concat(&blocks, 0)?;

        // Reorder rows so each sequence is contiguous.
        let with_prefix = self.prefix.is_some();
        let mut order = Vec::with_capacity(b * self.seq_len());
        for s in 0..b {
            order.push(s);
            if with_prefix {
                order.extend((0..m).map(|i| b + s * m + i));
            }
            order.extend((0..m).map(|i| cont_off + s * m + i));
        }
        let mut x = g.gather_rows(stacked, &order)?;
        let l = self.seq_len();
        for block in &self.blocks {
            x = block.forward(g, store, x, b, l, None, self.config.dropout, rng.as_deref_mut())?;
        }
        let rows: Vec<usize> = targets.iter().map(|&(s, i)| s * l + (l - m) + i).collect();
        let picked = g.gather_rows(x, &rows)?;
        let picked = self.ln_f.forward(g, store, picked)?;
        self.z_proj.forward(g, store, picked)
    }
}

/// Backbone and diffusion head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DisConModel<S> {
    pub config: DisConConfig,
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub head: DiffHead<S>,
}

/// One training example in normalized space.
pub struct TrainItem<'a, S> {
    pub x_c: &'a [S],
    pub x_d: &'a [usize],
    pub class: usize,
}

impl<S: Real> DisConModel<S> {
    pub fn new(config: DisConConfig, seed: u64) -> Result<Self, NumericsError> {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.clone(), &mut rng)?;
        let head = DiffHead::new(&mut store, "head", config.head_config(), &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    /// Masks each item at a random ratio and returns the diffusion loss on
    /// the hidden tokens. Masks come from `mask_rng`; noise, timesteps and
    /// dropout from `rng`.
    pub fn loss(
        &self,
        g: &mut Graph<S>,
        items: &[TrainItem<'_, S>],
        rng: &mut Rng,
        train: bool,
    ) -> Result<Var, NumericsError> {
        let c = &self.config;
        let masks: Vec<MaskState> = items
            .iter()
            .map(|_| sample_mask(c.seq_len, c.mask_ratio_lo, c.mask_ratio_hi, rng))
            .collect::<Result<_, _>>()?;
        self.loss_with_masks(g, items, &masks, rng, train)
    }

    pub fn loss_with_masks(
        &self,
        g: &mut Graph<S>,
        items: &[TrainItem<'_, S>],
        masks: &[MaskState],
        rng: &mut Rng,
        train: bool,
    ) -> Result<Var, NumericsError> {
        let d = self.config.token_dim;
        let ctx: Vec<Context<'_, S>> = items
            .iter()
            .zip(masks)
            .map(|(it, m)| Context {
                x_c: it.x_c,
                x_d: it.x_d,
                class: it.class,
                mask: &m.mask,
            })
            .collect();
        let mut targets = Vec::new();
        let mut x0 = Vec::new();
        for (s, m) in masks.iter().enumerate() {
            for i in m.masked_positions() {
                targets.push((s, i));
                x0.extend_from_slice(&items[s].x_c[i * d..(i + 1) * d]);
            }
        }
        let n = targets.len();
        let z = self
            .backbone
            .encode(g, &self.store, &ctx, &targets, if train { Some(&mut *rng) } else { None })?;
        let x0 = Tensor::new(vec![n, d], x0)?;
        diffusion_loss(&self.head.bind(&self.store), g, z, &x0, self.config.diffusion_repeats, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(conditioning: Conditioning) -> DisConConfig {
        DisConConfig {
            layers: 2,
            width: 8,
            heads: 2,
            seq_len: 4,
            token_dim: 2,
            vocab: 3,
            n_classes: 2,
            conditioning,
            head_depth: 1,
            head_width: 8,
            diffusion_steps: 10,
            diffusion_repeats: 1,
            ..DisConConfig::default()
        }
    }

    fn encode(model: &DisConModel<f64>, x_c: &[f64], x_d: &[usize], mask: &[bool]) -> Tensor<f64> {
        let mut g = Graph::inference();
        let ctx = [Context { x_c, x_d, class: 1, mask }];
        let targets: Vec<(usize, usize)> = (0..4).filter(|&i| mask[i]).map(|i| (0, i)).collect();
        let z = model.backbone.encode(&mut g, &model.store, &ctx, &targets, None).unwrap();
        g.value(z).clone()
    }

    #[test]
    fn mask_counts() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_mask(16, 1.0, 1.0, &mut rng).unwrap().count(), 16);
        let st = sample_mask(16, 0.5, 0.5, &mut rng).unwrap();
        assert_eq!(st.count(), 8);
        let mut sorted = st.reveal_order.clone();
        sorted.sort();
        assert_eq!(sorted, st.masked_positions());
        assert!(sample_mask(1, 0.5, 0.5, &mut rng).is_err());
        assert_eq!(mask_count(0.01, 16), 1);
    }

    #[test]
    fn fully_masked_latents_ignore_continuous_values() {
        let model = DisConModel::<f64>::new(cfg(Conditioning::Prefix), 1).unwrap();
        let mask = [true; 4];
        let a = encode(&model, &[0.5; 8], &[0, 1, 2, 0], &mask);
        let b = encode(&model, &[-3.0; 8], &[0, 1, 2, 0], &mask);
        assert_eq!(a, b);
        let c = encode(&model, &[0.5; 8], &[2, 1, 2, 0], &mask);
        assert_ne!(a, c);
    }

    #[test]
    fn disabled_conditioning_ignores_discrete_tokens() {
        let model = DisConModel::<f64>::new(cfg(Conditioning::Disabled), 1).unwrap();
        assert!(model.store.find("backbone.disc_emb").is_none());
        let mask = [true, false, true, false];
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let a = encode(&model, &x, &[0, 0, 0, 0], &mask);
        let b = encode(&model, &x, &[2, 1, 2, 1], &mask);
        assert_eq!(a, b);
    }

    #[test]
    fn visible_tokens_reach_masked_latents() {
        let model = DisConModel::<f64>::new(cfg(Conditioning::Prefix), 2).unwrap();
        let mask = [true, false, true, true];
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let a = encode(&model, &x, &[0, 1, 2, 0], &mask);
        let mut y = x;
        y[2] += 1.0;
        let b = encode(&model, &y, &[0, 1, 2, 0], &mask);
        assert!(a.max_abs_diff(&b) > 1e-6);
        let mut z = x;
        z[0] += 1.0;
        assert_eq!(encode(&model, &z, &[0, 1, 2, 0], &mask), a);
    }

    #[test]
    fn unmasked_targets_are_rejected() {
        let model = DisConModel::<f64>::new(cfg(Conditioning::Prefix), 2).unwrap();
        let mut g = Graph::inference();
        let mask = [true, false, true, true];
        let ctx = [Context { x_c: &[0.0; 8], x_d: &[0; 4], class: 0, mask: &mask }];
        assert!(model.backbone.encode(&mut g, &model.store, &ctx, &[(0, 1)], None).is_err());
        let ctx = [Context { x_c: &[0.0; 6], x_d: &[0; 4], class: 0, mask: &mask }];
        assert!(model.backbone.encode(&mut g, &model.store, &ctx, &[(0, 0)], None).is_err());
    }

    #[test]
    fn discrete_table_receives_gradient() {
        let model = DisConModel::<f64>::new(cfg(Conditioning::Prefix), 3).unwrap();
        let mut rng = Rng::new(5);
        let x: Vec<f64> = rng.normal_vec(8);
        let items = [TrainItem { x_c: &x, x_d: &[0, 1, 2, 1], class: 0 }];
        let mut g = Graph::new();
        let l = model.loss(&mut g, &items, &mut rng, true).unwrap();
        let grads = g.backward(l).unwrap();
        let id = model.store.find("backbone.disc_emb").unwrap();
        let gr = grads.param(id).unwrap();
        assert!(gr.data().iter().any(|v| *v != 0.0));
    }
}
