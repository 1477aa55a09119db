//! Finite-difference verification of every differentiable op and of the
//! three training losses, parameter tensor by parameter tensor.

use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, DisConConfig, DisConModel, TrainItem};
use crate::diffhead::{diffusion_loss, DiffHead, DiffHeadConfig};
use crate::nn::{Block, Linear, ParamStore};
use crate::numerics::{grad_check, Graph, NumericsError, ParamId, Rng, Tensor, Var};
use crate::prior::{PriorConfig, PriorModel};

pub const TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Check<'a> = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var, NumericsError> + 'a>;

/// Weighted sum with fixed weights, so every output element matters.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = Rng::new(seed);
    let w = Tensor::from_fn(g.shape(y), |_| rng.normal());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// One entry per op (and per differentiable argument of binary ops).
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckEntry>, NumericsError> {
    let mut rng = Rng::new(seed);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let same = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    let targets = [1usize, 3, 0];
    let cases: Vec<(&str, Tensor<f64>, Check<'_>)> = vec![
        ("matmul.lhs", a.clone(), Box::new(|g, x| {
            let c = g.constant(b.clone());
            let y = g.matmul(x, c)?;
            reduce(g, y, 1)
        })),
        ("matmul.rhs", b.clone(), Box::new(|g, x| {
            let c = g.constant(a.clone());
            let y = g.matmul(c, x)?;
            reduce(g, y, 2)
        })),
        ("add.broadcast_row", row.clone(), Box::new(|g, x| {
            let c = g.constant(a.clone());
            let y = g.add(c, x)?;
            reduce(g, y, 3)
        })),
        ("sub.lhs", a.clone(), Box::new(|g, x| {
            let c = g.constant(same.clone());
            let y = g.sub(x, c)?;
            reduce(g, y, 4)
        })),
        ("sub.rhs", same.clone(), Box::new(|g, x| {
            let c = g.constant(a.clone());
            let y = g.sub(c, x)?;
            reduce(g, y, 5)
        })),
        ("mul.elementwise", a.clone(), Box::new(|g, x| {
            let c = g.constant(same.clone());
            let y = g.mul(x, c)?;
            reduce(g, y, 6)
        })),
        ("mul.broadcast_row", row.clone(), Box::new(|g, x| {
            let c = g.constant(a.clone());
            let y = g.mul(c, x)?;
            reduce(g, y, 7)
        })),
        ("mul.square", a.clone(), Box::new(|g, x| {
            let y = g.mul(x, x)?;
            reduce(g, y, 8)
        })),
        ("scale", a.clone(), Box::new(|g, x| {
            let y = g.scale(x, -1.7)?;
            reduce(g, y, 9)
        })),
        ("transpose", a.clone(), Box::new(|g, x| {
            let y = g.transpose(x)?;
            reduce(g, y, 10)
        })),
        ("gather_rows", a.clone(), Box::new(|g, x| {
            let y = g.gather_rows(x, &[2, 0, 2, 1])?;
            reduce(g, y, 11)
        })),
        ("embedding", b.clone(), Box::new(|g, x| {
            let y = g.embedding(x, &[3, 3, 1])?;
            reduce(g, y, 12)
        })),
        ("concat.rows", a.clone(), Box::new(|g, x| {
            let c = g.constant(same.clone());
            let y = g.concat(&[x, c, x], 0)?;
            reduce(g, y, 13)
        })),
        ("concat.cols", a.clone(), Box::new(|g, x| {
            let c = g.constant(same.clone());
            let y = g.concat(&[c, x], 1)?;
            reduce(g, y, 14)
        })),
        ("split", a.clone(), Box::new(|g, x| {
            let parts = g.split(x, &[1, 3], 1)?;
            let l = reduce(g, parts[0], 15)?;
            let r = reduce(g, parts[1], 16)?;
            g.add(l, r)
        })),
        ("softmax", a.clone(), Box::new(|g, x| {
            let y = g.softmax(x)?;
            reduce(g, y, 17)
        })),
        ("layer_norm.input", a.clone(), Box::new(|g, x| {
            let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(x, ga, be)?;
            reduce(g, y, 18)
        })),
        ("layer_norm.gamma", gamma.clone(), Box::new(|g, x| {
            let (xa, be) = (g.constant(a.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(xa, x, be)?;
            reduce(g, y, 19)
        })),
        ("layer_norm.beta", beta.clone(), Box::new(|g, x| {
            let (xa, ga) = (g.constant(a.clone()), g.constant(gamma.clone()));
            let y = g.layer_norm(xa, ga, x)?;
            reduce(g, y, 20)
        })),
        ("gelu", a.clone(), Box::new(|g, x| {
            let y = g.gelu(x)?;
            reduce(g, y, 21)
        })),
        ("map.tanh", a.clone(), Box::new(|g, x| {
            let y = g.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2))?;
            reduce(g, y, 22)
        })),
        ("mse", a.clone(), Box::new(|g, x| {
            let c = g.constant(same.clone());
            g.mse(x, c)
        })),
        ("cross_entropy", a.clone(), Box::new(|g, x| g.cross_entropy(x, &targets))),
        ("sum", a.clone(), Box::new(|g, x| g.sum(x))),
        ("mean", a.clone(), Box::new(|g, x| g.mean(x))),
    ];
    cases
        .into_iter()
        .map(|(name, point, f)| {
            Ok(GradCheckEntry {
                name: format!("op.{name}"),
                max_rel_error: grad_check(f, &point, STEP)?,
            })
        })
        .collect()
}

/// Checks `loss` against finite differences in every parameter tensor of
/// `store`, reporting the worst tensor under `name`.
fn per_param<F>(name: &str, store: &ParamStore<f64>, loss: F) -> Result<GradCheckEntry, NumericsError>
where
    F: Fn(&mut Graph<f64>) -> Result<Var, NumericsError>,
{
    let mut worst = 0.0f64;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let f = |g: &mut Graph<f64>, p: Var| {
            g.bind_param(id, p);
            loss(g)
        };
        worst = worst.max(grad_check(f, store.get(id), STEP)?);
    }
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: worst,
    })
}

/// Small networks and the three model losses at random small configs.
pub fn model_suite(seed: u64) -> Result<Vec<GradCheckEntry>, NumericsError> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 3, 5, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 5, 2, &mut rng);
    let x = random(&[4, 3], &mut rng);
    out.push(per_param("mlp.two_layer", &store, |g| {
        let xv = g.constant(x.clone());
        let h = l1.forward(g, &store, xv)?;
        let h = g.gelu(h)?;
        let y = l2.forward(g, &store, h)?;
        reduce(g, y, 30)
    })?);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 3, 4, &mut rng);
    out.push(per_param("linear.cross_entropy", &store, |g| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, &store, xv)?;
        g.cross_entropy(y, &[0, 3, 2, 1])
    })?);

    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "blk", 6, 2, &mut rng);
    let xb = random(&[2 * 3, 6], &mut rng);
    let mask = crate::nn::causal_mask::<f64>(3);
    out.push(per_param("transformer_block.causal", &store, |g| {
        let xv = g.constant(xb.clone());
        let m = g.constant(mask.clone());
        let y = block.forward(g, &store, xv, 2, 3, Some(m), 0.0, None)?;
        reduce(g, y, 31)
    })?);

    let prior = PriorModel::<f64>::new(
        PriorConfig {
            layers: 1,
            width: 8,
            heads: 2,
            vocab: 5,
            seq_len: 3,
            n_classes: 2,
            dropout: 0.0,
            cfg_null_prob: 0.5,
        },
        rng.next_u64(),
    )?;
    let tokens = [4usize, 0, 2, 1, 1, 3];
    let classes = [1usize, 0];
    let prior_seed = rng.split(1);
    out.push(per_param("prior.loss", &prior.store, |g| {
        let mut r = prior_seed.clone();
        prior.loss(g, &tokens, &classes, Some(&mut r))
    })?);

    for cond in [Conditioning::Prefix, Conditioning::Disabled] {
        let model = DisConModel::<f64>::new(
            DisConConfig {
                layers: 1,
                width: 8,
                heads: 2,
                seq_len: 3,
                token_dim: 2,
                vocab: 4,
                n_classes: 2,
                mask_ratio_lo: 0.3,
                mask_ratio_hi: 1.0,
                conditioning: cond,
                dropout: 0.0,
                head_depth: 1,
                head_width: 6,
                diffusion_steps: 10,
                diffusion_repeats: 2,
                x0_clip: None,
            },
            rng.next_u64(),
        )?;
        let x_c: Vec<f64> = rng.normal_vec(12);
        let x_d = [0usize, 3, 1, 2, 2, 0];
        let step_seed = rng.split(2);
        out.push(per_param(&format!("discon.loss.{cond}"), &model.store, |g| {
            let items = [
                TrainItem { x_c: &x_c[..6], x_d: &x_d[..3], class: 0 },
                TrainItem { x_c: &x_c[6..], x_d: &x_d[3..], class: 1 },
            ];
            let mut r = step_seed.clone();
            model.loss(g, &items, &mut r, true)
        })?);
    }

    let mut store = ParamStore::new();
    let head = DiffHead::new(
        &mut store,
        "head",
        DiffHeadConfig {
            depth: 2,
            width: 6,
            token_dim: 2,
            z_dim: 4,
            steps: 20,
            x0_clip: None,
        },
        &mut rng,
    )?;
    let x0 = random(&[3, 2], &mut rng);
    let z = random(&[3, 4], &mut rng);
    let head_seed = rng.split(3);
    out.push(per_param("diffhead.loss", &store, |g| {
        let zv = g.constant(z.clone());
        let mut r = head_seed.clone();
        diffusion_loss(&head.bind(&store), g, zv, &x0, 2, &mut r)
    })?);
    Ok(out)
}

pub fn full_suite(seed: u64) -> Result<Vec<GradCheckEntry>, NumericsError> {
    let mut all = op_suite(seed)?;
    all.extend(model_suite(seed.wrapping_add(1))?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for e in op_suite(0).unwrap() {
            assert!(e.passed(), "{}: {}", e.name, e.max_rel_error);
        }
    }
}
