//! Per-token denoising diffusion head: cosine noise schedule, forward
//! noising, the ε-prediction loss and temperature-scaled ancestral sampling.

use serde::{Deserialize, Serialize};

use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::nn::sinusoidal;
use crate::numerics::{Graph, NumericsError, Real, Rng, Tensor, Var};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    /// `betas[t-1]` is β_t for t in 1..=T.
    pub betas: Vec<S>,
    pub alpha_bars: Vec<S>,
}

impl<S: Real> NoiseSchedule<S> {
    /// Cosine ᾱ schedule. β_t is clipped at 0.999 and ᾱ is then recomputed
    /// as the running product so the two stay consistent.
    pub fn cosine(steps: usize) -> Result<Self, NumericsError> {
        if steps < 2 {
            return Err(NumericsError::InvalidArgument("diffusion needs at least 2 steps".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = S::one();
        for t in 1..=steps {
            let beta = S::lit((1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA));
            prod *= S::one() - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<(), NumericsError> {
        if t == 0 || t > self.steps() {
            return Err(NumericsError::IndexOutOfRange {
                op: "noise schedule",
                index: t,
                bound: self.steps() + 1,
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<S, NumericsError> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t), zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> Result<S, NumericsError> {
        self.check_t(t)?;
        if t == 1 {
            return Ok(S::zero());
        }
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bars[t - 2];
        Ok(self.betas[t - 1] * (S::one() - ab_prev) / (S::one() - ab))
    }

    /// `x_t = √ᾱ_t x0 + √(1−ᾱ_t) ε`
    pub fn q_sample(&self, x0: &[S], t: usize, eps: &[S]) -> Result<Vec<S>, NumericsError> {
        Ok(q_sample_with(x0, eps, self.alpha_bar(t)?))
    }
}

/// Forward noising at an explicit ᾱ.
pub fn q_sample_with<S: Real>(x0: &[S], eps: &[S], alpha_bar: S) -> Vec<S> {
    let a = alpha_bar.sqrt();
    let b = (S::one() - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(x, e)| a * *x + b * *e).collect()
}

/// Anything that predicts the injected noise from `(x_t, t, z)`.
pub trait NoisePredictor<S: Real> {
    fn token_dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule<S>;
    /// `x_t`: `[n, d]`, `z`: `[n, z_dim]`, one timestep per row.
    fn predict(&self, g: &mut Graph<S>, x_t: Var, t: &[usize], z: Var) -> Result<Var, NumericsError>;
    /// Bound on each coordinate of the clean-token estimate during sampling.
    fn x0_clip(&self) -> Option<S> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffHeadConfig {
    pub depth: usize,
    pub width: usize,
    pub token_dim: usize,
    pub z_dim: usize,
    pub steps: usize,
    /// Clamp on the implied clean token during sampling, in normalized units.
    /// Without it a small head's noise error at the last, near-unit β is
    /// amplified about 30x and a few percent of samples run away.
    #[serde(default)]
    pub x0_clip: Option<f64>,
}

impl Default for DiffHeadConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 128,
            token_dim: 2,
            z_dim: 128,
            steps: 100,
            x0_clip: Some(5.0),
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm: LayerNorm,
    modulation: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// MLP head with residual blocks whose normalized input is shifted and
/// scaled by a projection of the combined timestep/latent condition.
#[derive(Clone, Debug)]
pub struct DiffHead<S> {
    pub config: DiffHeadConfig,
    pub schedule: NoiseSchedule<S>,
    input: Linear,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    blocks: Vec<ResBlock>,
    out_norm: LayerNorm,
    output: Linear,
}

impl<S: Real> DiffHead<S> {
    pub fn new(store: &mut ParamStore<S>, name: &str, config: DiffHeadConfig, rng: &mut Rng) -> Result<Self, NumericsError> {
        let w = config.width;
        if w < 2 || config.token_dim == 0 || config.z_dim == 0 || config.depth == 0 || config.x0_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(NumericsError::InvalidArgument(format!("invalid head config {config:?}")));
        }
        let schedule = NoiseSchedule::cosine(config.steps)?;
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("{name}.block{i}");
                ResBlock {
                    norm: LayerNorm::new(store, &format!("{n}.norm"), w),
                    modulation: Linear::with_std(store, &format!("{n}.mod"), w, 2 * w, 0.02, rng),
                    fc1: Linear::new(store, &format!("{n}.fc1"), w, w, rng),
                    fc2: Linear::new(store, &format!("{n}.fc2"), w, w, rng),
                }
            })
            .collect();
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), config.token_dim, w, rng),
            time1: Linear::new(store, &format!("{name}.time1"), w, w, rng),
            time2: Linear::new(store, &format!("{name}.time2"), w, w, rng),
            cond: Linear::new(store, &format!("{name}.cond"), config.z_dim, w, rng),
            blocks,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), w),
            output: Linear::new(store, &format!("{name}.output"), w, config.token_dim, rng),
            schedule,
            config,
        })
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore<S>) -> BoundHead<'a, S> {
        BoundHead { head: self, store }
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x_t: Var,
        t: &[usize],
        z: Var,
    ) -> Result<Var, NumericsError> {
        let temb = g.constant(sinusoidal(t, self.config.width));
        let temb = self.time1.forward(g, store, temb)?;
        let temb = g.gelu(temb)?;
        let temb = self.time2.forward(g, store, temb)?;
        let c = self.cond.forward(g, store, z)?;
        let c = g.add(temb, c)?;
        let c = g.gelu(c)?;
        let w = self.config.width;
        let mut h = self.input.forward(g, store, x_t)?;
        for b in &self.blocks {
            let y = b.norm.forward(g, store, h)?;
            let m = b.modulation.forward(g, store, c)?;
            let parts = g.split(m, &[w, w], 1)?;
            let scaled = g.mul(y, parts[1])?;
            let y = g.add(y, scaled)?;
            let y = g.add(y, parts[0])?;
            let y = b.fc1.forward(g, store, y)?;
            let y = g.gelu(y)?;
            let y = b.fc2.forward(g, store, y)?;
            h = g.add(h, y)?;
        }
        let h = self.out_norm.forward(g, store, h)?;
        self.output.forward(g, store, h)
    }
}

pub struct BoundHead<'a, S> {
    pub head: &'a DiffHead<S>,
    pub store: &'a ParamStore<S>,
}

impl<S: Real> NoisePredictor<S> for BoundHead<'_, S> {
    fn token_dim(&self) -> usize {
        self.head.config.token_dim
    }

    fn schedule(&self) -> &NoiseSchedule<S> {
        &self.head.schedule
    }

    fn x0_clip(&self) -> Option<S> {
        self.head.config.x0_clip.map(S::lit)
    }

    fn predict(&self, g: &mut Graph<S>, x_t: Var, t: &[usize], z: Var) -> Result<Var, NumericsError> {
        self.head.forward(g, self.store, x_t, t, z)
    }
}

/// Squared noise-prediction error `‖ε − ε̂‖²` averaged over tokens, with a
/// fresh `(t, ε)` drawn for each of `repeats` copies of every row.
///
/// `z` is `[n, z_dim]` (already in the graph so gradients reach the
/// backbone), `x0` is `[n, d]`.
pub fn diffusion_loss<S: Real, P: NoisePredictor<S>>(
    head: &P,
    g: &mut Graph<S>,
    z: Var,
    x0: &Tensor<S>,
    repeats: usize,
    rng: &mut Rng,
) -> Result<Var, NumericsError> {
    let d = head.token_dim();
    let n = x0.rows();
    if x0.cols() != d || g.shape(z)[0] != n || repeats == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "diffusion_loss",
            left: g.shape(z).to_vec(),
            right: x0.shape().to_vec(),
        });
    }
    let sched = head.schedule();
    let rows: Vec<usize> = (0..repeats).flat_map(|_| 0..n).collect();
    let mut ts = Vec::with_capacity(rows.len());
    let mut noise = Vec::with_capacity(rows.len() * d);
    let mut noisy = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        let t = 1 + rng.below(sched.steps());
        let eps: Vec<S> = rng.normal_vec(d);
        noisy.extend(sched.q_sample(x0.row(r), t, &eps)?);
        noise.extend(eps);
        ts.push(t);
    }
    let z_rep = if repeats == 1 { z } else { g.gather_rows(z, &rows)? };
    let x_t = g.constant(Tensor::new(vec![rows.len(), d], noisy)?);
    let eps = g.constant(Tensor::new(vec![rows.len(), d], noise)?);
    let pred = head.predict(g, x_t, &ts, z_rep)?;
    let mse = g.mse(pred, eps)?;
    let loss = g.scale(mse, S::from_usize_lossy(d))?;
    if !g.value(loss).item().is_finite() {
        return Err(NumericsError::NonFinite { op: "diffusion_loss" });
    }
    Ok(loss)
}

/// Ancestral sampling of one token per row of `z`.
///
/// Starts from `x_T ~ N(0, τ²I)` and scales every injected noise draw by τ.
/// Row `i` draws from `rng.split(i)`, so a row's result does not depend on
/// which other rows share the batch.
pub fn sample_tokens<S: Real, P: NoisePredictor<S>>(
    head: &P,
    z: &Tensor<S>,
    temperature: S,
    rng: &Rng,
) -> Result<Tensor<S>, NumericsError> {
    if !(temperature > S::zero()) {
        return Err(NumericsError::InvalidArgument("temperature must be positive".into()));
    }
    let d = head.token_dim();
    let n = z.rows();
    let sched = head.schedule();
    let mut rngs: Vec<Rng> = (0..n).map(|i| rng.split(i as u64)).collect();
    let mut x: Vec<S> = rngs
        .iter_mut()
        .flat_map(|r| r.normal_vec::<S>(d))
        .map(|v| v * temperature)
        .collect();
    let clip = head.x0_clip();
    for t in (1..=sched.steps()).rev() {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let xv = g.constant(Tensor::new(vec![n, d], x.clone())?);
        let ts = vec![t; n];
        let eps_hat = head.predict(&mut g, xv, &ts, zv)?;
        let eps_hat = g.value(eps_hat).data();
        let beta = sched.betas[t - 1];
        let ab = sched.alpha_bars[t - 1];
        let coef = beta / (S::one() - ab).sqrt();
        let inv_sqrt_alpha = S::one() / (S::one() - beta).sqrt();
        let sigma = sched.posterior_variance(t)?.sqrt() * temperature;
        let ab_prev = if t > 1 { sched.alpha_bars[t - 2] } else { S::one() };
        let c1 = ab_prev.sqrt() * beta / (S::one() - ab);
        let c2 = (S::one() - beta).sqrt() * (S::one() - ab_prev) / (S::one() - ab);
        for (i, r) in rngs.iter_mut().enumerate() {
            for c in 0..d {
                let k = i * d + c;
                if let Some(lim) = clip {
                    let x0 = ((x[k] - (S::one() - ab).sqrt() * eps_hat[k]) / ab.sqrt()).max(-lim).min(lim);
                    x[k] = c1 * x0 + c2 * x[k];
                } else {
                    x[k] = inv_sqrt_alpha * (x[k] - coef * eps_hat[k]);
                }
            }
            if t > 1 {
                for c in 0..d {
                    x[i * d + c] += sigma * r.normal::<S>();
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "sample_tokens" });
        }
    }
    Tensor::new(vec![n, d], x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    /// Knows the clean token through `z` and returns the exact noise.
    struct OracleHead(NoiseSchedule<f64>, usize);

    impl NoisePredictor<f64> for OracleHead {
        fn token_dim(&self) -> usize {
            self.1
        }
        fn schedule(&self) -> &NoiseSchedule<f64> {
            &self.0
        }
        fn predict(&self, g: &mut Graph<f64>, x_t: Var, t: &[usize], z: Var) -> Result<Var, NumericsError> {
            let d = self.1;
            let (xv, zv) = (g.value(x_t).clone(), g.value(z).clone());
            let out = Tensor::from_fn(&[t.len(), d], |k| {
                let ab = self.0.alpha_bars[t[k / d] - 1];
                (xv.data()[k] - ab.sqrt() * zv.data()[k]) / (1.0 - ab).sqrt()
            });
            Ok(g.constant(out))
        }
    }

    struct ZeroHead(NoiseSchedule<f64>, usize);

    impl NoisePredictor<f64> for ZeroHead {
        fn token_dim(&self) -> usize {
            self.1
        }
        fn schedule(&self) -> &NoiseSchedule<f64> {
            &self.0
        }
        fn predict(&self, g: &mut Graph<f64>, _x: Var, t: &[usize], _z: Var) -> Result<Var, NumericsError> {
            Ok(g.constant(Tensor::zeros(&[t.len(), self.1])))
        }
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = NoiseSchedule::<f64>::cosine(100).unwrap();
        assert!(s.alpha_bars[0] > 0.99);
        assert!(*s.alpha_bars.last().unwrap() < 0.05);
        assert!(*s.alpha_bars.last().unwrap() > 0.0);
        let mut prod = 1.0;
        for (i, b) in s.betas.iter().enumerate() {
            assert!(*b > 0.0);
            prod *= 1.0 - b;
            assert!((prod - s.alpha_bars[i]).abs() < 1e-12);
            if i > 0 {
                assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
            }
        }
    }

    #[test]
    fn q_sample_limits_and_range() {
        let s = NoiseSchedule::<f64>::cosine(100).unwrap();
        assert_eq!(q_sample_with(&[1.5, -2.0], &[0.3, 0.7], 1.0), vec![1.5, -2.0]);
        let x = s.q_sample(&[0.0, 0.0], 40, &[1.0, 0.0]).unwrap();
        assert!((x[0] - (1.0 - s.alpha_bars[39]).sqrt()).abs() < 1e-15);
        assert_eq!(x[1], 0.0);
        assert!(s.q_sample(&[0.0], 0, &[0.0]).is_err());
        assert!(s.q_sample(&[0.0], 101, &[0.0]).is_err());
    }

    #[test]
    fn oracle_head_has_zero_loss_and_zero_head_has_loss_d() {
        let d = 3;
        let sched = NoiseSchedule::cosine(50).unwrap();
        let mut rng = Rng::new(7);
        let x0 = Tensor::from_fn(&[200, d], |_| rng.normal::<f64>() * 2.0);
        let mut g = Graph::new();
        let z = g.constant(x0.clone());
        let l = diffusion_loss(&OracleHead(sched.clone(), d), &mut g, z, &x0, 2, &mut rng).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let x0 = Tensor::from_fn(&[10_000, d], |_| rng.normal::<f64>());
        let mut g = Graph::new();
        let z = g.constant(x0.clone());
        let l = diffusion_loss(&ZeroHead(sched, d), &mut g, z, &x0, 1, &mut rng).unwrap();
        let v = g.value(l).item();
        assert!((v - d as f64).abs() < 0.05 * d as f64, "{v}");
    }

    #[test]
    fn oracle_head_point_mass_at_low_temperature() {
        let d = 2;
        let head = OracleHead(NoiseSchedule::cosine(100).unwrap(), d);
        let c = [3.0, -1.5];
        let z = Tensor::from_fn(&[4, d], |k| c[k % d]);
        let out = sample_tokens(&head, &z, 1e-9, &Rng::new(1)).unwrap();
        for row in 0..4 {
            for k in 0..d {
                assert!((out.at(row, k) - c[k]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let cfg = DiffHeadConfig {
            depth: 2,
            width: 6,
            token_dim: 2,
            z_dim: 4,
            steps: 20,
            x0_clip: None,
        };
        let mut store = ParamStore::<f64>::new();
        let head = DiffHead::new(&mut store, "h", cfg, &mut rng).unwrap();
        let x0 = Tensor::from_fn(&[3, 2], |_| rng.normal());
        let z = Tensor::from_fn(&[3, 4], |_| rng.normal());
        let seed = Rng::new(99);
        for id in store.ids() {
            let f = |g: &mut Graph<f64>, p: Var| {
                let mut local = seed.clone();
                let zv = g.constant(z.clone());
                let bound = SwapHead { head: &head, store: &store, id, var: p };
                diffusion_loss(&bound, g, zv, &x0, 2, &mut local)
            };
            let err = grad_check(f, store.get(id), 1e-5).unwrap();
            assert!(err < 1e-6, "{}: {err}", store.name(id));
        }
    }

    /// Head whose parameter `id` is replaced by an existing graph node.
    struct SwapHead<'a> {
        head: &'a DiffHead<f64>,
        store: &'a ParamStore<f64>,
        id: crate::numerics::ParamId,
        var: Var,
    }

    impl NoisePredictor<f64> for SwapHead<'_> {
        fn token_dim(&self) -> usize {
            self.head.config.token_dim
        }
        fn schedule(&self) -> &NoiseSchedule<f64> {
            &self.head.schedule
        }
        fn predict(&self, g: &mut Graph<f64>, x_t: Var, t: &[usize], z: Var) -> Result<Var, NumericsError> {
            g.bind_param(self.id, self.var);
            self.head.forward(g, self.store, x_t, t, z)
        }
    }
}
