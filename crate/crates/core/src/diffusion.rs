//! Forward diffusion used as adaptive instance noise for the discriminator,
//! and the self-paced controller for the maximum timestep.
//!
//! A sample at timestep `t` is `sqrt(ᾱ_t)·x + sqrt(1 − ᾱ_t)·σ·ε`. The
//! controller watches how confidently the discriminator scores diffused real
//! images (`r_d`, the mean sign of `D − 0.5`) and moves `T` one step of `C`
//! towards more noise when `r_d` exceeds its target and towards less when it
//! falls short.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    /// `ᾱ_t` for `t = 0..=t_max`; `ᾱ_0 = 1`.
    pub retention: Vec<f64>,
    pub sigma: f64,
}

/// `ᾱ_t = ∏_{k ≤ t} (1 − β_k)` with `β` linearly spaced over `[beta_min, beta_max]`.
pub fn build_schedule(t_max: usize, beta_min: f64, beta_max: f64, sigma: f64) -> Result<NoiseSchedule> {
    ensure(t_max >= 1, || format!("t_max must be at least 1, got {t_max}"))?;
    ensure(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, || {
        format!("need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    })?;
    ensure(sigma > 0.0 && sigma.is_finite(), || format!("sigma must be positive, got {sigma}"))?;
    let mut retention = Vec::with_capacity(t_max + 1);
    retention.push(1.0);
    let mut acc = 1.0;
    for k in 1..=t_max {
        let beta = if t_max == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (k - 1) as f64 / (t_max - 1) as f64
        };
        acc *= 1.0 - beta;
        retention.push(acc);
    }
    Ok(NoiseSchedule {
        t_max,
        retention,
        sigma,
    })
}

impl NoiseSchedule {
    fn check(&self, t: &[usize]) -> Result<()> {
        match t.iter().find(|&&ti| ti > self.t_max) {
            Some(bad) => Err(crate::Error::validation(format!(
                "timestep {bad} exceeds schedule maximum {}",
                self.t_max
            ))),
            None => Ok(()),
        }
    }

    /// Per-sample `(signal, noise)` coefficients.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.retention[t];
        (a.sqrt(), (1.0 - a).sqrt() * self.sigma)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiKind {
    #[default]
    Uniform,
    /// `π_t ∝ t`.
    Priority,
}

/// Weights over `t ∈ {1, …, T}`; `weights[i]` belongs to `t = i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepDistribution {
    pub kind: PiKind,
    pub weights: Vec<f64>,
}

impl TimestepDistribution {
    pub fn new(kind: PiKind, t_current: usize) -> Self {
        assert!(t_current >= 1, "timestep support must be non-empty");
        let raw: Vec<f64> = match kind {
            PiKind::Uniform => vec![1.0; t_current],
            PiKind::Priority => (1..=t_current).map(|t| t as f64).collect(),
        };
        let total: f64 = raw.iter().sum();
        Self {
            kind,
            weights: raw.into_iter().map(|w| w / total).collect(),
        }
    }

    pub fn t_current(&self) -> usize {
        self.weights.len()
    }
}

/// Draws `count` timesteps from `dist` by inverse-CDF sampling.
pub fn sample_timesteps(dist: &TimestepDistribution, count: usize, rng: &mut Rng) -> Vec<usize> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, w) in dist.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i + 1;
                }
            }
            dist.weights.len()
        })
        .collect()
}

fn noise_tensor<T: Scalar>(shape: &[usize], t: &[usize], schedule: &NoiseSchedule, rng: &mut Rng) -> Tensor<T> {
    let per_sample: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(shape[0] * per_sample);
    for &ti in t {
        let (_, noise) = schedule.coefficients(ti);
        for _ in 0..per_sample {
            let e: f64 = rng.sample(StandardNormal);
            data.push(T::of(noise * e));
        }
    }
    Tensor::from_vec(shape, data)
}

/// Diffuses a batch of images (`[B, ...]`) to per-sample timesteps `t`.
pub fn diffuse<T: Scalar>(
    x: &Tensor<T>,
    t: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    schedule.check(t)?;
    ensure(t.len() == x.dim(0), || format!("{} timesteps for {} samples", t.len(), x.dim(0)))?;
    let noise = noise_tensor::<T>(x.shape(), t, schedule, rng);
    let per_sample = x.numel() / x.dim(0);
    let mut out = noise;
    for (b, &ti) in t.iter().enumerate() {
        let signal = T::of(schedule.coefficients(ti).0);
        let range = b * per_sample..(b + 1) * per_sample;
        for (o, &v) in out.data_mut()[range.clone()].iter_mut().zip(&x.data()[range]) {
            *o += signal * v;
        }
    }
    Ok(out)
}

/// Differentiable [`diffuse`] for `[B, C, H, W]` graph values.
pub fn diffuse_var<'g, T: Scalar>(
    x: Var<'g, T>,
    graph: &'g Graph<T>,
    t: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var<'g, T>> {
    schedule.check(t)?;
    let shape = x.shape();
    ensure(shape.len() == 4 && t.len() == shape[0], || {
        format!("{} timesteps for input of shape {shape:?}", t.len())
    })?;
    let noise = noise_tensor::<T>(&shape, t, schedule, rng);
    let (b, c) = (shape[0], shape[1]);
    let mut scale = Vec::with_capacity(b * c);
    for &ti in t {
        let s = T::of(schedule.coefficients(ti).0);
        scale.extend(std::iter::repeat_n(s, c));
    }
    let scale = graph.constant(Tensor::from_vec(&[b, c], scale));
    Ok(x.scale_bc(scale).add(graph.constant(noise)))
}

/// `r_d = mean(sign(D − 0.5))` with `sign(0) = 0`.
pub fn overfit_metric(d_outputs_on_real: &[f64]) -> Result<f64> {
    ensure(!d_outputs_on_real.is_empty(), || "overfit_metric needs at least one output".into())?;
    let total: f64 = d_outputs_on_real.iter().map(|&d| sign(d - 0.5)).sum();
    Ok(total / d_outputs_on_real.len() as f64)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub t_max: usize,
    pub t_min: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: f64,
    pub d_target: f64,
    pub c_step: usize,
    pub update_interval: usize,
    pub pi_kind: PiKind,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_max: 64,
            t_min: 4,
            beta_min: 1e-4,
            beta_max: 2e-2,
            sigma: 0.05,
            d_target: 0.6,
            c_step: 1,
            update_interval: 4,
            pi_kind: PiKind::Uniform,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.t_min >= 1 && self.t_min <= self.t_max, || {
            format!("need 1 <= t_min <= t_max, got t_min={} t_max={}", self.t_min, self.t_max)
        })?;
        ensure(self.c_step >= 1, || "c_step must be at least 1".into())?;
        ensure(self.update_interval >= 1, || "update_interval must be at least 1".into())?;
        ensure((-1.0..=1.0).contains(&self.d_target), || {
            format!("d_target must lie in [-1, 1], got {}", self.d_target)
        })?;
        build_schedule(self.t_max, self.beta_min, self.beta_max, self.sigma).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.t_max, self.beta_min, self.beta_max, self.sigma)
    }
}

/// Controller state for the maximum diffusion timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveDiffusionState {
    pub t_current: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub d_target: f64,
    pub c_step: usize,
    pub update_interval: usize,
    pub pi_kind: PiKind,
    pub r_d_last: f64,
    /// Real-image discriminator outputs seen since the last update.
    pub pending: Vec<f64>,
    pub batches_since_update: usize,
    pub updates: u64,
}

impl AdaptiveDiffusionState {
    /// Starts at `t_min`.
    pub fn new(cfg: &DiffusionConfig) -> Self {
        Self {
            t_current: cfg.t_min,
            t_min: cfg.t_min,
            t_max: cfg.t_max,
            d_target: cfg.d_target,
            c_step: cfg.c_step,
            update_interval: cfg.update_interval,
            pi_kind: cfg.pi_kind,
            r_d_last: 0.0,
            pending: Vec::new(),
            batches_since_update: 0,
            updates: 0,
        }
    }

    pub fn distribution(&self) -> TimestepDistribution {
        TimestepDistribution::new(self.pi_kind, self.t_current)
    }

    /// Records one minibatch of real-image outputs. Every `update_interval`
    /// minibatches this recomputes `r_d` over the pooled outputs, applies
    /// [`update_t`] and returns the new `(r_d, T)`.
    pub fn record_batch(&mut self, d_real: &[f64]) -> Option<(f64, usize)> {
        self.pending.extend_from_slice(d_real);
        self.batches_since_update += 1;
        if self.batches_since_update < self.update_interval {
            return None;
        }
        let r_d = overfit_metric(&self.pending).unwrap_or(0.0);
        update_t(self, r_d);
        self.pending.clear();
        self.batches_since_update = 0;
        Some((r_d, self.t_current))
    }
}

/// `T ← clamp(T + sign(r_d − d_target)·C, T_min, T_max)`.
pub fn update_t(state: &mut AdaptiveDiffusionState, r_d: f64) {
    let step = sign(r_d - state.d_target) as i64 * state.c_step as i64;
    let next = (state.t_current as i64 + step).clamp(state.t_min as i64, state.t_max as i64);
    state.t_current = next as usize;
    state.r_d_last = r_d;
    state.updates += 1;
}
