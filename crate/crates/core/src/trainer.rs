//! Alternating discriminator / encoder-generator optimization, checkpoints,
//! deterministic resumption, and corpus translation with a trained model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{file_sha256, read_container, write_container};
use crate::diffusion::{
    diffuse, diffuse_var, sample_timesteps, AdaptiveDiffusionState, DiffusionConfig, NoiseSchedule,
};
use crate::error::{ensure, Error, Result};
use crate::losses::{
    adv_loss_d, adv_loss_g, domain_loss_real, domain_loss_synth, identity_loss, lpips_loss,
    path_penalty, recon_loss, style_mix_loss, weighted_total, DTerms, GTerms, LossConfig,
    LossReport,
};
use crate::networks::{init_bundle, ModelBundle, NetworkConfig, Nets, Trainable};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::rng::{stream_rng, Rng, RngState};
use crate::run::RunDirectory;
use crate::tensor::{Scalar, Tensor};
use crate::toy_data::{
    list_images, load_image, next_batch, save_image, unit_to_byte, validate_domains,
    write_json, BatchSampler, DatasetSplit, DomainLabel, ImageBatch, ImageSet,
};

const TRAIN_STREAM: u64 = 1 << 40;
const SAMPLER_SALT: u64 = 0x5a17_ce11_d00d_f00d;

fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    2e-4
}
fn default_beta2() -> f64 {
    0.99
}
fn default_checkpoint_interval() -> u64 {
    1000
}
fn default_mixing_prob() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_path_batch() -> usize {
    4
}
fn default_path_eps() -> f64 {
    1e-2
}
fn default_path_decay() -> f64 {
    0.01
}
fn default_split_fraction() -> f64 {
    0.7
}

/// Where the training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with one subdirectory per domain.
    pub root: Option<PathBuf>,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            split_fraction: default_split_fraction(),
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_d: f64,
    #[serde(default = "default_lr")]
    pub lr_g: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    /// Steps between sample grids written to `samples/`; 0 disables them.
    #[serde(default)]
    pub eval_interval: u64,
    /// Probability that a step uses crossover style mixing.
    #[serde(default = "default_mixing_prob")]
    pub mixing_prob: f64,
    #[serde(default = "default_true")]
    pub path_regularization: bool,
    /// Samples per step used for the path-length penalty.
    #[serde(default = "default_path_batch")]
    pub path_batch: usize,
    /// Step size of the finite-difference Jacobian-vector product.
    #[serde(default = "default_path_eps")]
    pub path_eps: f64,
    /// Update rate of the running mean path length.
    #[serde(default = "default_path_decay")]
    pub path_decay: f64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(total_steps: u64) -> Self {
        Self {
            total_steps,
            batch_size: default_batch_size(),
            lr_d: default_lr(),
            lr_g: default_lr(),
            beta1: 0.0,
            beta2: default_beta2(),
            seed: 0,
            checkpoint_interval: default_checkpoint_interval(),
            eval_interval: 0,
            mixing_prob: default_mixing_prob(),
            path_regularization: true,
            path_batch: default_path_batch(),
            path_eps: default_path_eps(),
            path_decay: default_path_decay(),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.total_steps >= 1, || "total_steps must be positive".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be positive".into())?;
        for (name, v) in [("lr_d", self.lr_d), ("lr_g", self.lr_g)] {
            ensure(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))?;
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            ensure((0.0..1.0).contains(&v), || format!("{name} must lie in [0, 1), got {v}"))?;
        }
        ensure(self.checkpoint_interval >= 1, || "checkpoint_interval must be positive".into())?;
        ensure((0.0..=1.0).contains(&self.mixing_prob), || {
            format!("mixing_prob must lie in [0, 1], got {}", self.mixing_prob)
        })?;
        ensure(self.path_batch >= 1, || "path_batch must be positive".into())?;
        ensure(self.path_eps > 0.0 && self.path_eps.is_finite(), || "path_eps must be positive".into())?;
        ensure((0.0..=1.0).contains(&self.path_decay), || "path_decay must lie in [0, 1]".into())?;
        ensure(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0, || {
            format!("split_fraction must lie in (0, 1), got {}", self.data.split_fraction)
        })?;
        self.network.validate()?;
        self.diffusion.validate()?;
        self.loss.weights().validate()
    }

    /// True when `other` describes the same optimization and differs at most
    /// in run length and output cadence.
    pub fn resumable_with(&self, other: &TrainConfig) -> bool {
        let norm = |c: &TrainConfig| TrainConfig {
            total_steps: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
            ..c.clone()
        };
        norm(self) == norm(other)
    }
}

/// One adaptive-T update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TUpdate {
    pub step: u64,
    pub r_d: f64,
    pub t_current: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub domains: Vec<DomainLabel>,
    pub step: u64,
    pub bundle: ModelBundle<f32>,
    pub opt_d: Adam<f32>,
    pub opt_e: Adam<f32>,
    pub opt_g: Adam<f32>,
    pub diffusion: AdaptiveDiffusionState,
    pub schedule: NoiseSchedule,
    pub rng: Rng,
    pub sampler: BatchSampler,
    /// Running mean of generator path lengths.
    pub pl_mean: f64,
    pub history: Vec<TUpdate>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, domains: &[DomainLabel], train_len: usize) -> Result<Self> {
        config.validate()?;
        validate_domains(domains)?;
        ensure(domains.len() == config.network.num_domains, || {
            format!(
                "dataset has {} domains but network.num_domains is {}",
                domains.len(),
                config.network.num_domains
            )
        })?;
        ensure(train_len >= 1, || "training set is empty".into())?;
        let opt = |lr| Adam::new(lr, config.beta1, config.beta2);
        Ok(Self {
            config: config.clone(),
            domains: domains.to_vec(),
            step: 0,
            bundle: init_bundle(&config.network, config.seed)?,
            opt_d: opt(config.lr_d),
            opt_e: opt(config.lr_g),
            opt_g: opt(config.lr_g),
            diffusion: AdaptiveDiffusionState::new(&config.diffusion),
            schedule: config.diffusion.schedule()?,
            rng: stream_rng(config.seed, TRAIN_STREAM),
            sampler: BatchSampler::new(train_len, config.seed ^ SAMPLER_SALT),
            pl_mean: 0.0,
            history: Vec::new(),
        })
    }
}

/// Losses and controller state after one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub d: LossReport,
    pub g: LossReport,
    /// Most recent overfitting metric.
    pub r_d: f64,
    pub t_current: usize,
    /// Whether T was recomputed at the end of this step.
    pub t_updated: bool,
}

/// Random choices shared by the two halves of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    pub s: Vec<usize>,
    pub c: Vec<usize>,
    /// Permutation supplying the second code, and the crossover layer.
    pub mix: Option<(Vec<usize>, usize)>,
}

/// Switches for the generator-side objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOptions {
    pub saturating_adv: bool,
    pub literal_eq10: bool,
    /// `(samples, eps, running mean)` when the path penalty is active.
    pub path: Option<(usize, f64, f64)>,
}

pub struct DiscriminatorPass<'g, T: Scalar> {
    pub terms: DTerms<'g, T>,
    /// Realness of the diffused real images, `[B]`.
    pub real_realness: Var<'g, T>,
}

pub struct GeneratorPass<'g, T: Scalar> {
    pub terms: GTerms<'g, T>,
    pub path_lengths: Option<Var<'g, T>>,
}

fn zero<T: Scalar>(g: &Graph<T>) -> Var<'_, T> {
    g.constant(Tensor::scalar(T::zero()))
}

/// Discriminator objective on already-diffused real and fake batches sharing timesteps `t`.
pub fn discriminator_terms<'g, T: Scalar>(
    nets: &Nets<'g, '_, T>,
    y_real: &Tensor<T>,
    y_fake: &Tensor<T>,
    t: &[usize],
    s: &[usize],
) -> Result<DiscriminatorPass<'g, T>> {
    let b = y_real.dim(0);
    ensure(y_fake.dim(0) == b, || "real and fake batches differ in size".into())?;
    let y = Tensor::concat_outer(&[y_real, y_fake]);
    let tt: Vec<usize> = t.iter().chain(t).copied().collect();
    let out = nets.discriminate(nets.graph.constant(y), &tt)?;
    let real_idx: Vec<usize> = (0..b).collect();
    let fake_idx: Vec<usize> = (b..2 * b).collect();
    let real_realness = out.realness.gather_rows(&real_idx);
    let adv_d = adv_loss_d(real_realness, out.realness.gather_rows(&fake_idx));
    let domain_real = match out.domain_logits {
        Some(l) => domain_loss_real(l.gather_rows(&real_idx), s)?,
        None => zero(nets.graph),
    };
    Ok(DiscriminatorPass {
        terms: DTerms { adv_d, domain_real },
        real_realness,
    })
}

/// Generator/encoder objective for real images `x` with fresh timesteps `t`.
pub fn generator_terms<'g, T: Scalar>(
    nets: &Nets<'g, '_, T>,
    x: Var<'g, T>,
    plan: &StepPlan,
    t: &[usize],
    schedule: &NoiseSchedule,
    opts: &GeneratorOptions,
    rng: &mut Rng,
) -> Result<GeneratorPass<'g, T>> {
    let g = nets.graph;
    let b = x.shape()[0];
    let layers = nets.bundle.config.num_style_layers();
    let z = nets.encode(x, &plan.s)?;
    let w = nets.map(z, &plan.c)?;
    let translated = nets.synthesize(&nets.styles(w, None)?);
    let fake = match &plan.mix {
        Some((perm, k)) => {
            let w2 = nets.map(z.gather_rows(perm), &plan.c)?;
            nets.synthesize(&nets.styles(w, Some((w2, *k)))?)
        }
        None => translated,
    };
    let y_fake = diffuse_var(fake, g, t, schedule, rng)?;
    let out = nets.discriminate(y_fake, t)?;
    let adv_g = adv_loss_g(out.realness, opts.saturating_adv);
    let domain_synth = match out.domain_logits {
        Some(l) => domain_loss_synth(l, &plan.c)?,
        None => zero(g),
    };
    let recon = recon_loss(x, translated)?;
    let lpips = lpips_loss(nets, x, translated)?;
    let same = nets.generate(z, &plan.s, None)?;
    let identity = identity_loss(x, same)?;
    let mix = if opts.literal_eq10 && b > 1 {
        let roll: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
        let other = nets.generate(z.gather_rows(&roll), &plan.c, None)?;
        style_mix_loss(translated, other, layers)?
    } else {
        zero(g)
    };
    let (path, path_lengths) = match opts.path {
        Some((samples, eps, running_mean)) => {
            let idx: Vec<usize> = (0..samples.min(b)).collect();
            let lengths = nets.path_lengths(w.gather_rows(&idx), rng, eps);
            (path_penalty(lengths, running_mean), Some(lengths))
        }
        None => (zero(g), None),
    };
    Ok(GeneratorPass {
        terms: GTerms {
            adv_g,
            domain_synth,
            recon,
            lpips,
            identity,
            mix,
            path,
        },
        path_lengths,
    })
}

fn check_finite_params(bundle: &ModelBundle<f32>, step: u64) -> Result<()> {
    for (label, store) in [
        ("encoder parameters", &bundle.encoder),
        ("generator parameters", &bundle.generator),
        ("discriminator parameters", &bundle.discriminator),
    ] {
        if !store.is_finite() {
            return Err(Error::NonFinite {
                term: label.to_string(),
                step,
                value: f64::NAN,
            });
        }
    }
    Ok(())
}

/// One D update followed by one E/G update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &ImageBatch) -> Result<StepReport> {
    let cfg = &state.bundle.config;
    let shape = batch.data.shape();
    ensure(
        shape[1] == cfg.channels && shape[2] == cfg.image_size && shape[3] == cfg.image_size,
        || {
            format!(
                "batch of shape {shape:?} does not match the network ({} channels, {}px)",
                cfg.channels, cfg.image_size
            )
        },
    )?;
    let b = batch.len();
    let k = cfg.num_domains;
    let layers = cfg.num_style_layers();
    let step = state.step + 1;
    let weights = state.config.loss.weights();

    let c: Vec<usize> = (0..b).map(|_| state.rng.random_range(0..k)).collect();
    let mix = if b > 1 && state.rng.random::<f64>() < state.config.mixing_prob {
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut state.rng);
        Some((perm, state.rng.random_range(1..layers)))
    } else {
        None
    };
    let plan = StepPlan {
        s: batch.labels.clone(),
        c,
        mix,
    };

    // Discriminator step on detached translations.
    let t_d = sample_timesteps(&state.diffusion.distribution(), b, &mut state.rng);
    let fake = {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, &state.bundle, Trainable::NONE);
        let z = nets.encode(g.constant(batch.data.clone()), &plan.s)?;
        let mixv = plan.mix.as_ref().map(|(p, k)| (z.gather_rows(p), *k));
        nets.generate(z, &plan.c, mixv)?.tensor()
    };
    let y_real = diffuse(&batch.data, &t_d, &state.schedule, &mut state.rng)?;
    let y_fake = diffuse(&fake, &t_d, &state.schedule, &mut state.rng)?;
    let (d_report, d_real, d_grads) = {
        let g = Graph::new();
        let nets = Nets::new(&g, &state.bundle, Trainable::DISCRIMINATOR);
        let pass = discriminator_terms(&nets, &y_real, &y_fake, &t_d, &plan.s)?;
        let (total, report) = weighted_total(&pass.terms.named(&weights), step)?;
        let d_real = pass.real_realness.value().to_f64_vec();
        (report, d_real, g.backward(total).into_params())
    };
    state.opt_d.update(&mut state.bundle.discriminator, &d_grads);

    // Encoder/generator step with freshly drawn timesteps.
    let t_g = sample_timesteps(&state.diffusion.distribution(), b, &mut state.rng);
    let opts = GeneratorOptions {
        saturating_adv: state.config.loss.saturating_adv,
        literal_eq10: state.config.loss.literal_eq10,
        path: (state.config.path_regularization && weights.lambda_path > 0.0).then_some((
            state.config.path_batch,
            state.config.path_eps,
            state.pl_mean,
        )),
    };
    let (g_report, mean_length, g_grads) = {
        let g = Graph::new();
        let nets = Nets::new(&g, &state.bundle, Trainable::ENCODER_GENERATOR);
        let x = g.constant(batch.data.clone());
        let pass = generator_terms(&nets, x, &plan, &t_g, &state.schedule, &opts, &mut state.rng)?;
        let (total, report) = weighted_total(&pass.terms.named(&weights), step)?;
        let mean_length = pass.path_lengths.map(|l| l.value().mean().as_f64());
        (report, mean_length, g.backward(total).into_params())
    };
    state.opt_e.update(&mut state.bundle.encoder, &g_grads);
    state.opt_g.update(&mut state.bundle.generator, &g_grads);
    if let Some(len) = mean_length {
        state.pl_mean += state.config.path_decay * (len - state.pl_mean);
    }
    check_finite_params(&state.bundle, step)?;

    let update = state.diffusion.record_batch(&d_real);
    if let Some((r_d, t_current)) = update {
        state.history.push(TUpdate {
            step,
            r_d,
            t_current,
        });
    }
    state.step = step;
    Ok(StepReport {
        step,
        d: d_report,
        g: g_report,
        r_d: state.diffusion.r_d_last,
        t_current: state.diffusion.t_current,
        t_updated: update.is_some(),
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config: TrainConfig,
    domains: Vec<DomainLabel>,
    diffusion: AdaptiveDiffusionState,
    rng: RngState,
    sampler: BatchSampler,
    pl_mean: f64,
    optimizer_steps: [u64; 3],
    history: Vec<TUpdate>,
    phi_checksum: String,
    trainable_params: usize,
}

const STORES: [&str; 4] = ["enc", "gen", "disc", "phi"];

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    check_finite_params(&state.bundle, state.step)?;
    let mut arrays = BTreeMap::new();
    let b = &state.bundle;
    for store in [&b.encoder, &b.generator, &b.discriminator, &b.phi] {
        for (name, t) in store.iter() {
            arrays.insert(format!("param/{name}"), t.clone());
        }
    }
    for (label, opt) in [("d", &state.opt_d), ("e", &state.opt_e), ("g", &state.opt_g)] {
        for (moment, store) in [("first", &opt.first), ("second", &opt.second)] {
            for (name, t) in store.iter() {
                arrays.insert(format!("adam/{label}/{moment}/{name}"), t.clone());
            }
        }
    }
    let meta = CheckpointMeta {
        step: state.step,
        config: state.config.clone(),
        domains: state.domains.clone(),
        diffusion: state.diffusion.clone(),
        rng: RngState::capture(&state.rng),
        sampler: state.sampler.clone(),
        pl_mean: state.pl_mean,
        optimizer_steps: [state.opt_d.step, state.opt_e.step, state.opt_g.step],
        history: state.history.clone(),
        phi_checksum: b.phi_checksum(),
        trainable_params: b.trainable_params(),
    };
    write_container(path, serde_json::to_value(meta).expect("meta serializes"), &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let (meta, arrays) = read_container(path)?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let meta: CheckpointMeta =
        serde_json::from_value(meta).map_err(|e| bad(format!("bad metadata: {e}")))?;
    let cfg = &meta.config;
    let mut stores: [ParamStore<f32>; 4] = Default::default();
    let mut moments: BTreeMap<(String, String), ParamStore<f32>> = BTreeMap::new();
    for (key, t) in arrays {
        if let Some(name) = key.strip_prefix("param/") {
            let prefix = name.split('.').next().unwrap_or_default();
            let i = STORES
                .iter()
                .position(|&p| p == prefix)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            stores[i].insert(name, t);
        } else if let Some(rest) = key.strip_prefix("adam/") {
            let mut parts = rest.splitn(3, '/');
            let (Some(opt), Some(moment), Some(name)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(format!("malformed optimizer key {key}")));
            };
            moments
                .entry((opt.to_string(), moment.to_string()))
                .or_default()
                .insert(name, t);
        } else {
            return Err(bad(format!("unknown array {key}")));
        }
    }
    let [encoder, generator, discriminator, phi] = stores;
    let bundle = ModelBundle {
        config: cfg.network.clone(),
        encoder,
        generator,
        discriminator,
        phi,
    };
    let reference = init_bundle::<f32>(&cfg.network, cfg.seed)?;
    for (got, want) in [
        (&bundle.encoder, &reference.encoder),
        (&bundle.generator, &reference.generator),
        (&bundle.discriminator, &reference.discriminator),
    ] {
        let same_layout = got.len() == want.len()
            && got
                .iter()
                .zip(want.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same_layout {
            return Err(bad("parameter layout does not match the stored network config".into()));
        }
    }
    if bundle.phi_checksum() != meta.phi_checksum {
        return Err(bad("frozen feature extractor checksum mismatch".into()));
    }
    let mut take = |opt: &str, lr: f64, step: u64| {
        let mut a = Adam::new(lr, cfg.beta1, cfg.beta2);
        a.step = step;
        a.first = moments.remove(&(opt.into(), "first".into())).unwrap_or_default();
        a.second = moments.remove(&(opt.into(), "second".into())).unwrap_or_default();
        a
    };
    let opt_d = take("d", cfg.lr_d, meta.optimizer_steps[0]);
    let opt_e = take("e", cfg.lr_g, meta.optimizer_steps[1]);
    let opt_g = take("g", cfg.lr_g, meta.optimizer_steps[2]);
    Ok(TrainState {
        schedule: cfg.diffusion.schedule()?,
        config: meta.config,
        domains: meta.domains,
        step: meta.step,
        bundle,
        opt_d,
        opt_e,
        opt_g,
        diffusion: meta.diffusion,
        rng: meta.rng.restore()?,
        sampler: meta.sampler.restore(),
        pl_mean: meta.pl_mean,
        history: meta.history,
    })
}

/// Keeps only metric records with `step <= last_step`.
fn truncate_jsonl(path: &Path, last_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if matches!(step, Some(s) if s <= last_step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Runs training to `config.total_steps`, writing checkpoints and metrics
/// into `run`. With `resume`, training continues from that checkpoint and
/// metric records past its step are discarded first.
pub fn fit(
    config: &TrainConfig,
    split: &DatasetSplit,
    run: &RunDirectory,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    config.validate()?;
    ensure(!split.train.is_empty(), || "training split is empty".into())?;
    let images = ImageSet::load(&split.train, config.network.channels)?;
    ensure(images.size == config.network.image_size, || {
        format!(
            "dataset images are {}px but network.image_size is {}",
            images.size, config.network.image_size
        )
    })?;
    ensure(config.batch_size <= images.len(), || {
        format!(
            "batch_size {} exceeds the {} training images",
            config.batch_size,
            images.len()
        )
    })?;
    let mut state = match resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            ensure(state.config.resumable_with(config), || {
                format!("checkpoint {} was trained with a different config", path.display())
            })?;
            ensure(state.domains == split.domains, || "checkpoint domains differ from the dataset".into())?;
            ensure(state.sampler.len == images.len(), || "checkpoint was trained on a different split".into())?;
            state.config = config.clone();
            state
        }
        None => TrainState::new(config, &split.domains, images.len())?,
    };
    log::info!(
        "training from step {} to {} ({} trainable parameters)",
        state.step,
        config.total_steps,
        state.bundle.trainable_params()
    );
    truncate_jsonl(&run.metrics_file(), state.step)?;
    truncate_jsonl(&run.timing_file(), state.step)?;
    let mut metrics = open_append(&run.metrics_file())?;
    let mut timing = open_append(&run.timing_file())?;
    let flush = |w: &mut BufWriter<fs::File>, p: &Path| w.flush().map_err(|e| Error::io(p, e));
    let started = Instant::now();
    let mut last = None;
    let preview = images.batch(&(0..images.len().min(6)).collect::<Vec<_>>());

    while state.step < config.total_steps {
        let batch = next_batch(&images, config.batch_size, &mut state.sampler)?;
        let report = match train_step(&mut state, &batch) {
            Ok(r) => r,
            Err(e) => {
                flush(&mut metrics, &run.metrics_file())?;
                return Err(e);
            }
        };
        let line = serde_json::to_string(&report).expect("report serializes");
        writeln!(metrics, "{line}").map_err(|e| Error::io(run.metrics_file(), e))?;
        writeln!(
            timing,
            "{}",
            serde_json::json!({"step": report.step, "wall_seconds": started.elapsed().as_secs_f64()})
        )
        .map_err(|e| Error::io(run.timing_file(), e))?;
        if report.step % 50 == 0 {
            log::info!(
                "step {}: D {:.4} G {:.4} r_d {:.3} T {}",
                report.step,
                report.d.total,
                report.g.total,
                report.r_d,
                report.t_current
            );
        }
        if config.eval_interval > 0 && state.step % config.eval_interval == 0 {
            let path = run.samples().join(format!("step_{:08}.png", state.step));
            write_sample_grid(&state.bundle, &preview, &path)?;
        }
        if state.step % config.checkpoint_interval == 0 || state.step == config.total_steps {
            flush(&mut metrics, &run.metrics_file())?;
            flush(&mut timing, &run.timing_file())?;
            let path = run.checkpoint_path(state.step);
            save_checkpoint(&state, &path)?;
            last = Some(path);
        }
    }
    flush(&mut metrics, &run.metrics_file())?;
    flush(&mut timing, &run.timing_file())?;
    match last {
        Some(p) => Ok(p),
        None => {
            let path = run.checkpoint_path(state.step);
            save_checkpoint(&state, &path)?;
            Ok(path)
        }
    }
}

/// Reads a metrics stream back into step reports.
pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// A grid with the source images in the first row and one row per target domain.
pub fn write_sample_grid(bundle: &ModelBundle<f32>, sources: &ImageBatch, path: &Path) -> Result<()> {
    let cfg = &bundle.config;
    let (n, size, ch) = (sources.len(), cfg.image_size, cfg.channels);
    let mut rows = vec![sources.data.clone()];
    for c in 0..cfg.num_domains {
        rows.push(bundle.translate_tensor(&sources.data, &sources.labels, &vec![c; n])?);
    }
    let (w, h) = (n * size, rows.len() * size);
    let mut bytes = vec![0u8; w * h * ch];
    for (r, row) in rows.iter().enumerate() {
        for i in 0..n {
            for c in 0..ch {
                for y in 0..size {
                    for x in 0..size {
                        let v = row.data()[((i * ch + c) * size + y) * size + x];
                        let (px, py) = (i * size + x, r * size + y);
                        bytes[(py * w + px) * ch + c] = unit_to_byte(v);
                    }
                }
            }
        }
    }
    let color = if ch == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Finds a domain by name or by decimal index.
pub fn resolve_domain(domains: &[DomainLabel], key: &str) -> Result<DomainLabel> {
    domains
        .iter()
        .find(|d| d.name == key || key.parse::<usize>().ok() == Some(d.index))
        .cloned()
        .ok_or_else(|| {
            let names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
            Error::validation(format!("unknown domain `{key}`; known domains: {names:?}"))
        })
}

pub const TRANSLATION_MANIFEST: &str = "translation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationManifest {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub source_dir: PathBuf,
    pub source_domain: DomainLabel,
    pub target_domain: DomainLabel,
    pub count: usize,
}

/// Translates `count` images from `source_dir` (cycling if it holds fewer)
/// from domain `s` to domain `c`, writing `out_dir/<i>.png` and a manifest.
pub fn translate_corpus(
    ckpt: &Path,
    source_dir: &Path,
    s: &str,
    c: &str,
    count: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    let state = load_checkpoint(ckpt)?;
    let source = resolve_domain(&state.domains, s)?;
    let target = resolve_domain(&state.domains, c)?;
    let files = list_images(source_dir)?;
    ensure(!files.is_empty(), || format!("no images in {}", source_dir.display()))?;
    ensure(count >= 1, || "count must be positive".into())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &state.bundle.config;
    let (size, ch) = (cfg.image_size, cfg.channels);
    const CHUNK: usize = 64;
    for start in (0..count).step_by(CHUNK) {
        let end = (start + CHUNK).min(count);
        let mut data = Vec::with_capacity((end - start) * ch * size * size);
        for i in start..end {
            let path = &files[i % files.len()];
            let (plane, h, w) = load_image(path, ch)?;
            if h != size || w != size {
                return Err(Error::Decode {
                    path: path.clone(),
                    message: format!("expected {size}x{size} image, got {w}x{h}"),
                });
            }
            data.extend(plane);
        }
        let n = end - start;
        let x = Tensor::from_vec(&[n, ch, size, size], data);
        let out = state
            .bundle
            .translate_tensor(&x, &vec![source.index; n], &vec![target.index; n])?;
        let per = ch * size * size;
        for j in 0..n {
            let path = out_dir.join(format!("{}.png", start + j));
            save_image(&path, &out.data()[j * per..(j + 1) * per], ch, size)?;
        }
    }
    write_json(
        &out_dir.join(TRANSLATION_MANIFEST),
        &TranslationManifest {
            checkpoint: ckpt.to_path_buf(),
            checkpoint_sha256: file_sha256(ckpt)?,
            source_dir: source_dir.to_path_buf(),
            source_domain: source,
            target_domain: target,
            count,
        },
    )?;
    Ok(out_dir.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_total_steps_and_rejects_unknown_keys() {
        let err = TrainConfig::from_toml_str("batch_size = 4\n").unwrap_err();
        assert!(err.to_string().contains("total_steps"), "{err}");
        let err = TrainConfig::from_toml_str("total_steps = 3\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = TrainConfig::from_toml_str("total_steps = 3\n[loss]\nlambda_typo = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_typo"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::new(10);
        cfg.data.root = Some(PathBuf::from("/tmp/data"));
        cfg.loss.lambda_recon = 3.5;
        cfg.network.domain_head = false;
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn resolve_domain_by_name_or_index() {
        let d = vec![DomainLabel::new(0, "bonafide"), DomainLabel::new(1, "print")];
        assert_eq!(resolve_domain(&d, "print").unwrap().index, 1);
        assert_eq!(resolve_domain(&d, "0").unwrap().name, "bonafide");
        assert!(resolve_domain(&d, "lens").is_err());
    }
}
