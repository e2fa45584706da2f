//! Encoder, style-based generator, timestep-conditioned multi-domain
//! discriminator, and the frozen perceptual feature extractor.
//!
//! All networks are built on [`Graph`] so every forward pass is
//! differentiable with respect to its parameters. Channel widths follow one
//! rule: at resolution `r`, `min(max_channels, base_channels · image_size / r)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Rng};
use crate::tensor::{Scalar, Tensor};

const LRELU: f64 = 0.2;
/// Realness is squashed into `[REALNESS_EPS, 1 − REALNESS_EPS]`.
pub const REALNESS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_domains: usize,
    /// Dimension of the encoder's latent code.
    pub latent_dim: usize,
    /// Dimension of the mapped style vector.
    pub style_dim: usize,
    pub domain_embed_dim: usize,
    pub mapping_layers: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub disc_hidden: usize,
    pub time_embed_dim: usize,
    /// When false the discriminator has no domain head (single-domain ablation).
    pub domain_head: bool,
    pub phi_channels: Vec<usize>,
    pub phi_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            num_domains: 3,
            latent_dim: 128,
            style_dim: 128,
            domain_embed_dim: 32,
            mapping_layers: 2,
            base_channels: 8,
            max_channels: 64,
            disc_hidden: 128,
            time_embed_dim: 32,
            domain_head: true,
            phi_channels: vec![16, 32, 64],
            phi_seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Tiny configuration used for gradient checks.
    pub fn miniature() -> Self {
        Self {
            image_size: 8,
            latent_dim: 8,
            style_dim: 8,
            domain_embed_dim: 4,
            base_channels: 2,
            max_channels: 4,
            disc_hidden: 6,
            time_embed_dim: 4,
            phi_channels: vec![2, 3, 4],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        ensure(s >= 8 && s.is_power_of_two(), || {
            format!("image_size must be 4 × a power of 2 and at least 8, got {s}")
        })?;
        ensure(matches!(self.channels, 1 | 3), || {
            format!("channels must be 1 or 3, got {}", self.channels)
        })?;
        ensure(self.num_domains >= 2, || {
            format!("num_domains must be at least 2, got {}", self.num_domains)
        })?;
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("style_dim", self.style_dim),
            ("domain_embed_dim", self.domain_embed_dim),
            ("mapping_layers", self.mapping_layers),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("disc_hidden", self.disc_hidden),
        ] {
            ensure(v >= 1, || format!("{name} must be positive"))?;
        }
        ensure(self.time_embed_dim >= 2 && self.time_embed_dim.is_multiple_of(2), || {
            format!("time_embed_dim must be even and at least 2, got {}", self.time_embed_dim)
        })?;
        ensure(self.phi_channels.len() == 3, || {
            format!("phi_channels must list 3 widths, got {}", self.phi_channels.len())
        })?;
        ensure(self.phi_channels.iter().all(|&c| c >= 1), || "phi_channels must be positive".into())?;
        Ok(())
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.base_channels * self.image_size / resolution).min(self.max_channels)
    }

    /// Resolutions of the generator's blocks, from 4×4 up to the image size.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = 4;
        let mut out = Vec::new();
        while r <= self.image_size {
            out.push(r);
            r *= 2;
        }
        out
    }

    /// Number of style-modulated generator layers (synthesis blocks plus the output layer).
    pub fn num_style_layers(&self) -> usize {
        self.resolutions().len() + 1
    }

    /// Width of the discriminator trunk where the timestep embedding is added.
    fn disc_time_channels(&self) -> usize {
        self.channels_at(self.image_size / 2)
    }
}

/// Parameters of every network plus the frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: NetworkConfig,
    pub encoder: ParamStore<T>,
    pub generator: ParamStore<T>,
    pub discriminator: ParamStore<T>,
    pub phi: ParamStore<T>,
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                T::of(e * std)
            })
            .collect(),
    )
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.store
            .insert(format!("{name}.w"), normal_tensor(&[cout, cin, k, k], std, &mut self.rng));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        self.store
            .insert(format!("{name}.w"), normal_tensor(&[fan_in, fan_out], std, &mut self.rng));
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        self.store
            .insert(name.to_string(), normal_tensor(shape, std, &mut self.rng));
    }
}

/// Deterministic initialization; identical `(config, seed)` give identical bundles.
pub fn init_bundle<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ModelBundle<T>> {
    config.validate()?;
    let cfg = config;
    let size = cfg.image_size;
    let res = cfg.resolutions();

    let mut encoder = ParamStore::new();
    {
        let mut init = Init {
            store: &mut encoder,
            rng: stream_rng(seed, 1),
        };
        init.normal("enc.src_embed", &[cfg.num_domains, size * size], 1.0);
        init.conv("enc.in", cfg.channels + 1, cfg.channels_at(size), 3);
        for &r in res.iter().rev().filter(|&&r| r > 4) {
            init.conv(&format!("enc.down{r}"), cfg.channels_at(r), cfg.channels_at(r / 2), 3);
        }
        init.linear("enc.out", cfg.channels_at(4) * 16, cfg.latent_dim, 1.0);
    }

    let mut generator = ParamStore::new();
    {
        let mut init = Init {
            store: &mut generator,
            rng: stream_rng(seed, 2),
        };
        init.normal("gen.tgt_embed", &[cfg.num_domains, cfg.domain_embed_dim], 1.0);
        let mut fan_in = cfg.latent_dim + cfg.domain_embed_dim;
        for l in 0..cfg.mapping_layers {
            init.linear(&format!("gen.map{l}"), fan_in, cfg.style_dim, 2f64.sqrt());
            fan_in = cfg.style_dim;
        }
        init.normal("gen.const", &[1, cfg.channels_at(4), 4, 4], 1.0);
        for (l, &r) in res.iter().enumerate() {
            let cin = if l == 0 { cfg.channels_at(4) } else { cfg.channels_at(r / 2) };
            let cout = cfg.channels_at(r);
            init.conv(&format!("gen.syn{l}"), cin, cout, 3);
            init.linear(&format!("gen.syn{l}.affine"), cfg.style_dim, cin, 1.0);
        }
        let l = res.len();
        init.conv(&format!("gen.syn{l}"), cfg.channels_at(size), cfg.channels, 1);
        init.linear(&format!("gen.syn{l}.affine"), cfg.style_dim, cfg.channels_at(size), 1.0);
        for l in 0..=res.len() {
            let b = generator.get_mut(&format!("gen.syn{l}.affine.b")).expect("just inserted");
            b.data_mut().iter_mut().for_each(|v| *v = T::one());
        }
    }

    let mut discriminator = ParamStore::new();
    {
        let mut init = Init {
            store: &mut discriminator,
            rng: stream_rng(seed, 3),
        };
        init.conv("disc.in", cfg.channels, cfg.channels_at(size), 3);
        for &r in res.iter().rev().filter(|&&r| r > 4) {
            init.conv(&format!("disc.down{r}"), cfg.channels_at(r), cfg.channels_at(r / 2), 3);
        }
        init.linear("disc.temb", cfg.time_embed_dim, cfg.disc_time_channels(), 1.0);
        init.linear("disc.fc", cfg.channels_at(4) * 16, cfg.disc_hidden, 2f64.sqrt());
        init.linear("disc.real", cfg.disc_hidden, 1, 1.0);
        if cfg.domain_head {
            init.linear("disc.domain", cfg.disc_hidden, cfg.num_domains, 1.0);
        }
    }

    let phi = init_phi(cfg)?;
    let bundle = ModelBundle {
        config: cfg.clone(),
        encoder,
        generator,
        discriminator,
        phi,
    };
    log::info!(
        "initialized model bundle: {} trainable parameters (E {}, G {}, D {}), phi {}",
        bundle.trainable_params(),
        bundle.encoder.num_params(),
        bundle.generator.num_params(),
        bundle.discriminator.num_params(),
        bundle.phi.num_params()
    );
    Ok(bundle)
}

/// The frozen extractor depends only on `phi_seed` and its widths, never on the model seed.
fn init_phi<T: Scalar>(cfg: &NetworkConfig) -> Result<ParamStore<T>> {
    let mut phi = ParamStore::new();
    let mut init = Init {
        store: &mut phi,
        rng: stream_rng(cfg.phi_seed, 0x9e37_79b9),
    };
    let mut cin = cfg.channels;
    for (i, &c) in cfg.phi_channels.iter().enumerate() {
        init.conv(&format!("phi.block{i}"), cin, c, 3);
        cin = c;
    }
    Ok(phi)
}

impl<T: Scalar> ModelBundle<T> {
    pub fn trainable_params(&self) -> usize {
        self.encoder.num_params() + self.generator.num_params() + self.discriminator.num_params()
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            phi: self.phi.cast(),
        }
    }

    pub fn phi_checksum(&self) -> String {
        self.phi.checksum()
    }

    /// The store holding parameter `name`, chosen by its prefix.
    pub fn store_for(&self, name: &str) -> &ParamStore<T> {
        match name.split('.').next() {
            Some("enc") => &self.encoder,
            Some("gen") => &self.generator,
            Some("disc") => &self.discriminator,
            _ => &self.phi,
        }
    }

    pub fn store_for_mut(&mut self, name: &str) -> &mut ParamStore<T> {
        match name.split('.').next() {
            Some("enc") => &mut self.encoder,
            Some("gen") => &mut self.generator,
            Some("disc") => &mut self.discriminator,
            _ => &mut self.phi,
        }
    }
}

/// Which networks contribute gradients in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub generator: bool,
    pub discriminator: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        encoder: false,
        generator: false,
        discriminator: false,
    };
    pub const ALL: Trainable = Trainable {
        encoder: true,
        generator: true,
        discriminator: true,
    };
    pub const DISCRIMINATOR: Trainable = Trainable {
        encoder: false,
        generator: false,
        discriminator: true,
    };
    pub const ENCODER_GENERATOR: Trainable = Trainable {
        encoder: true,
        generator: true,
        discriminator: false,
    };
}

/// Network forward passes bound to a graph.
pub struct Nets<'g, 'b, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub bundle: &'b ModelBundle<T>,
    pub trainable: Trainable,
}

pub struct DiscriminatorOutput<'g, T: Scalar> {
    /// `[B]`, strictly inside `(0, 1)`.
    pub realness: Var<'g, T>,
    /// `[B, num_domains]`; absent when the domain head is disabled.
    pub domain_logits: Option<Var<'g, T>>,
}

/// The synthesis input of one generator pass: a style vector per layer.
pub struct Styles<'g, T: Scalar> {
    pub per_layer: Vec<Var<'g, T>>,
}

fn check_labels(labels: &[usize], num_domains: usize, batch: usize) -> Result<()> {
    ensure(labels.len() == batch, || {
        format!("{} domain labels for a batch of {batch}", labels.len())
    })?;
    match labels.iter().find(|&&l| l >= num_domains) {
        Some(bad) => Err(crate::Error::validation(format!(
            "domain label {bad} out of range for {num_domains} domains"
        ))),
        None => Ok(()),
    }
}

fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = T::one();
    }
    t
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((ti as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((ti as f64 * freq).cos()));
        }
    }
    Tensor::from_vec(&[t.len(), dim], data)
}

impl<'g, 'b, T: Scalar> Nets<'g, 'b, T> {
    pub fn new(graph: &'g Graph<T>, bundle: &'b ModelBundle<T>, trainable: Trainable) -> Self {
        Self {
            graph,
            bundle,
            trainable,
        }
    }

    fn p(&self, name: &str) -> Var<'g, T> {
        let store = self.bundle.store_for(name);
        let trainable = match name.split('.').next() {
            Some("enc") => self.trainable.encoder,
            Some("gen") => self.trainable.generator,
            Some("disc") => self.trainable.discriminator,
            _ => false,
        };
        if trainable {
            self.graph.param(name, store.get(name))
        } else {
            self.graph.constant(store.get(name).clone())
        }
    }

    fn conv(&self, x: Var<'g, T>, name: &str, stride: usize) -> Var<'g, T> {
        let w = self.p(&format!("{name}.w"));
        let k = w.value().dim(2);
        x.conv2d(w, stride, k / 2).channel_bias(self.p(&format!("{name}.b")))
    }

    fn linear(&self, x: Var<'g, T>, name: &str) -> Var<'g, T> {
        x.linear(self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))
    }

    /// `E(x, s)`: a learned per-domain plane is concatenated to the image as an
    /// extra input channel; the output is a `[B, latent_dim]` code.
    pub fn encode(&self, x: Var<'g, T>, s: &[usize]) -> Result<Var<'g, T>> {
        let cfg = &self.bundle.config;
        let shape = x.shape();
        ensure(
            shape.len() == 4
                && shape[1] == cfg.channels
                && shape[2] == cfg.image_size
                && shape[3] == cfg.image_size,
            || format!("encoder input has shape {shape:?}"),
        )?;
        let b = shape[0];
        check_labels(s, cfg.num_domains, b)?;
        let size = cfg.image_size;
        let embed = self
            .graph
            .constant(one_hot(s, cfg.num_domains))
            .matmul(self.p("enc.src_embed"))
            .reshape(&[b, 1, size, size]);
        let mut h = self.conv(self.graph.concat1(&[x, embed]), "enc.in", 1).leaky_relu(LRELU);
        for &r in cfg.resolutions().iter().rev().filter(|&&r| r > 4) {
            h = self.conv(h, &format!("enc.down{r}"), 2).leaky_relu(LRELU);
        }
        let flat = h.reshape(&[b, cfg.channels_at(4) * 16]);
        Ok(self.linear(flat, "enc.out"))
    }

    /// Mapping network: `[z ‖ embed(c)] → w`.
    pub fn map(&self, z: Var<'g, T>, c: &[usize]) -> Result<Var<'g, T>> {
        let cfg = &self.bundle.config;
        let shape = z.shape();
        ensure(shape.len() == 2 && shape[1] == cfg.latent_dim, || {
            format!("latent code has shape {shape:?}, expected [B, {}]", cfg.latent_dim)
        })?;
        ensure(z.value().is_finite(), || "latent code is not finite".into())?;
        check_labels(c, cfg.num_domains, shape[0])?;
        let embed = self
            .graph
            .constant(one_hot(c, cfg.num_domains))
            .matmul(self.p("gen.tgt_embed"));
        let mut h = self.graph.concat1(&[z, embed]);
        for l in 0..cfg.mapping_layers {
            h = self.linear(h, &format!("gen.map{l}")).leaky_relu(LRELU);
        }
        Ok(h)
    }

    /// Styles for every layer: `w` before `crossover`, `w_mix` from it on.
    pub fn styles(&self, w: Var<'g, T>, mix: Option<(Var<'g, T>, usize)>) -> Result<Styles<'g, T>> {
        let layers = self.bundle.config.num_style_layers();
        let per_layer = match mix {
            None => vec![w; layers],
            Some((w2, crossover)) => {
                ensure(crossover <= layers, || {
                    format!("crossover layer {crossover} exceeds the {layers} generator layers")
                })?;
                (0..layers).map(|l| if l < crossover { w } else { w2 }).collect()
            }
        };
        Ok(Styles { per_layer })
    }

    /// Modulated convolution with weight demodulation, expressed as
    /// input scaling, a shared convolution, and output scaling.
    fn modconv(&self, x: Var<'g, T>, w: Var<'g, T>, layer: usize, demodulate: bool) -> Var<'g, T> {
        let name = format!("gen.syn{layer}");
        let style = self.linear(w, &format!("{name}.affine"));
        let weight = self.p(&format!("{name}.w"));
        let ws = weight.value().shape().to_vec();
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        let mut y = x.scale_bc(style).conv2d(weight, 1, k / 2);
        if demodulate {
            let w2 = weight
                .square()
                .reshape(&[cout * cin, k * k])
                .sum_last()
                .reshape(&[cout, cin]);
            let demod = style.square().matmul(w2.transpose()).add_scalar(1e-8).powf(-0.5);
            y = y.scale_bc(demod);
        }
        y.channel_bias(self.p(&format!("{name}.b")))
    }

    pub fn synthesize(&self, styles: &Styles<'g, T>) -> Var<'g, T> {
        let cfg = &self.bundle.config;
        let b = styles.per_layer[0].shape()[0];
        let mut h = self.p("gen.const").gather_rows(&vec![0; b]);
        for (l, _) in cfg.resolutions().iter().enumerate() {
            if l > 0 {
                h = h.upsample2x();
            }
            h = self.modconv(h, styles.per_layer[l], l, true).leaky_relu(LRELU);
        }
        let last = cfg.resolutions().len();
        self.modconv(h, styles.per_layer[last], last, false).tanh()
    }

    /// `G(z, c)`, optionally mixing styles with a second code from `crossover` on.
    pub fn generate(
        &self,
        z: Var<'g, T>,
        c: &[usize],
        mix: Option<(Var<'g, T>, usize)>,
    ) -> Result<Var<'g, T>> {
        let w = self.map(z, c)?;
        let mix = match mix {
            Some((z2, k)) => Some((self.map(z2, c)?, k)),
            None => None,
        };
        Ok(self.synthesize(&self.styles(w, mix)?))
    }

    /// `D(y, t)`: realness and domain logits for diffused images.
    pub fn discriminate(&self, y: Var<'g, T>, t: &[usize]) -> Result<DiscriminatorOutput<'g, T>> {
        let cfg = &self.bundle.config;
        let shape = y.shape();
        ensure(
            shape.len() == 4 && shape[1] == cfg.channels && shape[2] == cfg.image_size,
            || format!("discriminator input has shape {shape:?}"),
        )?;
        let b = shape[0];
        ensure(t.len() == b, || format!("{} timesteps for a batch of {b}", t.len()))?;
        let temb = self.linear(
            self.graph.constant(timestep_embedding(t, cfg.time_embed_dim)),
            "disc.temb",
        );
        let mut h = self.conv(y, "disc.in", 1).leaky_relu(LRELU);
        for (i, &r) in cfg.resolutions().iter().rev().filter(|&&r| r > 4).enumerate() {
            h = self.conv(h, &format!("disc.down{r}"), 2);
            if i == 0 {
                h = h.add_bc(temb);
            }
            h = h.leaky_relu(LRELU);
        }
        let flat = h.reshape(&[b, cfg.channels_at(4) * 16]);
        let feat = self.linear(flat, "disc.fc").leaky_relu(LRELU);
        let realness = self
            .linear(feat, "disc.real")
            .reshape(&[b])
            .sigmoid()
            .scale(1.0 - 2.0 * REALNESS_EPS)
            .add_scalar(REALNESS_EPS);
        let domain_logits = if cfg.domain_head {
            Some(self.linear(feat, "disc.domain"))
        } else {
            None
        };
        Ok(DiscriminatorOutput {
            realness,
            domain_logits,
        })
    }

    /// Feature maps of the frozen extractor, coarsening by 2× per layer.
    pub fn perceptual_features(&self, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for i in 0..self.bundle.config.phi_channels.len() {
            let name = format!("phi.block{i}");
            let w = self.graph.constant(self.bundle.phi.get(&format!("{name}.w")).clone());
            let bias = self.graph.constant(self.bundle.phi.get(&format!("{name}.b")).clone());
            h = h.conv2d(w, 1, 1).channel_bias(bias).leaky_relu(LRELU).avg_pool2x();
            out.push(h);
        }
        out
    }

    /// Random-direction path-length estimate per sample: the RMS of a central
    /// finite-difference Jacobian-vector product of the synthesis network.
    pub fn path_lengths(&self, w: Var<'g, T>, rng: &mut Rng, eps: f64) -> Var<'g, T> {
        let shape = w.shape();
        let dir = self.graph.constant(normal_tensor::<T>(&shape, 1.0, rng));
        let step = dir.scale(eps);
        let layers = self.bundle.config.num_style_layers();
        let plus = self.synthesize(&Styles {
            per_layer: vec![w.add(step); layers],
        });
        let minus = self.synthesize(&Styles {
            per_layer: vec![w.sub(step); layers],
        });
        let jvp = plus.sub(minus).scale(1.0 / (2.0 * eps));
        jvp.square().mean_per_row().add_scalar(1e-8).sqrt()
    }
}

/// Convenience wrappers that run a single pass without recording gradients.
impl<T: Scalar> ModelBundle<T> {
    pub fn encode_tensor(&self, x: &Tensor<T>, s: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, self, Trainable::NONE);
        Ok(nets.encode(g.constant(x.clone()), s)?.tensor())
    }

    pub fn generate_tensor(
        &self,
        z: &Tensor<T>,
        c: &[usize],
        mix: Option<(&Tensor<T>, usize)>,
    ) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, self, Trainable::NONE);
        let mix = mix.map(|(z2, k)| (g.constant(z2.clone()), k));
        Ok(nets.generate(g.constant(z.clone()), c, mix)?.tensor())
    }

    /// `G(E(x, s), c)` without mixing.
    pub fn translate_tensor(&self, x: &Tensor<T>, s: &[usize], c: &[usize]) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, self, Trainable::NONE);
        let z = nets.encode(g.constant(x.clone()), s)?;
        Ok(nets.generate(z, c, None)?.tensor())
    }

    /// Realness `[B]` and domain logits `[B, K]` (if present).
    pub fn discriminate_tensor(
        &self,
        y: &Tensor<T>,
        t: &[usize],
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, self, Trainable::NONE);
        let out = nets.discriminate(g.constant(y.clone()), t)?;
        Ok((out.realness.tensor(), out.domain_logits.map(|l| l.tensor())))
    }

    pub fn perceptual_tensors(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let g = Graph::no_grad();
        let nets = Nets::new(&g, self, Trainable::NONE);
        nets.perceptual_features(g.constant(x.clone()))
            .into_iter()
            .map(|v| v.tensor())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, 0);
        Tensor::from_vec(
            &[b, 1, size, size],
            (0..b * size * size).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
    }

    #[test]
    fn default_bundle_shapes_and_budget() {
        let cfg = NetworkConfig::default();
        let bundle = init_bundle::<f32>(&cfg, 3).unwrap();
        assert!(bundle.trainable_params() < 5_000_000);
        assert_eq!(bundle.discriminator.get("disc.domain.w").dim(1), 3);
        assert_eq!(cfg.num_style_layers(), 5);
        let x = images(8, 32, 1);
        let s = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let z = bundle.encode_tensor(&x, &s).unwrap();
        assert_eq!(z.shape(), &[8, 128]);
        let img = bundle.generate_tensor(&z, &[2; 8], None).unwrap();
        assert_eq!(img.shape(), &[8, 1, 32, 32]);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (real, logits) = bundle.discriminate_tensor(&img, &[1; 8]).unwrap();
        assert_eq!(real.shape(), &[8]);
        assert!(real.data().iter().all(|&r| r > 0.0 && r < 1.0));
        assert_eq!(logits.unwrap().shape(), &[8, 3]);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::default();
        let a = init_bundle::<f32>(&cfg, 3).unwrap();
        let b = init_bundle::<f32>(&cfg, 3).unwrap();
        let c = init_bundle::<f32>(&cfg, 4).unwrap();
        assert_eq!(a.generator.checksum(), b.generator.checksum());
        assert_ne!(a.generator.checksum(), c.generator.checksum());
        assert_eq!(a.phi_checksum(), c.phi_checksum());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            NetworkConfig {
                image_size: 24,
                ..Default::default()
            },
            NetworkConfig {
                num_domains: 1,
                ..Default::default()
            },
            NetworkConfig {
                channels: 2,
                ..Default::default()
            },
        ] {
            assert!(init_bundle::<f32>(&cfg, 0).is_err());
        }
    }

    #[test]
    fn encoder_distinguishes_source_domain() {
        let bundle = init_bundle::<f32>(&NetworkConfig::default(), 5).unwrap();
        let x = images(2, 32, 9);
        let z0 = bundle.encode_tensor(&x, &[0, 0]).unwrap();
        let z0b = bundle.encode_tensor(&x, &[0, 0]).unwrap();
        let z1 = bundle.encode_tensor(&x, &[1, 1]).unwrap();
        assert_eq!(z0, z0b);
        let diff: f32 = z0.data().iter().zip(z1.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff.sqrt() > 0.0);
        assert!(bundle.encode_tensor(&x, &[0, 3]).is_err());
    }

    #[test]
    fn mixing_boundaries() {
        let bundle = init_bundle::<f32>(&NetworkConfig::default(), 5).unwrap();
        let x = images(3, 32, 2);
        let z1 = bundle.encode_tensor(&x, &[0, 1, 2]).unwrap();
        let z2 = bundle.encode_tensor(&x, &[2, 0, 1]).unwrap();
        let c = [1, 1, 0];
        let l = bundle.config.num_style_layers();
        let only1 = bundle.generate_tensor(&z1, &c, None).unwrap();
        let only2 = bundle.generate_tensor(&z2, &c, None).unwrap();
        assert_eq!(bundle.generate_tensor(&z1, &c, Some((&z2, 0))).unwrap(), only2);
        assert_eq!(bundle.generate_tensor(&z1, &c, Some((&z2, l))).unwrap(), only1);
        let mid = bundle.generate_tensor(&z1, &c, Some((&z2, 2))).unwrap();
        assert_ne!(mid, only1);
        assert_ne!(mid, only2);
        assert!(bundle.generate_tensor(&z1, &c, Some((&z2, l + 1))).is_err());
    }

    #[test]
    fn timestep_embedding_is_live() {
        let bundle = init_bundle::<f32>(&NetworkConfig::default(), 5).unwrap();
        let y = images(1, 32, 4);
        let (r1, _) = bundle.discriminate_tensor(&y, &[1]).unwrap();
        let (r64, _) = bundle.discriminate_tensor(&y, &[64]).unwrap();
        assert!((r1.data()[0] - r64.data()[0]).abs() > 0.0);
    }

    #[test]
    fn perceptual_pyramid_shapes() {
        let bundle = init_bundle::<f32>(&NetworkConfig::default(), 5).unwrap();
        let feats = bundle.perceptual_tensors(&images(2, 32, 3));
        let sizes: Vec<usize> = feats.iter().map(|f| f.dim(2)).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        assert_eq!(feats[2].dim(1), 64);
    }

    #[test]
    fn single_domain_discriminator_has_no_domain_head() {
        let cfg = NetworkConfig {
            domain_head: false,
            ..Default::default()
        };
        let bundle = init_bundle::<f32>(&cfg, 1).unwrap();
        assert!(!bundle.discriminator.contains("disc.domain.w"));
        let (_, logits) = bundle.discriminate_tensor(&images(2, 32, 1), &[1, 2]).unwrap();
        assert!(logits.is_none());
    }
}
