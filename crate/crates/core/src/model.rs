//! Baseline VAE and the wavelet-augmented variant.
//!
//! Both architectures own exactly the same parameters. The wavelet variant
//! additionally feeds each Haar sub-band of the input through the spatial
//! encoder, merges the four encoded maps with the inverse transform, and adds
//! the result to the spatial features before the posterior layer.

use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::wavelet::SubBandVars;

/// Bounds applied to the log-variance before it is exponentiated.
pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Baseline,
    Expdwt,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::Expdwt => "expdwt",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Architecture::Baseline => 0,
            Architecture::Expdwt => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Architecture::Baseline),
            1 => Ok(Architecture::Expdwt),
            other => Err(Error::Format { what: "architecture tag", detail: other.to_string() }),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Architecture::Baseline),
            "expdwt" => Ok(Architecture::Expdwt),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Whether the sub-band encoders reuse the spatial encoder's weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyWeights {
    #[default]
    Shared,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Each stage halves resolution, so the downsampling factor is `2^num_downsamples`.
    pub num_downsamples: usize,
    pub latent_channels: usize,
    pub input_size: usize,
    #[serde(default)]
    pub frequency_branch_weights: FrequencyWeights,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 16,
            num_downsamples: 2,
            latent_channels: 4,
            input_size: 64,
            frequency_branch_weights: FrequencyWeights::Shared,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_downsamples > 8 {
            return bad(format!("num_downsamples {} is unreasonably deep", self.num_downsamples));
        }
        // One extra factor of two keeps the encoded sub-bands even-sized for the inverse transform.
        let unit = 1usize << (self.num_downsamples + 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return bad(format!(
                "input_size {} must be a positive multiple of 2^(num_downsamples+1) = {unit}",
                self.input_size
            ));
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.num_downsamples
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / self.downsampling_factor()
    }

    /// Width of the encoder output `m` (and of `m_s`, `m_e`).
    pub fn feature_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.latent_channels, self.latent_size(), self.latent_size()]
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.input_size, self.input_size]
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Little-endian header fields for the checkpoint container.
    pub fn to_header(&self) -> Vec<i32> {
        vec![
            self.in_channels as i32,
            self.base_channels as i32,
            self.num_downsamples as i32,
            self.latent_channels as i32,
            self.input_size as i32,
            match self.frequency_branch_weights {
                FrequencyWeights::Shared => 0,
                FrequencyWeights::Independent => 1,
            },
            match self.activation {
                Activation::Silu => 0,
                Activation::Relu => 1,
            },
        ]
    }

    pub fn from_header(fields: &[i32]) -> Result<Self> {
        let [a, b, c, d, e, f, g] = fields else {
            return Err(Error::Format {
                what: "checkpoint header",
                detail: format!("expected 7 fields, got {}", fields.len()),
            });
        };
        let pos = |v: i32| -> Result<usize> {
            usize::try_from(v)
                .map_err(|_| Error::Format { what: "checkpoint header", detail: format!("negative field {v}") })
        };
        let cfg = ModelConfig {
            in_channels: pos(*a)?,
            base_channels: pos(*b)?,
            num_downsamples: pos(*c)?,
            latent_channels: pos(*d)?,
            input_size: pos(*e)?,
            frequency_branch_weights: match f {
                0 => FrequencyWeights::Shared,
                1 => FrequencyWeights::Independent,
                _ => {
                    return Err(Error::Format {
                        what: "checkpoint header",
                        detail: format!("frequency weights flag {f}"),
                    })
                }
            },
            activation: match g {
                0 => Activation::Silu,
                1 => Activation::Relu,
                _ => return Err(Error::Format { what: "checkpoint header", detail: format!("activation flag {g}") }),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ordered, named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Float> ParamStore<T> {
    fn add(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replace every tensor, checking names and shapes against the current layout.
    pub fn load(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        if records.len() != self.tensors.len() {
            return Err(Error::Format {
                what: "parameter set",
                detail: format!("expected {} tensors, got {}", self.tensors.len(), records.len()),
            });
        }
        for (i, (name, t)) in records.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format {
                    what: "parameter set",
                    detail: format!(
                        "record {i} is {name} {:?}, expected {} {:?}",
                        t.shape(),
                        self.names[i],
                        self.tensors[i].shape()
                    ),
                });
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// Put every tensor on `tape`, as gradient-receiving leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    stages: Vec<[Conv; 2]>,
    out: Conv,
}

#[derive(Clone, Debug)]
struct DecoderLayout {
    input: Conv,
    stages: Vec<[Conv; 2]>,
    out: Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Kaiming,
    Zero,
}

struct Builder<'a, T: Float> {
    store: ParamStore<T>,
    rng: &'a mut dyn RngCore,
}

impl<T: Float> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Conv {
        let shape = [cout, cin, k, k];
        let weight = match init {
            Init::Kaiming => {
                let std = (2.0 / (cin * k * k) as f64).sqrt();
                Tensor::randn(&shape, std, &mut *self.rng)
            }
            Init::Zero => Tensor::zeros(&shape),
        };
        let weight = self.store.add(format!("{name}.weight"), weight);
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv { weight, bias, stride, padding: k / 2 }
    }

    fn encoder(&mut self, prefix: &str, cfg: &ModelConfig) -> EncoderLayout {
        let mut stages = Vec::with_capacity(cfg.num_downsamples);
        let mut cin = cfg.in_channels;
        for s in 0..cfg.num_downsamples {
            let ch = cfg.stage_channels(s);
            let a = self.conv(&format!("{prefix}.stage{s}.conv_a"), cin, ch, 3, 1, Init::Kaiming);
            let b = self.conv(&format!("{prefix}.stage{s}.conv_down"), ch, ch, 3, 2, Init::Kaiming);
            stages.push([a, b]);
            cin = ch;
        }
        let out = self.conv(&format!("{prefix}.out"), cin, cfg.feature_channels(), 3, 1, Init::Kaiming);
        EncoderLayout { stages, out }
    }

    fn decoder(&mut self, cfg: &ModelConfig) -> DecoderLayout {
        let top =
            if cfg.num_downsamples == 0 { cfg.base_channels } else { cfg.stage_channels(cfg.num_downsamples - 1) };
        let input = self.conv("decoder.in", cfg.latent_channels, top, 3, 1, Init::Kaiming);
        let mut stages = Vec::with_capacity(cfg.num_downsamples);
        let mut cin = top;
        for s in (0..cfg.num_downsamples).rev() {
            let ch = if s == 0 { cfg.base_channels } else { cfg.stage_channels(s - 1) };
            let a = self.conv(&format!("decoder.stage{s}.conv_a"), cin, ch, 3, 1, Init::Kaiming);
            let b = self.conv(&format!("decoder.stage{s}.conv_b"), ch, ch, 3, 1, Init::Kaiming);
            stages.push([a, b]);
            cin = ch;
        }
        let out = self.conv("decoder.out", cin, cfg.in_channels, 3, 1, Init::Kaiming);
        DecoderLayout { input, stages, out }
    }
}

/// Posterior parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Diagonal Gaussian over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<T: Float = f32> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Float> GaussianPosterior<T> {
    /// Draw `mean + exp(0.5 * log_var) * noise` with standard normal noise.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        let noise = Tensor::<T>::randn(self.mean.shape(), 1.0, rng);
        let half = T::lit(0.5);
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.log_var.data())
            .zip(noise.data())
            .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
            .collect();
        Tensor::new(self.mean.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn variance(&self) -> Tensor<T> {
        self.log_var.map(|v| v.exp())
    }
}

/// How the latent code is drawn from the posterior.
pub enum Sampling<'a, T: Float> {
    /// Fresh standard-normal noise from the generator.
    Random(&'a mut dyn RngCore),
    /// Caller-supplied noise, e.g. for finite-difference checks.
    Noise(Tensor<T>),
    /// Use the posterior mean directly.
    Mean,
}

/// Where the frequency branch takes its sub-bands from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SubBandSource {
    #[default]
    Dwt,
    /// Four all-zero bands; isolates the branch for diagnostics.
    Zeros,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub recon: Var,
    pub posterior: PosteriorVars,
    pub latent: Var,
    /// Spatial features `m`.
    pub spatial: Var,
    /// Frequency features `m_s`, absent for the baseline.
    pub frequency: Option<Var>,
    /// Features fed to the posterior layer.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct Vae<T: Float = f32> {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore<T>,
    encoder: EncoderLayout,
    band_encoders: Option<Vec<EncoderLayout>>,
    q: Conv,
    decoder: DecoderLayout,
}

impl<T: Float> Vae<T> {
    /// Build a model with fresh weights drawn from `rng`.
    pub fn new(config: ModelConfig, arch: Architecture, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T> { store: ParamStore::default(), rng };
        let encoder = b.encoder("encoder", &config);
        let q = b.conv("posterior", config.feature_channels(), 2 * config.latent_channels, 1, 1, Init::Zero);
        let decoder = b.decoder(&config);
        let band_encoders = match config.frequency_branch_weights {
            FrequencyWeights::Shared => None,
            FrequencyWeights::Independent => {
                Some(["ll", "lh", "hl", "hh"].iter().map(|band| b.encoder(&format!("band_{band}"), &config)).collect())
            }
        };
        Ok(Vae { config, arch, params: b.store, encoder, band_encoders, q, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same layout and weights in another precision.
    pub fn cast<U: Float>(&self) -> Vae<U> {
        Vae {
            config: self.config.clone(),
            arch: self.arch,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            band_encoders: self.band_encoders.clone(),
            q: self.q,
            decoder: self.decoder.clone(),
        }
    }

    /// Same weights, other architecture.
    pub fn with_architecture(&self, arch: Architecture) -> Self {
        Vae { arch, ..self.clone() }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn conv(&self, tape: &mut Tape<T>, p: &[Var], layer: Conv, x: Var) -> Result<Var> {
        tape.conv2d(x, p[layer.weight], Some(p[layer.bias]), layer.stride, layer.padding)
    }

    fn conv_act(&self, tape: &mut Tape<T>, p: &[Var], layer: Conv, x: Var) -> Result<Var> {
        let y = self.conv(tape, p, layer, x)?;
        tape.activation(y, self.config.activation)
    }

    fn run_encoder(&self, tape: &mut Tape<T>, p: &[Var], layout: &EncoderLayout, x: Var) -> Result<Var> {
        let mut h = x;
        for [a, down] in &layout.stages {
            h = self.conv_act(tape, p, *a, h)?;
            h = self.conv_act(tape, p, *down, h)?;
        }
        self.conv(tape, p, layout.out, h)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        let want = self.config.input_shape(shape.first().copied().unwrap_or(0));
        if shape != want {
            return Err(Error::shape("encode", format!("input {shape:?} does not match config {want:?}")));
        }
        Ok(())
    }

    /// Spatial branch: `x -> m`.
    pub fn encode_spatial(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        self.run_encoder(tape, p, &self.encoder, x)
    }

    /// Frequency branch: encode each Haar sub-band, then merge with the inverse transform.
    pub fn encode_frequency(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.encode_frequency_from(tape, p, x, SubBandSource::Dwt)
    }

    pub fn encode_frequency_from(&self, tape: &mut Tape<T>, p: &[Var], x: Var, source: SubBandSource) -> Result<Var> {
        self.check_input(tape, x)?;
        let bands = match source {
            SubBandSource::Dwt => tape.dwt2(x)?,
            SubBandSource::Zeros => {
                let [n, c, h, w] = tape.value(x).dims4("encode_frequency")?;
                let shape = [n, c, h.div_ceil(2), w.div_ceil(2)];
                let mut zero = || tape.constant(Tensor::zeros(&shape));
                SubBandVars { ll: zero(), lh: zero(), hl: zero(), hh: zero(), source_height: h, source_width: w }
            }
        };
        let layout = |i: usize| match &self.band_encoders {
            Some(v) => &v[i],
            None => &self.encoder,
        };
        let ll = self.run_encoder(tape, p, layout(0), bands.ll)?;
        let lh = self.run_encoder(tape, p, layout(1), bands.lh)?;
        let hl = self.run_encoder(tape, p, layout(2), bands.hl)?;
        let hh = self.run_encoder(tape, p, layout(3), bands.hh)?;
        let [_, _, eh, ew] = tape.value(ll).dims4("encode_frequency")?;
        let encoded = SubBandVars { ll, lh, hl, hh, source_height: 2 * eh, source_width: 2 * ew };
        tape.idwt2(&encoded)
    }

    /// `m_e = m + m_s`.
    pub fn fuse(&self, tape: &mut Tape<T>, spatial: Var, frequency: Var) -> Result<Var> {
        tape.add(spatial, frequency)
    }

    /// `(mean, log_var) = Q(m_e)`, with the log-variance clamped.
    pub fn posterior(&self, tape: &mut Tape<T>, p: &[Var], features: Var) -> Result<PosteriorVars> {
        let stats = self.conv(tape, p, self.q, features)?;
        let c = tape.value(stats).dims4("posterior")?[1];
        if c != 2 * self.config.latent_channels {
            return Err(Error::shape(
                "posterior",
                format!("Q emits {c} channels, expected {}", 2 * self.config.latent_channels),
            ));
        }
        let (mean, raw) = tape.split_channels(stats, self.config.latent_channels)?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(PosteriorVars { mean, log_var })
    }

    pub fn posterior_tensors(&self, tape: &Tape<T>, post: PosteriorVars) -> GaussianPosterior<T> {
        GaussianPosterior { mean: tape.value(post.mean).clone(), log_var: tape.value(post.log_var).clone() }
    }

    /// Reparameterized draw `z = mean + sigma * noise`.
    pub fn sample(&self, tape: &mut Tape<T>, post: PosteriorVars, sampling: Sampling<'_, T>) -> Result<Var> {
        let shape = tape.value(post.mean).shape().to_vec();
        let noise = match sampling {
            Sampling::Mean => return Ok(post.mean),
            Sampling::Noise(n) => n,
            Sampling::Random(rng) => Tensor::randn(&shape, 1.0, rng),
        };
        tape.reparameterize(post.mean, post.log_var, noise)
    }

    /// `z -> x~`, squashed into [-1, 1].
    pub fn decode(&self, tape: &mut Tape<T>, p: &[Var], z: Var) -> Result<Var> {
        let shape = tape.value(z).shape();
        let want = self.config.latent_shape(shape.first().copied().unwrap_or(0));
        if shape != want {
            return Err(Error::shape("decode", format!("latent {shape:?} does not match config {want:?}")));
        }
        let mut h = self.conv_act(tape, p, self.decoder.input, z)?;
        for [a, b] in &self.decoder.stages {
            h = tape.upsample2x(h)?;
            h = self.conv_act(tape, p, *a, h)?;
            h = self.conv_act(tape, p, *b, h)?;
        }
        let out = self.conv(tape, p, self.decoder.out, h)?;
        tape.tanh(out)
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], x: Var, sampling: Sampling<'_, T>) -> Result<ForwardOutput> {
        self.forward_from(tape, p, x, sampling, SubBandSource::Dwt)
    }

    pub fn forward_from(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x: Var,
        sampling: Sampling<'_, T>,
        source: SubBandSource,
    ) -> Result<ForwardOutput> {
        let spatial = self.encode_spatial(tape, p, x)?;
        let (frequency, fused) = match self.arch {
            Architecture::Baseline => (None, spatial),
            Architecture::Expdwt => {
                let ms = self.encode_frequency_from(tape, p, x, source)?;
                (Some(ms), self.fuse(tape, spatial, ms)?)
            }
        };
        let posterior = self.posterior(tape, p, fused)?;
        let latent = self.sample(tape, posterior, sampling)?;
        let recon = self.decode(tape, p, latent)?;
        Ok(ForwardOutput { recon, posterior, latent, spatial, frequency, fused })
    }
}
