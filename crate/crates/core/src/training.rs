//! Losses, the Adam optimizer, and the seeded train/validate loop.

use std::io::Write;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::config_hash;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, DATA_RANGE};
use crate::model::{Architecture, ForwardOutput, GaussianPosterior, ModelConfig, Sampling, Vae};
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Synth { n: usize, size: usize },
    Folder { path: PathBuf, size: usize },
    Cache { path: PathBuf },
}

impl DataSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSpec::Synth { n, size } => {
                if *n == 0 || *size < 16 || size % 2 != 0 {
                    return Err(Error::Config(format!(
                        "synthetic data needs n > 0 and an even size >= 16, got n={n} size={size}"
                    )));
                }
                Ok(crate::data::synth_tiles(*n, *size, rng::stream_seed(seed, rng::SYNTH)))
            }
            #[cfg(feature = "fs")]
            DataSpec::Folder { path, size } => crate::data::load_folder(path, *size),
            #[cfg(not(feature = "fs"))]
            DataSpec::Folder { .. } => Err(Error::Config("folder loading is not compiled in".into())),
            DataSpec::Cache { path } => Dataset::load_cache(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the KL term.
    pub kl_weight: f64,
    /// Validation loss is recorded at step 0, every `eval_interval` steps, and at the end.
    pub eval_interval: usize,
    pub recon_loss: ReconLoss,
    pub val_fraction: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Architecture::Expdwt,
            seed: 0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            kl_weight: 1e-4,
            eval_interval: 100,
            recon_loss: ReconLoss::L1,
            val_fraction: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
            data: DataSpec::Synth { n: 500, size: 64 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.kl_weight > 0.0 && self.kl_weight.is_finite()) {
            return bad(format!("kl_weight must be > 0, got {}", self.kl_weight));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam moments must be in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Per-batch loss terms. `total = recon + kl_weight * kl`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Record the training objective for a forward pass on `tape`.
pub fn loss_on_tape<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    out: &ForwardOutput,
    kl_weight: f64,
    kind: ReconLoss,
) -> Result<LossVars> {
    let recon = match kind {
        ReconLoss::L1 => tape.mean_abs_error(out.recon, x)?,
        ReconLoss::L2 => tape.mean_squared_error(out.recon, x)?,
    };
    let kl = tape.kl_divergence(out.posterior.mean, out.posterior.log_var)?;
    let weighted = tape.scale(kl, kl_weight)?;
    let total = tape.add(recon, weighted)?;
    Ok(LossVars { total, recon, kl })
}

impl LossBreakdown {
    pub fn read<T: Float>(tape: &Tape<T>, v: &LossVars) -> Self {
        let s = |var: Var| tape.value(var).data()[0].as_f64();
        LossBreakdown { total: s(v.total), recon: s(v.recon), kl: s(v.kl) }
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        for (term, value) in [("reconstruction", self.recon), ("kl", self.kl), ("total", self.total)] {
            if !value.is_finite() {
                return Err(Error::NonFinite { term, value, step });
            }
        }
        Ok(())
    }
}

/// Mean absolute (or squared) error between two equally shaped tensors.
pub fn recon_loss<T: Float>(x: &Tensor<T>, recon: &Tensor<T>, kind: ReconLoss) -> Result<f64> {
    if x.shape() != recon.shape() {
        return Err(Error::shape("recon_loss", format!("{:?} vs {:?}", x.shape(), recon.shape())));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            match kind {
                ReconLoss::L1 => d.abs(),
                ReconLoss::L2 => d * d,
            }
        })
        .sum();
    Ok(total / x.numel() as f64)
}

/// KL divergence to the standard normal: batch mean of the per-item sum over latent elements.
pub fn kl_loss<T: Float>(post: &GaussianPosterior<T>) -> f64 {
    let batch = post.mean.shape()[0] as f64;
    let total: f64 = post
        .mean
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(m, lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    total / batch
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Adam {
            lr: lr as f32,
            beta1: beta1 as f32,
            beta2: beta2 as f32,
            eps: eps as f32,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Update `params[i] -= lr * m_hat / (sqrt(v_hat) + eps)`; absent gradients count as zero.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<&[f32]>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i];
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub split: Split,
}

pub const CURVES_HEADER: &str = "step,total,recon,kl,split";

pub fn write_curves(rows: &[CurveRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CURVES_HEADER}")?;
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        writeln!(out, "{},{},{},{},{}", r.step, r.total, r.recon, r.kl, split)?;
    }
    Ok(())
}

/// Model plus optimizer and the random streams that drive training.
pub struct Trainer {
    pub vae: Vae<f32>,
    pub config: TrainConfig,
    adam: Adam,
    sampling: ChaCha8Rng,
    batches: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vae = Vae::new(config.model.clone(), config.arch, &mut rng::stream(config.seed, rng::INIT))?;
        Ok(Self::with_model(vae, config))
    }

    pub fn with_model(vae: Vae<f32>, config: TrainConfig) -> Self {
        let adam = Adam::new(
            vae.params().iter().map(|(_, t)| t.numel()),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        Trainer {
            adam,
            sampling: rng::stream(config.seed, rng::SAMPLING),
            batches: rng::stream(config.seed, rng::BATCH),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            vae,
            config,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Next training batch: reshuffled each pass over `train`.
    pub fn next_batch(&mut self, train: &[usize]) -> Vec<usize> {
        let mut picked = Vec::with_capacity(self.config.batch_size);
        while picked.len() < self.config.batch_size.min(train.len()) {
            if self.cursor >= self.order.len() {
                self.order = train.to_vec();
                self.order.shuffle(&mut self.batches);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        picked
    }

    /// One forward, backward, and Adam update on `batch`.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let params = self.vae.bind(&mut tape, true);
        let x = tape.constant(batch.clone());
        let out = self.vae.forward(&mut tape, &params, x, Sampling::Random(&mut self.sampling))?;
        let vars = loss_on_tape(&mut tape, x, &out, self.config.kl_weight, self.config.recon_loss)?;
        let losses = LossBreakdown::read(&tape, &vars);
        self.step += 1;
        losses.check_finite(self.step)?;
        tape.backward(vars.total)?;
        let grads: Vec<Option<&[f32]>> = params.iter().map(|&p| tape.grad(p)).collect();
        let mut slots: Vec<&mut [f32]> = self.vae.params_mut().tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
        self.adam.step(&mut slots, &grads);
        Ok(losses)
    }

    /// Average loss over `indices` with a fixed evaluation noise stream.
    pub fn evaluate(&self, data: &Dataset, indices: &[usize]) -> Result<LossBreakdown> {
        evaluate_loss(&self.vae, &self.config, data, indices)
    }
}

pub fn evaluate_loss(vae: &Vae<f32>, config: &TrainConfig, data: &Dataset, indices: &[usize]) -> Result<LossBreakdown> {
    let mut noise = rng::stream(config.seed, rng::EVAL);
    let mut acc = LossBreakdown::default();
    let mut count = 0usize;
    for chunk in indices.chunks(config.batch_size.max(1)) {
        let mut tape = Tape::new();
        let params = vae.bind(&mut tape, false);
        let x = tape.constant(data.batch(chunk));
        let out = vae.forward(&mut tape, &params, x, Sampling::Random(&mut noise))?;
        let vars = loss_on_tape(&mut tape, x, &out, config.kl_weight, config.recon_loss)?;
        let l = LossBreakdown::read(&tape, &vars);
        let w = chunk.len() as f64;
        acc.total += l.total * w;
        acc.recon += l.recon * w;
        acc.kl += l.kl * w;
        count += chunk.len();
    }
    let n = count.max(1) as f64;
    Ok(LossBreakdown { total: acc.total / n, recon: acc.recon / n, kl: acc.kl / n })
}

/// Posterior means and mean-decoded reconstructions for each tile in `indices`.
pub struct Evaluation {
    pub means: Vec<Tensor<f32>>,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn evaluate_reconstruction(
    vae: &Vae<f32>,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    let mut means = Vec::with_capacity(indices.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let params = vae.bind(&mut tape, false);
        let batch = data.batch(chunk);
        let x = tape.constant(batch.clone());
        let out = vae.forward(&mut tape, &params, x, Sampling::Mean)?;
        let mu = tape.value(out.posterior.mean);
        let recon = tape.value(out.recon);
        for i in 0..chunk.len() {
            means.push(mu.batch_item(i));
            let (xi, ri) = (batch.batch_item(i), recon.batch_item(i));
            psnr_sum += metrics::psnr(&xi, &ri, DATA_RANGE)?;
            ssim_sum += metrics::ssim(&xi, &ri, DATA_RANGE)?;
        }
    }
    let n = indices.len().max(1) as f64;
    Ok(Evaluation { means, psnr_db: psnr_sum / n, ssim: ssim_sum / n })
}

pub fn metric_report(vae: &Vae<f32>, config: &TrainConfig, data: &Dataset, indices: &[usize]) -> Result<MetricReport> {
    let eval = evaluate_reconstruction(vae, data, indices, config.batch_size)?;
    let variance = metrics::latent_variance(&eval.means)?;
    Ok(MetricReport {
        arch: vae.architecture().to_string(),
        variance,
        psnr_db: eval.psnr_db,
        ssim: eval.ssim,
        n: indices.len(),
        config_hash: config.hash(),
    })
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub vae: Vae<f32>,
    pub curves: Vec<CurveRow>,
    pub report: MetricReport,
    pub config: TrainConfig,
}

impl TrainOutcome {
    pub fn val_curve(&self) -> Vec<&CurveRow> {
        self.curves.iter().filter(|r| r.split == Split::Val).collect()
    }
}

/// Indices used for validation; falls back to the training tiles when the split leaves none.
pub fn eval_indices(data: &Dataset) -> Vec<usize> {
    let val = data.indices(Split::Val);
    if val.len() >= 2 {
        val
    } else {
        (0..data.len()).collect()
    }
}

/// Train from scratch on `data`, which must already carry its split.
pub fn train(config: &TrainConfig, data: &Dataset, mut progress: impl FnMut(&CurveRow)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let curves = train_with(&mut trainer, data, &mut progress)?;
    let mut outcome = finish(trainer, data)?;
    outcome.curves = curves;
    Ok(outcome)
}

fn train_with(trainer: &mut Trainer, data: &Dataset, progress: &mut dyn FnMut(&CurveRow)) -> Result<Vec<CurveRow>> {
    let config = trainer.config.clone();
    let train_idx = data.indices(Split::Train);
    let val_idx = eval_indices(data);
    let mut curves = Vec::new();
    let mut record = |curves: &mut Vec<CurveRow>, step: usize, l: LossBreakdown, split: Split| {
        let row = CurveRow { step, total: l.total, recon: l.recon, kl: l.kl, split };
        progress(&row);
        curves.push(row);
    };
    record(&mut curves, 0, trainer.evaluate(data, &val_idx)?, Split::Val);
    for step in 1..=config.steps {
        let picked = trainer.next_batch(&train_idx);
        let loss = trainer.train_step(&data.batch(&picked))?;
        record(&mut curves, step, loss, Split::Train);
        if step % config.eval_interval == 0 || step == config.steps {
            let val = trainer.evaluate(data, &val_idx)?;
            info!("{} step {step}: train {:.4} val {:.4}", config.arch, loss.total, val.total);
            record(&mut curves, step, val, Split::Val);
        }
    }
    Ok(curves)
}

fn finish(trainer: Trainer, data: &Dataset) -> Result<TrainOutcome> {
    let report = metric_report(&trainer.vae, &trainer.config, data, &eval_indices(data))?;
    Ok(TrainOutcome { vae: trainer.vae, curves: Vec::new(), report, config: trainer.config })
}

/// Train baseline and wavelet models under one seed and report both.
///
/// The two configs must be identical apart from `arch`.
pub fn run_experiment(
    baseline: &TrainConfig,
    expdwt: &TrainConfig,
    data: &Dataset,
    mut progress: impl FnMut(Architecture, &CurveRow),
) -> Result<(TrainOutcome, TrainOutcome)> {
    if baseline.arch != Architecture::Baseline || expdwt.arch != Architecture::Expdwt {
        return Err(Error::Config("run_experiment expects a baseline and an expdwt config".into()));
    }
    let mut probe = expdwt.clone();
    probe.arch = Architecture::Baseline;
    if &probe != baseline {
        return Err(Error::Config("baseline and expdwt configs differ in more than the architecture".into()));
    }
    let a = train(baseline, data, |r| progress(Architecture::Baseline, r))?;
    let b = train(expdwt, data, |r| progress(Architecture::Expdwt, r))?;
    Ok((a, b))
}

/// Load the configured data, check it matches the model input, and assign the split.
pub fn load_data(config: &TrainConfig) -> Result<Dataset> {
    let mut data = config.data.load(config.seed)?;
    let (h, w) = data.tile_size();
    let size = config.model.input_size;
    if h != size || w != size {
        return Err(Error::Config(format!("tiles are {h}x{w} but model.input_size is {size}")));
    }
    data.assign_split(config.seed, config.val_fraction);
    Ok(data)
}
