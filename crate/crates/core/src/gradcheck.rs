//! Central finite-difference checks of the tape's backward rules.
//!
//! Checks run at `f64` so that the difference quotient is not swamped by
//! rounding. Each element is compared with
//! `|a - n| / max(|a|, |n|, ABS_FLOOR)`, which accepts either a relative error
//! of `TOLERANCE` or an absolute error of `TOLERANCE * ABS_FLOOR`.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::RngCore;
use serde::Serialize;

use crate::autodiff::{Activation, OpKind, Tape, Var};
use crate::error::Result;
use crate::model::{Architecture, ModelConfig, Sampling, Vae, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{loss_on_tape, ReconLoss};
use crate::wavelet::SubBandVars;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-2;

/// Normalized disagreement between an analytic and a numeric derivative.
pub fn error_metric(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many elements per tensor, chosen with `seed`.
    pub max_elements: Option<usize>,
    pub seed: u64,
    pub fault: Option<(OpKind, f64)>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { epsilon: EPSILON, tolerance: TOLERANCE, max_elements: None, seed: 0, fault: None }
    }
}

/// What a checked function exposes: the scalar loss, and optionally the two
/// operands of an absolute-error term whose kinks should be avoided.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub loss: Var,
    pub kink: Option<(Var, Var)>,
}

impl From<Var> for Probe {
    fn from(loss: Var) -> Self {
        Probe { loss, kink: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose perturbation crossed a kink of |.|.
    pub skipped_kinks: usize,
    pub worst_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub label: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn worst_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst_error() <= self.tolerance
    }

    /// Tensor with the largest error, if any exceeds the tolerance.
    pub fn first_failure(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .filter(|t| t.worst_error > self.tolerance)
            .max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
    }

    pub fn skipped_kinks(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped_kinks).sum()
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    /// Worst error grouped by the name up to the first dot (`encoder`, `posterior`, `decoder`).
    pub fn by_module(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            let module = t.name.split('.').next().unwrap_or(&t.name).to_string();
            let e = out.entry(module).or_insert(0.0f64);
            *e = e.max(t.worst_error);
        }
        out
    }
}

fn sign_pattern(tape: &Tape<f64>, kink: Option<(Var, Var)>) -> Vec<i8> {
    let Some((a, b)) = kink else { return Vec::new() };
    tape.value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1
            } else if d < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Compare the tape's gradient of `f` with respect to every input against central differences.
pub fn check_function<F>(label: &str, inputs: &[(String, Tensor<f64>)], opts: &CheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Probe>,
{
    let mut tape = Tape::new();
    if let Some((kind, factor)) = opts.fault {
        tape.inject_fault(kind, factor);
    }
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let probe = f(&mut tape, &vars)?;
    tape.backward(probe.loss)?;
    let grads: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<i8>)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let p = f(&mut t, &vs)?;
        Ok((t.value(p.loss).data()[0], sign_pattern(&t, p.kink)))
    };

    let mut sampler = rng::stream(opts.seed, "gradcheck");
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let picks: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut v = index::sample(&mut sampler as &mut dyn RngCore, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            worst_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in picks {
            let orig = tensor.data()[j];
            values[i].data_mut()[j] = orig + opts.epsilon;
            let (plus, sig_plus) = eval(&values)?;
            values[i].data_mut()[j] = orig - opts.epsilon;
            let (minus, sig_minus) = eval(&values)?;
            values[i].data_mut()[j] = orig;
            if sig_plus != sig_minus {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads[i].data()[j];
            let e = error_metric(analytic, numeric);
            check.checked += 1;
            if e > check.worst_error || check.checked == 1 {
                check.worst_error = e;
                check.worst_index = j;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradReport { label: label.to_string(), tolerance: opts.tolerance, tensors })
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, rng: &mut dyn RngCore) -> Result<Var> {
    let r = Tensor::<f64>::randn(tape.value(out).shape(), 1.0, rng);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn weighted_sum_seeded(tape: &mut Tape<f64>, outs: &[Var], seed: u64) -> Result<Var> {
    let mut rng = rng::stream(seed, "gradcheck/weights");
    let mut total = weighted_sum(tape, outs[0], &mut rng)?;
    for &o in &outs[1..] {
        let s = weighted_sum(tape, o, &mut rng)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

fn randn(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

/// One finite-difference check per differentiable operation.
pub fn check_ops(opts: &CheckOptions) -> Result<Vec<GradReport>> {
    let mut rng = rng::stream(opts.seed, "gradcheck/ops");
    let seed = opts.seed;
    let mut reports = Vec::new();
    let named = |pairs: Vec<(&str, Tensor<f64>)>| -> Vec<(String, Tensor<f64>)> {
        pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };

    for (stride, label) in [(1, "conv2d_stride1"), (2, "conv2d_stride2")] {
        let inputs = named(vec![
            ("x", randn(&[2, 3, 7, 6], 1.0, &mut rng)),
            ("weight", randn(&[4, 3, 3, 3], 0.3, &mut rng)),
            ("bias", randn(&[4], 0.3, &mut rng)),
        ]);
        reports.push(check_function(label, &inputs, opts, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
            Ok(weighted_sum_seeded(t, &[y], seed)?.into())
        })?);
    }
    let inputs =
        named(vec![("x", randn(&[1, 2, 4, 4], 1.0, &mut rng)), ("weight", randn(&[3, 2, 1, 1], 0.5, &mut rng))]);
    reports.push(check_function("conv2d_pointwise", &inputs, opts, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        Ok(weighted_sum_seeded(t, &[y], seed)?.into())
    })?);

    let x = named(vec![("x", randn(&[1, 2, 5, 5], 1.5, &mut rng))]);
    reports.push(check_function("silu", &x, opts, |t, v| {
        let y = t.activation(v[0], Activation::Silu)?;
        Ok(weighted_sum_seeded(t, &[y], seed)?.into())
    })?);
    reports.push(check_function("tanh", &x, opts, |t, v| {
        let y = t.tanh(v[0])?;
        Ok(weighted_sum_seeded(t, &[y], seed)?.into())
    })?);
    reports.push(check_function("upsample2x", &x, opts, |t, v| {
        let y = t.upsample2x(v[0])?;
        Ok(weighted_sum_seeded(t, &[y], seed)?.into())
    })?);

    for (h, w, label) in [(6, 8, "dwt2_even"), (5, 7, "dwt2_odd")] {
        let inputs = named(vec![("x", randn(&[1, 2, h, w], 1.0, &mut rng))]);
        reports.push(check_function(label, &inputs, opts, |t, v| {
            let b = t.dwt2(v[0])?;
            Ok(weighted_sum_seeded(t, &[b.ll, b.lh, b.hl, b.hh], seed)?.into())
        })?);
    }
    for (h, w, label) in [(6usize, 8usize, "idwt2_even"), (5, 7, "idwt2_odd")] {
        let band = [1, 2, h.div_ceil(2), w.div_ceil(2)];
        let inputs = named(vec![
            ("ll", randn(&band, 1.0, &mut rng)),
            ("lh", randn(&band, 1.0, &mut rng)),
            ("hl", randn(&band, 1.0, &mut rng)),
            ("hh", randn(&band, 1.0, &mut rng)),
        ]);
        reports.push(check_function(label, &inputs, opts, |t, v| {
            let bands = SubBandVars { ll: v[0], lh: v[1], hl: v[2], hh: v[3], source_height: h, source_width: w };
            let y = t.idwt2(&bands)?;
            Ok(weighted_sum_seeded(t, &[y], seed)?.into())
        })?);
    }

    let inputs = named(vec![
        ("features", randn(&[2, 4, 3, 3], 1.0, &mut rng)),
        ("weight", randn(&[4, 4, 1, 1], 0.5, &mut rng)),
        ("bias", randn(&[4], 0.5, &mut rng)),
    ]);
    reports.push(check_function("posterior", &inputs, opts, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
        let (mean, log_var) = t.split_channels(y, 2)?;
        let log_var = t.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(weighted_sum_seeded(t, &[mean, log_var], seed)?.into())
    })?);

    let noise = randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let inputs =
        named(vec![("mean", randn(&[2, 2, 3, 3], 1.0, &mut rng)), ("log_var", randn(&[2, 2, 3, 3], 0.5, &mut rng))]);
    reports.push(check_function("reparameterize", &inputs, opts, |t, v| {
        let z = t.reparameterize(v[0], v[1], noise.clone())?;
        Ok(weighted_sum_seeded(t, &[z], seed)?.into())
    })?);
    reports.push(check_function("kl", &inputs, opts, |t, v| Ok(t.kl_divergence(v[0], v[1])?.into()))?);

    let inputs = named(vec![("a", randn(&[2, 3, 4, 4], 1.0, &mut rng)), ("b", randn(&[2, 3, 4, 4], 1.0, &mut rng))]);
    reports.push(check_function("mean_abs_error", &inputs, opts, |t, v| {
        let loss = t.mean_abs_error(v[0], v[1])?;
        Ok(Probe { loss, kink: Some((v[0], v[1])) })
    })?);
    reports.push(check_function("mean_squared_error", &inputs, opts, |t, v| {
        Ok(t.mean_squared_error(v[0], v[1])?.into())
    })?);

    Ok(reports)
}

/// Model with every tensor made non-zero, so all paths carry gradient.
pub fn check_model_instance(config: &ModelConfig, arch: Architecture, seed: u64) -> Result<Vae<f64>> {
    let mut init = rng::stream(seed, rng::INIT);
    let mut vae: Vae<f64> = Vae::<f32>::new(config.clone(), arch, &mut init)?.cast();
    let mut extra = rng::stream(seed, "gradcheck/params");
    let store = vae.params_mut();
    for i in 0..store.len() {
        let t = store.tensor_mut(i);
        if t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::randn(t.shape(), 0.1, &mut extra);
        }
    }
    Ok(vae)
}

/// Check the gradient of `recon_l1 + kl` with respect to every model parameter.
pub fn check_model(config: &ModelConfig, arch: Architecture, batch: usize, opts: &CheckOptions) -> Result<GradReport> {
    let vae = check_model_instance(config, arch, opts.seed)?;
    let mut data = rng::stream(opts.seed, "gradcheck/data");
    let x = Tensor::<f64>::uniform(&config.input_shape(batch), -1.0, 1.0, &mut data);
    let noise = Tensor::<f64>::randn(&config.latent_shape(batch), 1.0, &mut data);
    let inputs: Vec<(String, Tensor<f64>)> = vae.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    check_function(arch.as_str(), &inputs, opts, |t, p| {
        let xv = t.constant(x.clone());
        let out = vae.forward(t, p, xv, Sampling::Noise(noise.clone()))?;
        let vars = loss_on_tape(t, xv, &out, 1.0, ReconLoss::L1)?;
        Ok(Probe { loss: vars.total, kink: Some((out.recon, xv)) })
    })
}

/// Smallest configuration the model checks run on.
pub fn check_config() -> ModelConfig {
    ModelConfig { base_channels: 4, num_downsamples: 2, latent_channels: 2, input_size: 16, ..ModelConfig::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_switches_between_relative_and_absolute() {
        assert_eq!(error_metric(1.0, 1.0), 0.0);
        assert!((error_metric(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert!((error_metric(1e-6, 0.0) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn all_ops_pass() {
        for r in check_ops(&CheckOptions::default()).unwrap() {
            assert!(r.passed(), "{} worst {:e}: {:?}", r.label, r.worst_error(), r.first_failure());
            assert!(r.checked() > 0, "{}", r.label);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = CheckOptions { fault: Some((OpKind::Tanh, 1.01)), ..CheckOptions::default() };
        let reports = check_ops(&opts).unwrap();
        let tanh = reports.iter().find(|r| r.label == "tanh").unwrap();
        assert!(!tanh.passed());
        assert!(reports.iter().find(|r| r.label == "silu").unwrap().passed());
    }

    #[test]
    fn model_fault_names_a_parameter() {
        let opts = CheckOptions { fault: Some((OpKind::Idwt2, 1.5)), max_elements: Some(4), ..CheckOptions::default() };
        let r = check_model(&check_config(), Architecture::Expdwt, 1, &opts).unwrap();
        let bad = r.first_failure().expect("fault must be detected");
        assert!(bad.name.starts_with("encoder."), "{}", bad.name);
    }
}
