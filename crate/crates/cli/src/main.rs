use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use wavelatent::data::{self, ppm, Split};
use wavelatent::gradcheck::{self, CheckOptions, GradReport};
use wavelatent::metrics::{self, MetricReport, DATA_RANGE};
use wavelatent::model::Sampling;
use wavelatent::training::{self, CurveRow, TrainConfig, TrainOutcome};
use wavelatent::{checkpoint, config, dwt2, idwt2, rng, Architecture, OpKind, Tape, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "wavelatent", version, about = "Train and compare wavelet-augmented VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.base_channels=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let cfg = config::resolve(&TrainConfig::default(), self.config.as_deref(), &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        arch: Option<Architecture>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train baseline and expdwt under one seed and tabulate both.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the validation tiles of the configured data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode and decode one image with the posterior mean.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `.png` or `.ppm`.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the four Haar sub-bands of an image and their energy statistics.
    Dwt {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule and both models.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Check at most this many elements per parameter tensor.
        #[arg(long)]
        max_elements: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: Option<OpKind>,
    },
    /// Write seeded synthetic tiles as PNG files, or as a dataset cache.
    ///
    /// A given `--seed` yields the same tiles that training draws for that seed.
    Synth {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write a single `.xdat` cache file instead of PNGs.
        #[arg(long)]
        cache: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| matches!(c.downcast_ref(), Some(wavelatent::Error::NonFinite { .. })));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Train { config, arch, out } => {
            let mut cfg = config.resolve()?;
            if let Some(a) = arch {
                cfg.arch = a;
            }
            create_dir(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let data = training::load_data(&cfg)?;
            let outcome = train_run(&cfg, &data, &out)?;
            print_table(&[&outcome.report]);
        }
        Command::Compare { config, out } => compare(&config.resolve()?, &out)?,
        Command::Eval { config, checkpoint, out } => eval(&config.resolve()?, &checkpoint, out.as_deref())?,
        Command::Reconstruct { checkpoint, image, output } => reconstruct(&checkpoint, &image, &output)?,
        Command::Dwt { image, out } => dwt(&image, &out)?,
        Command::Gradcheck { seed, max_elements, inject_fault } => {
            let opts = CheckOptions {
                seed: seed.unwrap_or(0),
                max_elements,
                fault: inject_fault.map(|k| (k, 1.5)),
                ..CheckOptions::default()
            };
            return run_gradcheck(&opts);
        }
        Command::Synth { n, size, seed, out, cache } => synth(n, size, seed, &out, cache)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Train one architecture into `dir`: config.json first, then curves, checkpoint, and report.
fn train_run(cfg: &TrainConfig, data: &data::Dataset, dir: &Path) -> anyhow::Result<TrainOutcome> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    info!(
        "{}: {} train / {} val tiles, {} steps",
        cfg.arch,
        data.indices(Split::Train).len(),
        data.indices(Split::Val).len(),
        cfg.steps
    );
    let arch = cfg.arch;
    let outcome = training::train(cfg, data, |row| log_row(arch, row))?;
    let mut csv = fs::File::create(dir.join("curves.csv"))?;
    training::write_curves(&outcome.curves, &mut csv)?;
    checkpoint::save(&outcome.vae, &dir.join("checkpoint.bin"))?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    Ok(outcome)
}

fn log_row(arch: Architecture, row: &CurveRow) {
    if row.split == Split::Val {
        info!("{arch} step {}: val total {:.5} (recon {:.5}, kl {:.3})", row.step, row.total, row.recon, row.kl);
    }
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    config_hash: String,
    baseline: String,
    expdwt: String,
    created_unix: u64,
    variance_direction: &'static str,
}

fn compare(cfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    let base = TrainConfig { arch: Architecture::Baseline, ..cfg.clone() };
    let exp = TrainConfig { arch: Architecture::Expdwt, ..cfg.clone() };
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let data = training::load_data(cfg)?;
    let a = train_run(&base, &data, &out.join("baseline"))?;
    let b = train_run(&exp, &data, &out.join("expdwt"))?;

    let mut csv = fs::File::create(out.join("val_curves.csv"))?;
    writeln!(csv, "step,baseline,expdwt")?;
    for (ra, rb) in a.val_curve().iter().zip(b.val_curve()) {
        writeln!(csv, "{},{},{}", ra.step, ra.total, rb.total)?;
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        baseline: "baseline".into(),
        expdwt: "expdwt".into(),
        created_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        variance_direction: if b.report.variance > a.report.variance { "expdwt_higher" } else { "expdwt_not_higher" },
    };
    write_json(&out.join("comparison.json"), &manifest)?;
    print_table(&[&a.report, &b.report]);
    Ok(())
}

fn print_table(reports: &[&MetricReport]) {
    let header = ["Model", "Variance", "PSNR", "SSIM"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| [r.arch.clone(), format!("{:.4}", r.variance), format!("{:.2}", r.psnr_db), format!("{:.4}", r.ssim)])
        .collect();
    let width = |i: usize| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0);
    let widths: Vec<usize> = (0..4).map(width).collect();
    let line = |cells: [&str; 4]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(header));
    println!("{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    for r in &rows {
        println!("{}", line([&r[0], &r[1], &r[2], &r[3]]));
    }
}

fn eval(cfg: &TrainConfig, ckpt: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let vae = checkpoint::load(ckpt)?;
    let cfg = TrainConfig { arch: vae.architecture(), model: vae.config().clone(), ..cfg.clone() };
    let data = training::load_data(&cfg)?;
    let report = training::metric_report(&vae, &cfg, &data, &training::eval_indices(&data))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn read_rgb(path: &Path) -> anyhow::Result<ppm::RgbImage> {
    data::load_image(path)?.ok_or_else(|| anyhow!("{}: not an RGB image", path.display()))
}

fn write_rgb(img: &ppm::RgbImage, path: &Path) -> anyhow::Result<()> {
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        fs::write(path, ppm::encode(img))?;
    } else {
        image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
            .ok_or_else(|| anyhow!("image buffer does not match {}x{}", img.width, img.height))?
            .save(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn reconstruct(ckpt: &Path, image: &Path, output: &Path) -> anyhow::Result<()> {
    let vae = checkpoint::load(ckpt)?;
    let img = read_rgb(image)?;
    let size = vae.config().input_size;
    if img.width != size || img.height != size {
        bail!("{} is {}x{}; this model takes {size}x{size} images", image.display(), img.width, img.height);
    }
    let x = data::Tile::from_rgb("input", &img).tensor();
    let mut tape = Tape::new();
    let p = vae.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = vae.forward(&mut tape, &p, xv, Sampling::Mean)?;
    let recon = tape.value(out.recon);
    write_rgb(&data::tensor_to_rgb(recon.data(), size, size), output)?;
    println!("psnr_db {:.4}", metrics::psnr(&x, recon, DATA_RANGE)?);
    println!("ssim {:.6}", metrics::ssim(&x, recon, DATA_RANGE)?);
    Ok(())
}

#[derive(Serialize)]
struct BandStats {
    input_energy: f64,
    energy_fraction: [f64; 4],
    round_trip_max_error: f64,
}

/// Affine map of a band's range onto 0..=255, one image per band.
fn band_image(band: &Tensor<f32>) -> ppm::RgbImage {
    let [_, c, h, w] = [band.shape()[0], band.shape()[1], band.shape()[2], band.shape()[3]];
    let (lo, hi) = band.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plane = h * w;
    let mut pixels = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let v = band.data()[ch.min(c - 1) * plane + p];
            pixels.push(((v - lo) / span * 255.0).round() as u8);
        }
    }
    ppm::RgbImage { width: w, height: h, pixels }
}

fn dwt(image: &Path, out: &Path) -> anyhow::Result<()> {
    let img = read_rgb(image)?;
    let x = data::Tile::from_rgb("input", &img).tensor();
    let bands = dwt2(&x)?;
    create_dir(out)?;
    for (name, band) in ["ll", "lh", "hl", "hh"].iter().zip(bands.bands()) {
        write_rgb(&band_image(band), &out.join(format!("{name}.png")))?;
    }
    let input_energy = x.sum_sq();
    let energy_fraction = bands.bands().map(|b| if input_energy > 0.0 { b.sum_sq() / input_energy } else { 0.0 });
    let stats = BandStats { input_energy, energy_fraction, round_trip_max_error: idwt2(&bands)?.max_abs_diff(&x) };
    write_json(&out.join("stats.json"), &stats)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn print_report(r: &GradReport) {
    let status = if r.passed() { "ok" } else { "FAIL" };
    println!("{:<20} {:>10.3e}  {:>6} elems  {status}", r.label, r.worst_error(), r.checked());
}

fn run_gradcheck(opts: &CheckOptions) -> anyhow::Result<ExitCode> {
    let (mut op_failure, mut param_failure) = (None, None);
    for r in gradcheck::check_ops(opts)? {
        print_report(&r);
        if let (None, Some(bad)) = (&op_failure, r.first_failure()) {
            op_failure = Some(format!("{}:{}", r.label, bad.name));
        }
    }
    for arch in [Architecture::Baseline, Architecture::Expdwt] {
        let r = gradcheck::check_model(&gradcheck::check_config(), arch, 1, opts)?;
        print_report(&r);
        for (module, worst) in r.by_module() {
            println!("  {module:<18} {worst:>10.3e}");
        }
        if r.skipped_kinks() > 0 {
            println!("  skipped {} elements at |.| kinks", r.skipped_kinks());
        }
        if let (None, Some(bad)) = (&param_failure, r.first_failure()) {
            param_failure = Some(format!("{arch}:{}", bad.name));
        }
    }
    // A model parameter is the more useful pointer, so it wins over an op-level input.
    match param_failure.or(op_failure) {
        Some(name) => {
            eprintln!("gradient check failed at {name}");
            Ok(ExitCode::from(EXIT_VERIFY))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn synth(n: usize, size: usize, seed: u64, out: &Path, cache: bool) -> anyhow::Result<()> {
    if n == 0 || size < 16 || !size.is_multiple_of(2) {
        bail!("synthetic tiles need n > 0 and an even size >= 16");
    }
    let stream = rng::stream_seed(seed, rng::SYNTH);
    if cache {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        data::synth_tiles(n, size, stream).save_cache(out)?;
        println!("wrote {n} tiles to {}", out.display());
        return Ok(());
    }
    create_dir(out)?;
    for i in 0..n {
        write_rgb(&data::synth_rgb(i, size, stream), &out.join(format!("synth_{i:05}.png")))?;
    }
    println!("wrote {n} tiles to {}", out.display());
    Ok(())
}
