use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vip_core::checkpoint::Checkpoint;
use vip_core::complexity::count_params_flops;
use vip_core::data::{generate_dataset, read_clip, write_dataset, write_ppm};
use vip_core::frequency::frequency_features;
use vip_core::model::Model;
use vip_core::perturb::Perturbation;
use vip_core::train::{evaluate, load_data, model_gradcheck, Trainer};
use vip_core::{CoreError, ExperimentConfig, ModelConfig, Result};
use vip_tensor::io::{save_tensor, DType};
use vip_tensor::suite::primitive_suite;
use vip_tensor::{GradCheckOptions, Tensor};

#[derive(Parser)]
#[command(name = "vipdet", version, about = "Video inpainting detection: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic inpainted clips and their authentic counterparts.
    GenData {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Geometry source; desk defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and write checkpoint.mpck, metrics.log and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally on perturbed clips.
    Eval(EvalArgs),
    /// Finite-difference checks of every primitive, or of the full model.
    Gradcheck {
        #[arg(long)]
        full_model: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic parameter and FLOP counts.
    Complexity {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// `desk` or `full`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Band decomposition and pooled pyramid of a clip's middle frame.
    FreqDump {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "snr")]
    jpeg: Option<u32>,
    #[arg(long)]
    snr: Option<f64>,
    /// Noise seed for `--snr`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::data(dir, e.to_string()))
}

fn gen_data(n: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let start = Instant::now();
    let d = generate_dataset(&cfg.model, n, seed)?;
    let generated = start.elapsed();
    write_dataset(out, &d)?;
    println!(
        "wrote {n} inpainted and {n} authentic clips to {} (generated in {:.3} s)",
        out.display(),
        generated.as_secs_f64()
    );
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&cfg)?;
    let mut t = match resume {
        Some(p) => Trainer::resume(&cfg, &data, Checkpoint::load(p)?)?,
        None => Trainer::new(&cfg, &data)?,
    };
    create_dir(out)?;
    let start = Instant::now();
    let result = t.run();
    let mut log = t.log.join("\n");
    log.push('\n');
    fs::write(out.join("metrics.log"), log)?;
    result?;
    t.checkpoint().save(&out.join("checkpoint.mpck"))?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    if let Some(last) = t.log.iter().rev().find(|l| l.starts_with("eval ")) {
        println!("{last}");
    }
    println!("trained to iteration {} in {:.1} s", t.iter, start.elapsed().as_secs_f64());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(q) = a.jpeg {
        cfg.perturb = Perturbation::Jpeg(q);
    }
    if let Some(db) = a.snr {
        cfg.perturb = Perturbation::Gaussian { snr_db: db, seed: a.seed };
    }
    cfg.validate()?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = Model::from_params(cfg.model.clone(), ckpt.params)?;
    let data = load_data(&cfg)?;
    let report = evaluate(&model, &data, cfg.perturb)?;
    print!("{}", report.to_text());
    Ok(())
}

fn gradcheck(full: bool, config: Option<&Path>, seed: u64) -> Result<bool> {
    if full {
        let mut cfg = load_config(config)?;
        cfg.train.seed = seed;
        // gradients below 1e-7 drown in rounding at 1e-6; steps near 1e-3 cross sampling kinks
        let opts = GradCheckOptions {
            eps: 1e-4,
            tol: 1e-3,
            max_coords: 100,
            seed,
        };
        let start = Instant::now();
        let r = model_gradcheck(&cfg, &opts)?;
        println!(
            "full model: {} parameters sampled, max rel err {:.3e} at {} ({:.1} s) {}",
            r.checked,
            r.max_rel_err,
            r.worst,
            start.elapsed().as_secs_f64(),
            if r.pass { "PASS" } else { "FAIL" }
        );
        return Ok(r.pass);
    }
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let mut ok = true;
    for (name, r) in primitive_suite(seed, &opts)? {
        println!("{name:<28} {:.3e} {}", r.max_rel_err, if r.pass { "PASS" } else { "FAIL" });
        ok &= r.pass;
    }
    Ok(ok)
}

fn complexity(config: Option<&Path>, preset: Option<&str>) -> Result<()> {
    let model = match preset {
        Some("desk") => ModelConfig::desk(),
        Some("full") => ModelConfig::full(),
        Some(other) => return Err(CoreError::config(format!("unknown preset {other:?}"))),
        None => load_config(config)?.model,
    };
    print!("{}", count_params_flops(&model)?.to_text());
    Ok(())
}

/// Shifts zero-centred bands by one half so they fit the image range.
fn band_image(base: &Tensor, band: usize, c: usize, offset: f64) -> Result<Tensor> {
    let [h, w, _] = *base.shape() else {
        unreachable!("frequency base is [H, W, 3C]")
    };
    let data = (0..h * w)
        .flat_map(|p| (0..3).map(move |k| (p, k)))
        .map(|(p, k)| base.data()[p * 3 * c + band * c + k.min(c - 1)] + offset)
        .collect();
    Ok(Tensor::new(&[h, w, 3], data)?)
}

fn freq_dump(clip: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    let sample = read_clip(clip)?;
    let [t, h, w, c] = *sample.clip.shape() else {
        unreachable!("clips are rank 4")
    };
    cfg.model.frames = t;
    cfg.model.height = h;
    cfg.model.width = w;
    cfg.model.channels = c;
    let f = frequency_features(&sample.clip, &cfg.model)?;
    create_dir(out)?;
    save_tensor(out.join("bands.mptn"), &f.base, DType::F64)?;
    for (s, p) in f.pyramid.iter().enumerate() {
        save_tensor(out.join(format!("pyramid_s{s}.mptn")), p, DType::F64)?;
    }
    for (band, name, offset) in [(0, "low", 0.0), (1, "mid", 0.5), (2, "high", 0.5)] {
        write_ppm(&out.join(format!("band_{name}.ppm")), &band_image(&f.base, band, c, offset)?)?;
    }
    println!("wrote bands and {} pyramid levels to {}", f.pyramid.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { n, seed, out, config } => gen_data(n, seed, &out, config.as_deref()).map(|_| true),
        Cmd::Train { config, out, resume } => train(&config, &out, resume.as_deref()).map(|_| true),
        Cmd::Eval(a) => eval(&a).map(|_| true),
        Cmd::Gradcheck { full_model, config, seed } => gradcheck(full_model, config.as_deref(), seed),
        Cmd::Complexity { config, preset } => complexity(config.as_deref(), preset.as_deref()).map(|_| true),
        Cmd::FreqDump { clip, out, config } => freq_dump(&clip, &out, config.as_deref()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
