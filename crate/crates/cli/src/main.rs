//! `stargan` command-line tool.
//!
//! Settings come from one TOML run file; `--set key.path=value` flags are
//! applied on top of it in order, so a later flag wins over an earlier one
//! and every flag wins over the file. Relative output directories resolve
//! under `$STARGAN_OUTPUT_ROOT` when it is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stargan::arch::{parse_arch, NetworkSpec};
use stargan::config::RunConfig;
use stargan::data::annotated::to_rgb_image;
use stargan::eval::translate;
use stargan::label::LabelUniverse;
use stargan::pipeline::{self, TrainOptions};
use stargan::train::{Checkpoint, StepOutcome};

#[derive(Parser)]
#[command(name = "stargan", version, about = "Multi-domain image-to-image translation with one generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set train.n_critic=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(&self.config, &self.overrides)?;
        println!("config {} ({})", cfg.hash(), self.config.display());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render every dataset that has a synthetic recipe.
    MakeSynthetic {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train, writing checkpoints and a loss log into the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        print_every: u64,
    },
    /// Translate images to target domains.
    Translate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target expression, e.g. `red`, `black_hair+male`, `~border`.
        /// Repeat for several outputs per image.
        #[arg(long = "target", required = true)]
        targets: Vec<String>,
        /// Label of the inputs, used as the base for `~`/`!` tokens.
        #[arg(long)]
        from: Option<String>,
        /// Set the mask bit of this dataset instead of the target's own.
        #[arg(long)]
        mask: Option<String>,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Input images.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint on held-out data and write a report.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory (default: `<output_dir>/eval`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print per-layer shapes and parameter counts.
    CountParams {
        #[arg(long, short, conflicts_with = "arch", required_unless_present = "arch")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        /// Architecture file of `[name] input_channels=C` sections.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Input extent for shape inference with `--arch`.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Reference total to compare against.
        #[arg(long)]
        reference: Option<f64>,
        /// Also write the networks as an architecture file.
        #[arg(long)]
        emit_arch: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic { config } => make_synthetic(&config.load()?),
        Command::Train { config, resume, max_steps, print_every } => train(&config.load()?, resume, max_steps, print_every),
        Command::Translate { config, checkpoint, targets, from, mask, out, inputs } => {
            translate_cmd(&config.load()?, &checkpoint, &targets, from.as_deref(), mask.as_deref(), &out, &inputs)
        }
        Command::Evaluate { config, checkpoint, out } => evaluate(&config.load()?, &checkpoint, out),
        Command::CountParams { config, overrides, arch, size, reference, emit_arch } => {
            count_params(config, &overrides, arch, size, reference, emit_arch)
        }
    }
}

fn make_synthetic(cfg: &RunConfig) -> Result<()> {
    for (name, root, n) in pipeline::generate_synthetic(cfg)? {
        println!("{name}: {n} images -> {}", root.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig, resume: Option<PathBuf>, max_steps: Option<u64>, print_every: u64) -> Result<()> {
    let data = pipeline::load_data(cfg)?;
    for (d, (tr, te)) in cfg.datasets.iter().zip(data.train.iter().zip(&data.test)) {
        println!("{}: {} train, {} test", d.name, tr.len(), te.len());
    }
    let start = Instant::now();
    let mut progress = |o: &StepOutcome| {
        if print_every > 0 && o.step % print_every == 0 {
            let g = o.g.as_ref().map_or(String::new(), |g| {
                format!(" | G adv {:.4} cls {:.4} rec {:.4}", g.adv, g.cls, g.rec)
            });
            println!(
                "step {:>7} [{:>6.0}s] lr {:.2e} D adv {:.4} cls {:.4} gp {:.4}{g}",
                o.step,
                start.elapsed().as_secs_f64(),
                o.lr,
                o.d.adv,
                o.d.cls,
                o.d.gp
            );
        }
    };
    let opts = TrainOptions { resume, max_steps, progress: Some(&mut progress) };
    let summary = pipeline::train(cfg, &data, opts)?;
    println!(
        "trained {}/{} steps in {:.1}s; checkpoint {}; log {}",
        summary.steps,
        summary.total_steps,
        start.elapsed().as_secs_f64(),
        summary.checkpoint.display(),
        summary.log.display()
    );
    Ok(())
}

fn translate_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    targets: &[String],
    from: Option<&str>,
    mask: Option<&str>,
    out: &Path,
    inputs: &[PathBuf],
) -> Result<()> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let universe = &ckpt.universe;
    let generator = ckpt.generator()?;
    let base = from.map(|f| universe.resolve_target(f, None)).transpose()?;

    let mut labels = Vec::with_capacity(targets.len());
    for t in targets {
        let target = universe.resolve_target(t, base.as_ref())?;
        let values = match mask {
            None => target.values().to_vec(),
            Some(m) => {
                let j = dataset_index(universe, m)?;
                let mut bits = vec![0.0; universe.n()];
                bits[j] = 1.0;
                universe.encode_with_mask_override(target.slice(universe), target.origin(), &bits)?
            }
        };
        labels.push((target.origin(), values));
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for path in inputs {
        let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
        let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        for (t, (origin, values)) in targets.iter().zip(&labels) {
            let pre = cfg.preprocess(&cfg.datasets[*origin])?;
            let x = pre.apply(&img)?;
            let y = translate(&generator, &[x], std::slice::from_ref(values))?;
            let dest = out.join(format!("{stem}_{}.png", file_safe(t)));
            to_rgb_image(&y[0]).save(&dest).with_context(|| format!("writing {}", dest.display()))?;
            println!("{} -> {}", path.display(), dest.display());
        }
    }
    Ok(())
}

fn dataset_index(universe: &LabelUniverse, name: &str) -> Result<usize> {
    universe.dataset_index(name).with_context(|| {
        let names: Vec<&str> = universe.datasets().iter().map(|d| d.name()).collect();
        format!("unknown dataset `{name}`; valid datasets: {}", names.join(", "))
    })
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            c if c == '+' || c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' => c,
            '~' => 'T',
            '!' => 'N',
            _ => '_',
        })
        .collect()
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != cfg.hash() {
        bail!(
            "checkpoint {} was written by configuration {}, not {}",
            path.display(),
            ckpt.config_hash,
            cfg.hash()
        );
    }
    Ok(ckpt)
}

fn evaluate(cfg: &RunConfig, checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let data = pipeline::load_data(cfg)?;
    let out = out.unwrap_or_else(|| cfg.output_dir().join("eval"));
    let report = pipeline::evaluate(cfg, &data, &ckpt, &out)?;
    print!("{}", report.to_markdown());
    println!("\nreport written to {}", out.display());
    Ok(())
}

fn count_params(
    config: Option<PathBuf>,
    overrides: &[String],
    arch: Option<PathBuf>,
    size: usize,
    reference: Option<f64>,
    emit_arch: Option<PathBuf>,
) -> Result<()> {
    let (nets, (h, w), reference): (Vec<NetworkSpec>, _, _) = match (config, arch) {
        (Some(path), _) => {
            let cfg = ConfigArgs { config: path, overrides: overrides.to_vec() }.load()?;
            let nets = vec![cfg.generator_spec()?, cfg.discriminator_spec()?];
            let s = cfg.net.image_size;
            (nets, (s, s), reference.or(cfg.eval.reference_params))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let nets = parse_arch(&text).with_context(|| format!("parsing {}", path.display()))?;
            (nets, (size, size), reference)
        }
        (None, None) => bail!("pass --config or --arch"),
    };
    let mut total = 0;
    for net in &nets {
        let report = net.infer(h, w)?;
        println!("[{}] input {}x{}x{}", net.name, h, w, net.input_channels);
        println!("{report}\n");
        total += report.total_params;
    }
    println!("total parameters: {total}");
    if let Some(r) = reference {
        println!("reference {r}: {:.3}% off", (total as f64 - r).abs() / r * 100.0);
    }
    if let Some(dest) = emit_arch {
        let text: String = nets.iter().map(|n| n.to_arch() + "\n").collect();
        fs::write(&dest, text).with_context(|| format!("writing {}", dest.display()))?;
    }
    Ok(())
}
