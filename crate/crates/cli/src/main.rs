//! `mea`: command-line driver for the extraction lab.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mea_core::experiment::{
    derive_seed, evaluate_outputs, extract_arm, generator_landscape, query_all, run_experiment, write_arm,
    write_triptychs, ExperimentConfig, SeedData,
};
use mea_core::gan::BackboneKind;
use mea_core::io;
use mea_core::metrics::{fmt_num, psnr};
use mea_core::train::Arm;
use mea_core::victim::{gen_dataset, train_victim, DomainParams, TaskKind, TaskSpec, TrainedVictim, VictimConfig};
use mea_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mea",
    version,
    about = "Model extraction against toy image-to-image translation GANs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset directory.
    GenData(GenData),
    /// Train a victim on a shift-0 dataset and save its checkpoint.
    TrainVictim(TrainVictimArgs),
    /// Query a victim for every attacker input and train one arm.
    Extract(ExtractArgs),
    /// Full pipeline over arms × seeds, with the comparison table.
    Ablate(AblateArgs),
    /// Recompute metrics of an attack checkpoint on held-out inputs.
    Eval(EvalArgs),
    /// Export a 2-D loss slice around a generator.
    Landscape(LandscapeArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "sharpen")]
    task: TaskKind,
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVictimArgs {
    /// Shift-0 dataset with targets.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    l1_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Experiment settings; flags override `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML file whose keys mirror the experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    attack_samples: Option<usize>,
    #[arg(long)]
    backbone: Option<BackboneKind>,
    #[arg(long)]
    p: Option<usize>,
    /// SAM radius for every group.
    #[arg(long)]
    rho: Option<f64>,
    /// Discriminator radius, when it should differ from `--rho`.
    #[arg(long)]
    rho_d: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    ramp_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated arms: baseline, wavelet_only, sam_only, full.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<Arm>>,
    #[arg(long)]
    victim_samples: Option<usize>,
    #[arg(long)]
    test_samples: Option<usize>,
}

macro_rules! override_fields {
    ($cfg:ident, $args:ident; $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_toml(&io::read_text(path)?)?,
            None => ExperimentConfig::default(),
        };
        override_fields!(cfg, self; task, shift, budget, backbone, p, ramp_steps, lr, batch_size, epochs, seeds, arms,
            victim_samples, test_samples);
        if self.attack_samples.is_some() {
            cfg.attack_samples = self.attack_samples;
        }
        if self.rho.is_some() {
            cfg.rho_g = self.rho;
            cfg.rho_d = self.rho;
        }
        if self.rho_d.is_some() {
            cfg.rho_d = self.rho_d;
        }
        if self.alpha_max.is_some() {
            cfg.alpha_max = self.alpha_max;
        }
        if self.lambda.is_some() {
            cfg.lambda = self.lambda;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Victim checkpoint directory.
    #[arg(long)]
    victim: PathBuf,
    /// Attacker input dataset; only its inputs are used.
    #[arg(long)]
    data: PathBuf,
    /// Held-out evaluation set with targets; generated from the config when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    arm: Arm,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Attack checkpoint directory.
    #[arg(long)]
    attack: PathBuf,
    #[arg(long)]
    victim: PathBuf,
    /// Held-out dataset with ground-truth targets.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 0)]
    metric_seed: u64,
    #[arg(long, default_value_t = 10)]
    kid_subsets: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LandscapeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paired dataset (e.g. the queried attack data) defining the loss.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 11)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lambda: Option<f64>,
    /// Output blob; a CSV copy is written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::VictimTraining { .. } => 4,
        Error::Budget { .. } => 5,
        _ => 3,
    }
}

fn gen_data(a: &GenData) -> Result<()> {
    let task = TaskSpec {
        kind: a.task,
        image_size: a.image_size,
        channels: a.channels,
    };
    task.validate()?;
    let ds = gen_dataset(task, DomainParams::from_shift(a.shift)?, a.n, a.seed)?;
    io::save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_victim_cmd(a: &TrainVictimArgs) -> Result<()> {
    let ds = io::load_dataset(&a.data)?;
    let mut cfg = VictimConfig {
        seed: a.seed,
        ..VictimConfig::default()
    };
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(t) = a.l1_threshold {
        cfg.l1_threshold = t;
    }
    let victim = train_victim(&ds, &cfg)?;
    io::save_bundle(&victim.bundle, &a.out)?;
    let curve: Vec<String> = victim.curve.iter().map(|v| fmt_num(*v)).collect();
    io::write_text(
        &a.out.join("train_l1.csv"),
        &format!("epoch_l1\n{}\n", curve.join("\n")),
    )?;
    eprintln!(
        "victim reached train L1 {} after {} epochs",
        curve.last().unwrap(),
        curve.len()
    );
    Ok(())
}

fn load_victim(dir: &Path, task: TaskSpec) -> Result<TrainedVictim> {
    let bundle = io::load_bundle(dir)?;
    if bundle.spec.image_channels != task.channels || bundle.spec.image_size != task.image_size {
        return Err(Error::Config(format!(
            "victim checkpoint {} does not match the task images",
            dir.display()
        )));
    }
    Ok(TrainedVictim {
        task,
        bundle,
        curve: Vec::new(),
    })
}

fn warn_ignored(cfg: &ExperimentConfig, arm: Arm) {
    if !arm.uses_sam() && (cfg.rho_g.is_some() || cfg.rho_d.is_some()) {
        log::warn!("rho is ignored for arm {arm}, which trains with plain Adam");
    }
    if !arm.uses_wavelet() && cfg.alpha_max.is_some() {
        log::warn!("alpha_max is ignored for arm {arm}, which has no wavelet term");
    }
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    let attacker = io::load_dataset(&a.data)?;
    let task = attacker.manifest.task;
    cfg.task = task.kind;
    cfg.image_size = task.image_size;
    cfg.channels = task.channels;
    cfg.arms = vec![a.arm];
    let victim = load_victim(&a.victim, task)?;
    let oracle = victim.oracle(cfg.budget);
    // Queries first, so an oversized attacker set fails on the budget.
    let attack = query_all(&oracle, &attacker)?;
    cfg.attack_samples = Some(attacker.len());
    cfg.validate()?;
    warn_ignored(&cfg, a.arm);
    let seed = cfg.seeds[0];
    let test = match &a.test {
        Some(p) => io::load_dataset(p)?,
        None => gen_dataset(
            task,
            DomainParams::from_shift(cfg.test_shift)?,
            cfg.test_samples,
            derive_seed(seed, 4),
        )?,
    };
    let victim_test = victim.translate(&test.inputs)?;
    let victim_psnr = psnr(&victim_test, test.targets()?, 2.0)?;
    let data = SeedData {
        seed,
        victim,
        attack,
        test,
        victim_test,
        queries_used: oracle.used(),
        victim_psnr,
    };
    let result = extract_arm(&cfg, &data, a.arm)?;
    io::write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    io::save_dataset(&data.attack, &a.out.join("attack_data"))?;
    write_arm(&a.out, &result)?;
    write_triptychs(&a.out, &data, &result.bundle, cfg.triptychs)?;
    eprintln!("{} queries used of {}", oracle.used(), oracle.budget());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    for &arm in &cfg.arms {
        warn_ignored(&cfg, arm);
    }
    let (result, data) = run_experiment(&cfg, true)?;
    result.write_artifacts(&a.out, &data)?;
    print!("{}", result.ablation_table());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let test = io::load_dataset(&a.test)?;
    let attack = io::load_bundle(&a.attack)?;
    let victim = load_victim(&a.victim, test.manifest.task)?;
    let mut ctx = ExperimentConfig {
        channels: test.manifest.task.channels,
        metric_seed: a.metric_seed,
        kid_subsets: a.kid_subsets,
        ..ExperimentConfig::default()
    }
    .metric_context()?;
    ctx.kid_subsets = a.kid_subsets;
    let attack_out = attack.translate(0, &test.inputs)?;
    let victim_out = victim.translate(&test.inputs)?;
    let report = evaluate_outputs(&attack_out, &victim_out, test.targets()?, &ctx)?;
    io::write_text(&a.out.join("report.txt"), &report.to_kv())?;
    io::write_text(&a.out.join("metrics.csv"), &report.to_csv())?;
    print!("{}", report.to_kv());
    Ok(())
}

fn landscape(a: &LandscapeArgs) -> Result<()> {
    let bundle = io::load_bundle(&a.checkpoint)?;
    let ds = io::load_dataset(&a.data)?;
    let idx: Vec<usize> = (0..a.samples.min(ds.len())).collect();
    let x = ds.inputs.select_first(&idx);
    let y = ds.targets()?.select_first(&idx);
    let lambda = a.lambda.unwrap_or(match bundle.spec.kind {
        BackboneKind::Pix2Pix => 100.0,
        BackboneKind::CycleGan => 10.0,
    });
    let grid = generator_landscape(&bundle, &x, &y, lambda, a.grid, a.radius, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    io::write_tensor(&a.out, &grid)?;
    let mut csv = String::new();
    for row in grid.data().chunks(a.grid) {
        let cells: Vec<String> = row.iter().map(|v| fmt_num(*v)).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    io::write_text(&a.out.with_extension("csv"), &csv)?;
    println!("center={}", fmt_num(grid.data()[a.grid * a.grid / 2]));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainVictim(a) => train_victim_cmd(a),
        Command::Extract(a) => extract(a),
        Command::Ablate(a) => ablate(a),
        Command::Eval(a) => eval(a),
        Command::Landscape(a) => landscape(a),
    };
    eprintln!("wall time {:.1} s", start.elapsed().as_secs_f64());
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
