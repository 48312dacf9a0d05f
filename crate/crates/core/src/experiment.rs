//! The extraction experiment: victim training, budgeted querying, surrogate
//! training for each ablation arm, evaluation and artifact export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{BackboneKind, BackboneSpec, ModelBundle};
use crate::io;
use crate::metrics::{
    fmt_num, landscape_slice, psnr, r_capability, r_fidelity, DistanceMode, MetricContext, MetricRecord, MetricReport,
};
use crate::sam::{sharpness_probe, ClosureLoss, GroupObjective, GroupRef, GroupRole, RampSchedule, SamConfig};
use crate::tensor::Tensor;
use crate::train::{train_gan, Arm, AttackObjective, Control, TrainConfig, TrainLog};
use crate::victim::{
    gen_dataset, train_victim, Dataset, DatasetManifest, DatasetRole, DomainParams, TaskKind, TaskSpec, TrainedVictim,
    VictimConfig, VictimOracle,
};
use crate::wavelet::WaveletConfig;

/// All experiment hyperparameters. Optional fields fall back to per-task or
/// per-backbone defaults (see [`ExperimentConfig::rho_g`] and friends).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub image_size: usize,
    pub channels: usize,
    /// Attacker-domain displacement in [0, 1].
    pub shift: f64,
    pub budget: usize,
    /// Attacker inputs to query; `None` spends the whole budget.
    pub attack_samples: Option<usize>,
    pub backbone: BackboneKind,
    pub base_channels: usize,
    pub depth: usize,
    /// Wavelet levels of the regulariser.
    pub p: usize,
    pub rho_g: Option<f64>,
    pub rho_d: Option<f64>,
    pub alpha_max: Option<f64>,
    pub ramp_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub victim_samples: usize,
    pub victim_max_epochs: usize,
    pub victim_l1_threshold: f64,
    pub test_samples: usize,
    /// Domain of the held-out evaluation inputs.
    pub test_shift: f64,
    pub probe_rho: f64,
    pub probe_dirs: usize,
    pub probe_samples: usize,
    pub metric_seed: u64,
    pub kid_subsets: usize,
    pub triptychs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Sharpen,
            image_size: 32,
            channels: 1,
            shift: 1.0,
            budget: 2000,
            attack_samples: None,
            backbone: BackboneKind::Pix2Pix,
            base_channels: 8,
            depth: 2,
            p: 2,
            rho_g: None,
            rho_d: None,
            alpha_max: None,
            ramp_steps: 500,
            lr: 2e-3,
            batch_size: 16,
            epochs: 16,
            lambda: None,
            seeds: vec![1],
            arms: Arm::ALL.to_vec(),
            victim_samples: 1000,
            victim_max_epochs: 40,
            victim_l1_threshold: 0.08,
            test_samples: 200,
            test_shift: 0.0,
            probe_rho: 0.05,
            probe_dirs: 8,
            probe_samples: 64,
            metric_seed: 0,
            kid_subsets: 10,
            triptychs: 4,
        }
    }
}

fn unit_range(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} {v} must lie in [0, 1]")));
    }
    Ok(())
}

fn non_negative(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x >= 0.0 && x.is_finite()) => {
            Err(Error::Config(format!("{name} {x} must be finite and non-negative")))
        }
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("the config is always representable as TOML")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            image_size: self.image_size,
            channels: self.channels,
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            kind: self.backbone,
            base_channels: self.base_channels,
            depth: self.depth,
            image_channels: self.channels,
            image_size: self.image_size,
        }
    }

    /// Generator radius: 0.03 for sharpen, 0.05 for stylize unless set.
    pub fn rho_g(&self) -> f64 {
        self.rho_g.unwrap_or(match self.task {
            TaskKind::Sharpen => 0.03,
            TaskKind::Stylize => 0.05,
        })
    }

    pub fn rho_d(&self) -> f64 {
        self.rho_d.unwrap_or_else(|| self.rho_g())
    }

    /// Final wavelet weight: 0.25 for sharpen, 0.15 for stylize unless set.
    pub fn alpha_max(&self) -> f64 {
        self.alpha_max.unwrap_or(match self.task {
            TaskKind::Sharpen => 0.25,
            TaskKind::Stylize => 0.15,
        })
    }

    /// Backbone weight: L1 weight 100 for Pix2Pix, cycle weight 10 for CycleGAN.
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.backbone {
            BackboneKind::Pix2Pix => 100.0,
            BackboneKind::CycleGan => 10.0,
        })
    }

    pub fn attack_samples(&self) -> usize {
        self.attack_samples.unwrap_or(self.budget)
    }

    pub fn victim_config(&self, seed: u64) -> VictimConfig {
        VictimConfig {
            max_epochs: self.victim_max_epochs,
            l1_threshold: self.victim_l1_threshold,
            seed,
            ..VictimConfig::default()
        }
    }

    /// Training settings of one arm. The SAM radii and wavelet weight only
    /// take effect in the arms that use them.
    pub fn train_config(&self, arm: Arm, shuffle_seed: u64) -> TrainConfig {
        let spec = self.backbone_spec();
        let (n_g, n_d) = (spec.generator_names().len(), spec.discriminator_names().len());
        let sam = if arm.uses_sam() {
            SamConfig {
                rho_g: vec![self.rho_g(); n_g],
                rho_d: vec![self.rho_d(); n_d],
                enabled: true,
            }
        } else {
            SamConfig::disabled(n_g, n_d)
        };
        let wavelet = arm.uses_wavelet().then(|| {
            (
                WaveletConfig { levels: self.p },
                RampSchedule {
                    alpha_max: self.alpha_max(),
                    ramp_steps: self.ramp_steps,
                },
            )
        });
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda: self.lambda(),
            wavelet,
            sam,
            shuffle_seed,
        }
    }

    /// Check every field before any compute.
    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.backbone_spec().validate()?;
        unit_range("shift", self.shift)?;
        unit_range("test_shift", self.test_shift)?;
        let n = self.attack_samples();
        if n == 0 {
            return Err(Error::Config("attack_samples must be at least 1".into()));
        }
        if n > self.budget {
            return Err(Error::Config(format!(
                "attack_samples {n} exceeds the query budget {}",
                self.budget
            )));
        }
        WaveletConfig::new(self.p)?.check(self.image_size, self.image_size)?;
        non_negative("rho_g", self.rho_g)?;
        non_negative("rho_d", self.rho_d)?;
        non_negative("alpha_max", self.alpha_max)?;
        non_negative("lambda", self.lambda)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::Config("at least one seed and one arm are required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut arms = self.arms.clone();
        arms.sort_unstable();
        arms.dedup();
        if seeds.len() != self.seeds.len() || arms.len() != self.arms.len() {
            return Err(Error::Config("seeds and arms must not repeat".into()));
        }
        if self.victim_samples == 0 || !(self.victim_l1_threshold > 0.0) {
            return Err(Error::Config(
                "victim_samples and victim_l1_threshold must be positive".into(),
            ));
        }
        // The Fréchet distance needs more samples than feature dimensions.
        if self.test_samples < EMBED_DIM + 1 {
            return Err(Error::Config(format!(
                "test_samples must be at least {}",
                EMBED_DIM + 1
            )));
        }
        if !(self.probe_rho > 0.0) || self.probe_dirs == 0 || self.probe_samples == 0 {
            return Err(Error::Config(
                "probe_rho, probe_dirs and probe_samples must be positive".into(),
            ));
        }
        if self.kid_subsets == 0 {
            return Err(Error::Config("kid_subsets must be at least 1".into()));
        }
        if self.triptychs > self.test_samples {
            return Err(Error::Config("triptychs cannot exceed test_samples".into()));
        }
        Ok(())
    }

    pub fn metric_context(&self) -> Result<MetricContext> {
        let mut ctx = MetricContext::new(self.channels, self.metric_seed)?;
        ctx.kid_subsets = self.kid_subsets;
        Ok(ctx)
    }
}

const EMBED_DIM: usize = 16;

/// Independent seeds for the sub-streams of one experiment seed (splitmix64).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const VICTIM_DATA: u64 = 1;
    pub const VICTIM_INIT: u64 = 2;
    pub const ATTACK_DATA: u64 = 3;
    pub const TEST_DATA: u64 = 4;
    pub const ATTACK_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const PROBE: u64 = 7;
}

/// Query every input once, in batches, building the attack dataset D_A.
pub fn query_all(oracle: &VictimOracle, attacker: &Dataset) -> Result<Dataset> {
    let n = attacker.len();
    let mut outs = Vec::new();
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        outs.push(oracle.query(&attacker.inputs.select_first(&idx))?);
    }
    let mut data = Vec::with_capacity(attacker.inputs.numel());
    for o in outs {
        data.extend_from_slice(o.data());
    }
    let targets = Tensor::new(attacker.inputs.shape().to_vec(), data)?;
    Dataset::new(
        DatasetManifest {
            role: DatasetRole::Queried,
            ..attacker.manifest.clone()
        },
        attacker.inputs.clone(),
        Some(targets),
    )
}

/// Everything shared by the arms of one seed.
pub struct SeedData {
    pub seed: u64,
    pub victim: TrainedVictim,
    pub attack: Dataset,
    pub test: Dataset,
    /// F_V on the test inputs (lab-side, not charged to the budget).
    pub victim_test: Tensor,
    pub queries_used: usize,
    pub victim_psnr: f64,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let task = cfg.task_spec();
    let home = DomainParams::from_shift(0.0)?;
    let victim_data = gen_dataset(task, home, cfg.victim_samples, derive_seed(seed, stream::VICTIM_DATA))?;
    let victim = train_victim(&victim_data, &cfg.victim_config(derive_seed(seed, stream::VICTIM_INIT)))?;
    let attacker = gen_dataset(
        task,
        DomainParams::from_shift(cfg.shift)?,
        cfg.attack_samples(),
        derive_seed(seed, stream::ATTACK_DATA),
    )?;
    let oracle = victim.oracle(cfg.budget);
    let attack = query_all(&oracle, &attacker)?;
    let test = gen_dataset(
        task,
        DomainParams::from_shift(cfg.test_shift)?,
        cfg.test_samples,
        derive_seed(seed, stream::TEST_DATA),
    )?;
    let victim_test = victim.translate(&test.inputs)?;
    let victim_psnr = psnr(&victim_test, test.targets()?, 2.0)?;
    log::info!(
        "seed {seed}: victim trained in {} epochs, test PSNR {victim_psnr:.2} dB; {} queries used",
        victim.curve.len(),
        oracle.used()
    );
    Ok(SeedData {
        seed,
        victim,
        attack,
        test,
        victim_test,
        queries_used: oracle.used(),
        victim_psnr,
    })
}

/// Loss over the generator parameters used by the sharpness probe and the
/// landscape: the generator's backbone objective (no wavelet term) against
/// the bundle's own discriminators, on a fixed batch.
pub struct GeneratorLoss<'a> {
    pub bundle: ModelBundle,
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub lambda: f64,
}

impl GeneratorLoss<'_> {
    pub fn params(&self) -> Vec<Tensor> {
        self.bundle.generators[0].tensors()
    }

    pub fn value_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        self.bundle.generators[0].set_tensors(params)?;
        let mut objective = AttackObjective {
            x: self.x,
            y: self.y,
            lambda: self.lambda,
            wavelet: None,
            alpha: 0.0,
        };
        let eval = objective.evaluate(
            &self.bundle,
            GroupRef {
                role: GroupRole::Generator,
                index: 0,
            },
        )?;
        Ok((eval.loss, eval.grads))
    }
}

pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub bundle: ModelBundle,
    pub log: TrainLog,
    pub report: MetricReport,
}

impl ArmResult {
    pub fn metric(&self, name: &str) -> f64 {
        self.report.value(name).unwrap_or(f64::NAN)
    }
}

fn scalar(metric: &str, value: f64, samples: usize, seed: Option<u64>) -> MetricRecord {
    MetricRecord {
        metric: metric.into(),
        value,
        std: None,
        samples,
        seed,
    }
}

/// Fidelity against F_V and capability against T on held-out inputs.
pub fn evaluate_outputs(
    attack_out: &Tensor,
    victim_out: &Tensor,
    truth: &Tensor,
    ctx: &MetricContext,
) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    for mode in [
        DistanceMode::L1,
        DistanceMode::Psnr,
        DistanceMode::Frechet,
        DistanceMode::Kernel,
    ] {
        r.extend(r_fidelity(attack_out, victim_out, mode, ctx)?);
    }
    for mode in [DistanceMode::L1ToOracle, DistanceMode::Frechet, DistanceMode::Kernel] {
        r.extend(r_capability(attack_out, truth, mode, ctx)?);
    }
    r.push(scalar(
        "capability.PSNR",
        psnr(attack_out, truth, ctx.psnr_peak)?,
        truth.shape()[0],
        None,
    ));
    Ok(r)
}

fn probe_batch(attack: &Dataset, n: usize) -> Result<(Tensor, Tensor)> {
    let idx: Vec<usize> = (0..n.min(attack.len())).collect();
    Ok((attack.inputs.select_first(&idx), attack.targets()?.select_first(&idx)))
}

/// Train one arm on the seed's shared data and evaluate it.
pub fn extract_arm(cfg: &ExperimentConfig, data: &SeedData, arm: Arm) -> Result<ArmResult> {
    let seed = data.seed;
    let tc = cfg.train_config(arm, derive_seed(seed, stream::SHUFFLE));
    let mut bundle = ModelBundle::build(cfg.backbone_spec(), derive_seed(seed, stream::ATTACK_INIT))?;
    let log = train_gan(
        &mut bundle,
        &data.attack.inputs,
        data.attack.targets()?,
        &tc,
        |epoch, log, _| {
            log::debug!("seed {seed} arm {arm} epoch {epoch}: step {}", log.steps.len());
            Ok(Control::Continue)
        },
    )
    .map_err(|e| e.with_context(&format!("arm {arm}, seed {seed}")))?;

    let ctx = cfg.metric_context()?;
    let attack_out = bundle.translate(0, &data.test.inputs)?;
    let mut report = evaluate_outputs(&attack_out, &data.victim_test, data.test.targets()?, &ctx)?;

    let (px, py) = probe_batch(&data.attack, cfg.probe_samples)?;
    let mut gl = GeneratorLoss {
        bundle: bundle.clone(),
        x: &px,
        y: &py,
        lambda: cfg.lambda(),
    };
    let params = gl.params();
    let (probe_loss, _) = gl.value_and_grad(&params)?;
    let probe_seed = derive_seed(seed, stream::PROBE);
    let sharp = sharpness_probe(
        &params,
        &mut ClosureLoss(|p: &[Tensor]| gl.value_and_grad(p)),
        cfg.probe_rho,
        cfg.probe_dirs,
        probe_seed,
    )?;
    report.push(scalar("sharpness", sharp, px.shape()[0], Some(probe_seed)));
    report.push(scalar("final.generator_loss", probe_loss, px.shape()[0], None));
    report.push(scalar("queries", data.queries_used as f64, data.queries_used, None));
    report.push(scalar("train.steps", log.steps.len() as f64, data.attack.len(), None));
    log::info!(
        "seed {seed} arm {arm}: fidelity L1 {:.4}, sharpness {sharp:.4}",
        report.value("fidelity.L1").unwrap_or(f64::NAN)
    );
    Ok(ArmResult {
        arm,
        seed,
        bundle,
        log,
        report,
    })
}

/// Loss grid around the first generator of `bundle` on the given batch.
pub fn generator_landscape(
    bundle: &ModelBundle,
    x: &Tensor,
    y: &Tensor,
    lambda: f64,
    grid: usize,
    radius: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut gl = GeneratorLoss {
        bundle: bundle.clone(),
        x,
        y,
        lambda,
    };
    let params = gl.params();
    landscape_slice(
        &params,
        &mut |p: &[Tensor]| Ok(gl.value_and_grad(p)?.0),
        grid,
        radius,
        seed,
    )
}

pub struct SeedResult {
    pub seed: u64,
    pub victim_psnr: f64,
    pub queries_used: usize,
    pub arms: Vec<ArmResult>,
}

pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
}

/// Columns of the ablation table: (metric key, header).
pub const TABLE_COLUMNS: [(&str, &str); 8] = [
    ("capability.tFID", "cap_tFID"),
    ("capability.L1", "cap_L1"),
    ("fidelity.tFID", "fid_tFID"),
    ("fidelity.tKIDx100", "fid_tKIDx100"),
    ("fidelity.L1", "fid_L1"),
    ("fidelity.PSNR", "fid_PSNR"),
    ("sharpness", "sharpness"),
    ("queries", "queries"),
];

fn mark(on: bool) -> &'static str {
    if on {
        "√"
    } else {
        "×"
    }
}

impl ExperimentResult {
    pub fn arm_results(&self, arm: Arm) -> Vec<&ArmResult> {
        self.seeds
            .iter()
            .flat_map(|s| s.arms.iter().filter(|a| a.arm == arm))
            .collect()
    }

    /// Mean of `metric` for `arm` over seeds.
    pub fn mean(&self, arm: Arm, metric: &str) -> f64 {
        let v: Vec<f64> = self.arm_results(arm).iter().map(|a| a.metric(metric)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// One row per (seed, arm) with every metric.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        for a in self.seeds.iter().flat_map(|s| &s.arms) {
            for r in &a.report.records {
                if !keys.contains(&r.metric) {
                    keys.push(r.metric.clone());
                }
            }
        }
        let mut out = String::from("seed,arm,wavelet,sam");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for a in self.seeds.iter().flat_map(|s| &s.arms) {
            let _ = write!(
                out,
                "{},{},{},{}",
                a.seed,
                a.arm,
                a.arm.uses_wavelet(),
                a.arm.uses_sam()
            );
            for k in &keys {
                out.push(',');
                if let Some(v) = a.report.value(k) {
                    out.push_str(&fmt_num(v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Seed-averaged comparison table with ×/√ markers for the wavelet term and SAM.
    pub fn ablation_table(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.seed.to_string()).collect();
        let mut out = format!(
            "# task={} backbone={} shift={} budget={} epochs={} seeds={}\n",
            self.config.task,
            self.config.backbone,
            fmt_num(self.config.shift),
            self.config.budget,
            self.config.epochs,
            seeds.join(",")
        );
        let _ = write!(out, "{:<6} {:<4} {:<13}", "L_w^p", "SAM", "arm");
        for (_, h) in TABLE_COLUMNS {
            let _ = write!(out, " {h:>12}");
        }
        out.push('\n');
        for &arm in &self.config.arms {
            let _ = write!(
                out,
                "{:<6} {:<4} {:<13}",
                mark(arm.uses_wavelet()),
                mark(arm.uses_sam()),
                arm.name()
            );
            for (k, _) in TABLE_COLUMNS {
                let _ = write!(out, " {:>12.5}", self.mean(arm, k));
            }
            out.push('\n');
        }
        out
    }

    /// Write every artifact under `dir`. Contents depend only on (config, seeds).
    pub fn write_artifacts(&self, dir: &Path, seed_data: &BTreeMap<u64, SeedData>) -> Result<()> {
        io::write_text(&dir.join("config.toml"), &self.config.to_toml())?;
        io::write_text(&dir.join("ablation.txt"), &self.ablation_table())?;
        io::write_text(&dir.join("results.csv"), &self.to_csv())?;
        for s in &self.seeds {
            let sd = dir.join(format!("seed{}", s.seed));
            if let Some(data) = seed_data.get(&s.seed) {
                write_seed_data(&sd, data)?;
            }
            for a in &s.arms {
                let ad = sd.join(a.arm.name());
                write_arm(&ad, a)?;
                if let Some(data) = seed_data.get(&s.seed) {
                    write_triptychs(&ad, data, &a.bundle, self.config.triptychs)?;
                }
            }
        }
        Ok(())
    }
}

pub fn write_seed_data(dir: &Path, data: &SeedData) -> Result<()> {
    io::save_bundle(&data.victim.bundle, &dir.join("victim"))?;
    io::save_dataset(&data.attack, &dir.join("attack_data"))?;
    io::save_dataset(&data.test, &dir.join("test_data"))?;
    let mut kv = io::KeyValues::default();
    kv.push("seed", data.seed);
    kv.push("victim.test_psnr", fmt_num(data.victim_psnr));
    kv.push("victim.epochs", data.victim.curve.len());
    let curve: Vec<String> = data.victim.curve.iter().map(|v| fmt_num(*v)).collect();
    kv.push("victim.train_l1_curve", curve.join(","));
    kv.push("queries", data.queries_used);
    kv.write(&dir.join("seed.txt"))
}

pub fn write_arm(dir: &Path, a: &ArmResult) -> Result<()> {
    io::save_bundle(&a.bundle, &dir.join("checkpoint"))?;
    io::write_text(&dir.join("loss.csv"), &a.log.to_csv())?;
    io::write_text(&dir.join("report.txt"), &a.report.to_kv())?;
    io::write_text(&dir.join("metrics.csv"), &a.report.to_csv())
}

/// `(input, victim output, attack output)` strips for the first `n` test samples.
pub fn write_triptychs(dir: &Path, data: &SeedData, attack: &ModelBundle, n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    let idx: Vec<usize> = (0..n).collect();
    let x = data.test.inputs.select_first(&idx);
    let v = data.victim_test.select_first(&idx);
    let a = attack.translate(0, &x)?;
    let ext = if data.test.manifest.task.channels == 1 {
        "pgm"
    } else {
        "ppm"
    };
    for i in 0..n {
        io::write_pnm(
            &dir.join(format!("triptych{i}.{ext}")),
            &[x.index_first(i), v.index_first(i), a.index_first(i)],
        )?;
    }
    Ok(())
}

/// Run every seed and arm. Seed data is kept for artifact export when `keep_data`.
pub fn run_experiment(cfg: &ExperimentConfig, keep_data: bool) -> Result<(ExperimentResult, BTreeMap<u64, SeedData>)> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut kept = BTreeMap::new();
    for &seed in &cfg.seeds {
        let data = prepare_seed(cfg, seed)?;
        let arms = cfg
            .arms
            .iter()
            .map(|&arm| extract_arm(cfg, &data, arm))
            .collect::<Result<Vec<_>>>()?;
        seeds.push(SeedResult {
            seed,
            victim_psnr: data.victim_psnr,
            queries_used: data.queries_used,
            arms,
        });
        if keep_data {
            kept.insert(seed, data);
        }
    }
    Ok((
        ExperimentResult {
            config: cfg.clone(),
            seeds,
        },
        kept,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            budget: 40,
            epochs: 1,
            batch_size: 8,
            victim_samples: 64,
            victim_max_epochs: 60,
            victim_l1_threshold: 0.5,
            test_samples: 20,
            probe_samples: 8,
            probe_dirs: 2,
            kid_subsets: 2,
            triptychs: 1,
            ramp_steps: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_task() {
        let c = ExperimentConfig::default();
        assert_eq!((c.batch_size, c.p, c.budget), (16, 2, 2000));
        assert_eq!((c.rho_g(), c.alpha_max()), (0.03, 0.25));
        let s = ExperimentConfig {
            task: TaskKind::Stylize,
            ..c
        };
        assert_eq!((s.rho_g(), s.rho_d(), s.alpha_max()), (0.05, 0.05, 0.15));
        assert_eq!(s.lambda(), 100.0);
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let bad = [
            ExperimentConfig { shift: 1.2, ..tiny() },
            ExperimentConfig {
                attack_samples: Some(41),
                ..tiny()
            },
            ExperimentConfig { arms: vec![], ..tiny() },
            ExperimentConfig {
                seeds: vec![1, 1],
                ..tiny()
            },
            ExperimentConfig { p: 5, ..tiny() },
            ExperimentConfig {
                rho_g: Some(-0.1),
                ..tiny()
            },
            ExperimentConfig {
                test_samples: 10,
                ..tiny()
            },
        ];
        for c in bad {
            assert!(
                matches!(c.validate(), Err(Error::Config(_)) | Err(Error::Dimension { .. })),
                "{c:?}"
            );
        }
        tiny().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig {
            rho_g: Some(0.1),
            arms: vec![Arm::Baseline, Arm::Full],
            ..tiny()
        };
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("task = \"stylize\"\narms = [\"sam_only\"]\n").unwrap();
        assert_eq!(partial.arms, vec![Arm::SamOnly]);
        assert_eq!(partial.budget, 2000);
        assert!(ExperimentConfig::from_toml("rhoo = 1\n").is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (1..=7).map(|k| derive_seed(1, k)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), s.len());
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
    }

    #[test]
    fn degenerate_full_arm_matches_baseline() {
        let cfg = ExperimentConfig {
            rho_g: Some(0.0),
            rho_d: Some(0.0),
            alpha_max: Some(0.0),
            ..tiny()
        };
        let data = prepare_seed(&cfg, 3).unwrap();
        assert_eq!(data.queries_used, 40);
        let base = extract_arm(&cfg, &data, Arm::Baseline).unwrap();
        let full = extract_arm(&cfg, &data, Arm::Full).unwrap();
        assert!(base.bundle.bit_eq(&full.bundle));
        let landscape = generator_landscape(
            &base.bundle,
            &data.attack.inputs.select_first(&(0..8).collect::<Vec<_>>()),
            &data.attack.targets().unwrap().select_first(&(0..8).collect::<Vec<_>>()),
            cfg.lambda(),
            3,
            0.5,
            1,
        )
        .unwrap();
        let centre = landscape.data()[4];
        assert!((centre - base.metric("final.generator_loss")).abs() < 1e-9);
    }
}
