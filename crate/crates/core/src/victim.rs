//! Procedural translation tasks, the victim model, and its budgeted oracle.
//!
//! Two paired tasks stand in for real corpora. `sharpen` restores crisp
//! textures from 2× block-averaged copies; `stylize` maps a scene through a
//! fixed tone curve with darkened edges. A scalar `shift ∈ [0,1]` moves the
//! sampling distribution away from the one the victim was trained on.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{block_mean, upsample_nearest};
use crate::error::{Error, Result};
use crate::gan::{BackboneKind, BackboneSpec, ModelBundle};
use crate::sam::SamConfig;
use crate::tensor::Tensor;
use crate::train::{train_gan, Control, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Super-resolution analogue.
    Sharpen,
    /// Style-transfer analogue.
    Stylize,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Sharpen => "sharpen",
            TaskKind::Stylize => "stylize",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharpen" => Ok(TaskKind::Sharpen),
            "stylize" => Ok(TaskKind::Stylize),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected sharpen or stylize)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub image_size: usize,
    pub channels: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            image_size: 32,
            channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("tasks need at least one channel".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Check that `x` is one image `[C,H,W]` or a batch `[B,C,H,W]` of this task.
    pub fn check_images(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let s = x.shape();
        let tail = &s[s.len().saturating_sub(3)..];
        if !(s.len() == 3 || s.len() == 4) || tail != self.image_shape() {
            return Err(Error::dim(
                op,
                format!("expected images of shape {:?}, got {s:?}", self.image_shape()),
            ));
        }
        Ok(())
    }

    /// The deterministic ground-truth translator T.
    ///
    /// `stylize` is a closed-form map. `sharpen` inverts a lossy resampling,
    /// so T is realised as "the crisp texture the source was made from" and
    /// is only known for generated samples (their `targets`).
    pub fn ground_truth(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x, "ground_truth")?;
        match self.kind {
            TaskKind::Stylize => stylize(x),
            TaskKind::Sharpen => Err(Error::Contract(
                "sharpen ground truth exists only for generated samples; use the dataset targets".into(),
            )),
        }
    }
}

/// Distribution parameters controlled by the shift knob.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub shift: f64,
    /// Grating frequency range in cycles per image.
    pub freq_lo: f64,
    pub freq_hi: f64,
    /// Probability that a shape comes from the novel (star) family.
    pub novel_prob: f64,
    /// Background level range.
    pub bg_lo: f64,
    pub bg_hi: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

impl DomainParams {
    /// `shift = 0` is the victim's domain; `shift = 1` raises grating
    /// frequencies from [2,4] to [3,6], always draws novel star shapes and
    /// darkens the background.
    pub fn from_shift(shift: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shift) {
            return Err(Error::Config(format!("shift {shift} must lie in [0, 1]")));
        }
        Ok(DomainParams {
            shift,
            freq_lo: lerp(2.0, 3.0, shift),
            freq_hi: lerp(4.0, 6.0, shift),
            novel_prob: shift,
            bg_lo: lerp(-0.3, -0.6, shift),
            bg_hi: lerp(0.3, 0.0, shift),
        })
    }
}

/// Which side of the experiment produced a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    /// Ground-truth pairs `(x, T(x))`.
    Generated,
    /// Attack pairs `(x, F_V(x))` collected from the oracle.
    Queried,
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetRole::Generated => "generated",
            DatasetRole::Queried => "queried",
        })
    }
}

impl FromStr for DatasetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generated" => Ok(DatasetRole::Generated),
            "queried" => Ok(DatasetRole::Queried),
            _ => Err(Error::Config(format!("unknown dataset role {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub domain: DomainParams,
    pub seed: u64,
    pub count: usize,
    pub role: DatasetRole,
}

/// Aligned inputs and optional targets, stacked as `[N,C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub inputs: Tensor,
    pub targets: Option<Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, inputs: Tensor, targets: Option<Tensor>) -> Result<Self> {
        manifest.task.check_images(&inputs, "dataset inputs")?;
        if inputs.ndim() != 4 || inputs.shape()[0] != manifest.count {
            return Err(Error::dim(
                "dataset",
                format!(
                    "manifest count {} but inputs have shape {:?}",
                    manifest.count,
                    inputs.shape()
                ),
            ));
        }
        if let Some(t) = &targets {
            inputs.expect_same_shape(t, "dataset targets")?;
        }
        Ok(Dataset {
            manifest,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn input(&self, i: usize) -> Tensor {
        self.inputs.index_first(i)
    }

    pub fn targets(&self) -> Result<&Tensor> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::Contract("dataset carries no targets".into()))
    }
}

/// Sinusoidal grating with random orientation, phase and amplitude.
fn add_grating(img: &mut [f64], size: usize, freq: f64, rng: &mut impl Rng) {
    let theta = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.25..0.5);
    let (c, s) = (theta.cos(), theta.sin());
    for i in 0..size {
        for j in 0..size {
            let u = (j as f64 * c + i as f64 * s) / size as f64;
            img[i * size + j] += amp * (2.0 * PI * freq * u + phase).sin();
        }
    }
}

/// Even-odd point-in-polygon test.
fn inside(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// A regular polygon (familiar family) or a five-point star (novel family), painted flat.
fn add_shape(img: &mut [f64], size: usize, novel: bool, rng: &mut impl Rng) {
    let n = size as f64;
    let cx = rng.random_range(0.2 * n..0.8 * n);
    let cy = rng.random_range(0.2 * n..0.8 * n);
    let r = rng.random_range(0.15 * n..0.3 * n);
    let rot = rng.random_range(0.0..2.0 * PI);
    let level = rng.random_range(0.4..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let poly: Vec<(f64, f64)> = if novel {
        (0..10)
            .map(|k| {
                let rr = if k % 2 == 0 { r } else { 0.4 * r };
                let a = rot + PI * k as f64 / 5.0;
                (cx + rr * a.cos(), cy + rr * a.sin())
            })
            .collect()
    } else {
        let sides = rng.random_range(3..=6);
        (0..sides)
            .map(|k| {
                let a = rot + 2.0 * PI * k as f64 / sides as f64;
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect()
    };
    for i in 0..size {
        for j in 0..size {
            if inside(j as f64 + 0.5, i as f64 + 0.5, &poly) {
                img[i * size + j] = level;
            }
        }
    }
}

/// One procedural scene `[C,H,W]` with values in [−1, 1].
fn scene(task: &TaskSpec, domain: &DomainParams, rng: &mut impl Rng) -> Tensor {
    let size = task.image_size;
    let bg = rng.random_range(domain.bg_lo..=domain.bg_hi);
    let freq = rng.random_range(domain.freq_lo..=domain.freq_hi);
    let shapes = rng.random_range(1..=2);
    let mut plane = vec![bg; size * size];
    add_grating(&mut plane, size, freq, rng);
    for _ in 0..shapes {
        let novel = rng.random_bool(domain.novel_prob);
        add_shape(&mut plane, size, novel, rng);
    }
    // Extra channels are tinted copies so colour tasks stay paired-consistent.
    let mut data = Vec::with_capacity(task.channels * size * size);
    for c in 0..task.channels {
        let gain = 1.0 - 0.15 * c as f64;
        data.extend(plane.iter().map(|v| (v * gain).clamp(-1.0, 1.0)));
    }
    Tensor::new(task.image_shape().to_vec(), data).expect("scene shape")
}

/// 2× block-mean downsample followed by nearest upsample.
pub fn degrade(image: &Tensor) -> Result<Tensor> {
    upsample_nearest(&block_mean(image, 2)?, 2)
}

const TONE_GAIN: f64 = 1.8;
const EDGE_WEIGHT: f64 = 0.6;

/// Stylize translator: S-shaped tone curve minus scaled Sobel edge magnitude.
fn stylize(x: &Tensor) -> Result<Tensor> {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let mut out = x.clone();
    let norm = TONE_GAIN.tanh();
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        let at =
            |i: isize, j: isize| src[(i.clamp(0, h as isize - 1) as usize) * w + j.clamp(0, w as isize - 1) as usize];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                    - at(i - 1, j - 1)
                    - 2.0 * at(i, j - 1)
                    - at(i + 1, j - 1);
                let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                    - at(i - 1, j - 1)
                    - 2.0 * at(i - 1, j)
                    - at(i - 1, j + 1);
                let edge = ((gx * gx + gy * gy).sqrt() / 8.0).min(1.0);
                let tone = (TONE_GAIN * at(i, j)).tanh() / norm;
                dst[(i as usize) * w + j as usize] = (tone - EDGE_WEIGHT * edge).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// `n` paired samples, deterministic in `(task, domain, n, seed)`.
pub fn gen_dataset(task: TaskSpec, domain: DomainParams, n: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(Error::SampleSize { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Tensor> = (0..n).map(|_| scene(&task, &domain, &mut rng)).collect();
    let scenes = Tensor::stack(&scenes)?;
    let (inputs, targets) = match task.kind {
        TaskKind::Sharpen => (degrade(&scenes)?, scenes),
        TaskKind::Stylize => {
            let t = stylize(&scenes)?;
            (scenes, t)
        }
    };
    Dataset::new(
        DatasetManifest {
            task,
            domain,
            seed,
            count: n,
            role: DatasetRole::Generated,
        },
        inputs,
        Some(targets),
    )
}

/// Victim training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the epoch-mean train L1 falls to this level.
    pub l1_threshold: f64,
    pub lambda_l1: f64,
    pub base_channels: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            lr: 2e-3,
            batch_size: 16,
            max_epochs: 40,
            l1_threshold: 0.08,
            lambda_l1: 100.0,
            base_channels: 8,
            depth: 2,
            seed: 0,
        }
    }
}

/// The lab's own handle on a trained victim. Never handed to the attacker.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedVictim {
    pub task: TaskSpec,
    pub bundle: ModelBundle,
    /// Epoch-mean train L1 curve.
    pub curve: Vec<f64>,
}

impl TrainedVictim {
    /// F_V on a batch, without touching any budget.
    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        self.task.check_images(x, "victim")?;
        self.bundle.translate(0, x)
    }

    /// Wrap the model in a budgeted black-box oracle.
    pub fn oracle(&self, budget: usize) -> VictimOracle {
        VictimOracle {
            task: self.task,
            model: Some(self.bundle.clone()),
            budget,
            used: AtomicUsize::new(0),
        }
    }
}

/// Pay-per-query black box around F_V.
///
/// The model is private: the only way to observe it is [`VictimOracle::query`].
#[derive(Debug)]
pub struct VictimOracle {
    task: TaskSpec,
    model: Option<ModelBundle>,
    budget: usize,
    used: AtomicUsize,
}

impl VictimOracle {
    /// An oracle whose victim has not been trained yet; every query fails.
    pub fn untrained(task: TaskSpec, budget: usize) -> Self {
        VictimOracle {
            task,
            model: None,
            budget,
            used: AtomicUsize::new(0),
        }
    }

    pub fn task(&self) -> TaskSpec {
        self.task
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used()
    }

    /// Atomically claim `n` queries, or none if that would exceed the budget.
    fn reserve(&self, n: usize) -> Result<()> {
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| {
                u.checked_add(n).filter(|&total| total <= self.budget)
            })
            .map(|_| ())
            .map_err(|used| Error::Budget {
                used,
                budget: self.budget,
            })
    }

    /// F_V(x) for one image `[C,H,W]` (charged 1) or a batch `[B,C,H,W]` (charged B).
    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Contract("the victim has not been trained; nothing to query".into()))?;
        self.task.check_images(x, "query")?;
        let batch = x.as_batch()?;
        self.reserve(batch.shape()[0])?;
        let out = model.translate(0, &batch)?;
        if x.ndim() == 3 {
            Ok(out.index_first(0))
        } else {
            Ok(out)
        }
    }
}

/// Train the victim Pix2Pix with plain Adam until the epoch-mean train L1
/// reaches the threshold.
pub fn train_victim(dataset: &Dataset, cfg: &VictimConfig) -> Result<TrainedVictim> {
    let task = dataset.manifest.task;
    if dataset.manifest.domain.shift != 0.0 {
        return Err(Error::Contract(format!(
            "victims train on the shift-0 domain, got shift {}",
            dataset.manifest.domain.shift
        )));
    }
    let targets = dataset.targets()?;
    let spec = BackboneSpec {
        kind: BackboneKind::Pix2Pix,
        base_channels: cfg.base_channels,
        depth: cfg.depth,
        image_channels: task.channels,
        image_size: task.image_size,
    };
    let mut bundle = ModelBundle::build(spec, cfg.seed)?;
    let tc = TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.max_epochs,
        lambda: cfg.lambda_l1,
        wavelet: None,
        sam: SamConfig::disabled(1, 1),
        shuffle_seed: cfg.seed ^ 0x5eed,
    };
    let per_epoch = tc.steps_per_epoch(dataset.len());
    let mut curve = Vec::new();
    let mut reached = false;
    let epoch_l1 = |log: &TrainLog| {
        let last = &log.steps[log.steps.len() - per_epoch..];
        last.iter().map(|s| s.components["g.l1"]).sum::<f64>() / (per_epoch as f64 * cfg.lambda_l1)
    };
    train_gan(&mut bundle, &dataset.inputs, targets, &tc, |epoch, log, _| {
        let l1 = epoch_l1(log);
        curve.push(l1);
        log::debug!("victim epoch {epoch}: train L1 {l1:.4}");
        reached = l1 <= cfg.l1_threshold;
        Ok(if reached { Control::Stop } else { Control::Continue })
    })?;
    if !reached {
        return Err(Error::VictimTraining {
            threshold: cfg.l1_threshold,
            steps: curve.len() * per_epoch,
            last: curve.last().copied().unwrap_or(f64::NAN),
            curve,
        });
    }
    Ok(TrainedVictim { task, bundle, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec {
            image_size: 16,
            ..TaskSpec::new(TaskKind::Sharpen)
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d = DomainParams::from_shift(0.3).unwrap();
        let a = gen_dataset(task(), d, 5, 9).unwrap();
        let b = gen_dataset(task(), d, 5, 9).unwrap();
        assert!(a.inputs.bit_eq(&b.inputs));
        assert!(a.targets().unwrap().bit_eq(b.targets().unwrap()));
        assert_eq!(a.manifest, b.manifest);
        let c = gen_dataset(task(), d, 5, 10).unwrap();
        assert!(!a.inputs.bit_eq(&c.inputs));
    }

    #[test]
    fn values_stay_in_range() {
        for kind in [TaskKind::Sharpen, TaskKind::Stylize] {
            let t = TaskSpec {
                channels: 3,
                ..TaskSpec::new(kind)
            };
            let ds = gen_dataset(t, DomainParams::from_shift(1.0).unwrap(), 8, 1).unwrap();
            for v in ds.inputs.data().iter().chain(ds.targets().unwrap().data()) {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn zero_shift_matches_victim_domain() {
        assert_eq!(
            DomainParams::from_shift(0.0).unwrap(),
            DomainParams::from_shift(0.0).unwrap()
        );
        let d = DomainParams::from_shift(1.0).unwrap();
        assert_eq!((d.freq_lo, d.freq_hi, d.novel_prob), (3.0, 6.0, 1.0));
        assert!(DomainParams::from_shift(1.2).is_err());
        assert!(DomainParams::from_shift(-0.1).is_err());
    }

    #[test]
    fn sharpen_source_is_degraded_target() {
        let ds = gen_dataset(task(), DomainParams::from_shift(0.5).unwrap(), 4, 2).unwrap();
        let t = ds.targets().unwrap();
        // Independent resampler: average each 2×2 block and write it back to all four pixels.
        let n = 16;
        for (img, src) in t.data().chunks(n * n).zip(ds.inputs.data().chunks(n * n)) {
            for i in 0..n {
                for j in 0..n {
                    let (bi, bj) = (i / 2 * 2, j / 2 * 2);
                    let m =
                        (img[bi * n + bj] + img[bi * n + bj + 1] + img[(bi + 1) * n + bj] + img[(bi + 1) * n + bj + 1])
                            / 4.0;
                    assert_eq!(src[i * n + j], m);
                }
            }
        }
    }

    #[test]
    fn stylize_truth_is_deterministic_and_paired() {
        let t = TaskSpec::new(TaskKind::Stylize);
        let ds = gen_dataset(t, DomainParams::from_shift(0.0).unwrap(), 3, 4).unwrap();
        let a = t.ground_truth(&ds.inputs).unwrap();
        assert!(a.bit_eq(ds.targets().unwrap()));
        assert!(a.bit_eq(&t.ground_truth(&ds.inputs).unwrap()));
        assert!(matches!(task().ground_truth(&ds.inputs), Err(Error::Dimension { .. })));
        let sharp = TaskSpec::new(TaskKind::Sharpen);
        assert!(matches!(sharp.ground_truth(&ds.inputs), Err(Error::Contract(_))));
    }

    fn tiny_victim() -> TrainedVictim {
        let spec = BackboneSpec {
            image_size: 16,
            ..BackboneSpec::new(BackboneKind::Pix2Pix)
        };
        TrainedVictim {
            task: task(),
            bundle: ModelBundle::build(spec, 1).unwrap(),
            curve: vec![],
        }
    }

    #[test]
    fn budget_boundary() {
        let v = tiny_victim();
        let oracle = v.oracle(3);
        let x = Tensor::zeros(&[1, 16, 16]);
        let first = oracle.query(&x).unwrap();
        assert!(first.bit_eq(&oracle.query(&x).unwrap()));
        oracle.query(&x).unwrap();
        assert_eq!(oracle.used(), 3);
        match oracle.query(&x) {
            Err(Error::Budget { used, budget }) => assert_eq!((used, budget), (3, 3)),
            other => panic!("expected budget error, got {other:?}"),
        }
        assert_eq!(oracle.used(), 3);
    }

    #[test]
    fn batch_queries_are_all_or_nothing() {
        let oracle = tiny_victim().oracle(5);
        oracle.query(&Tensor::zeros(&[3, 1, 16, 16])).unwrap();
        assert_eq!(oracle.used(), 3);
        assert!(oracle.query(&Tensor::zeros(&[3, 1, 16, 16])).is_err());
        assert_eq!(oracle.used(), 3);
        assert!(matches!(
            oracle.query(&Tensor::zeros(&[1, 8, 8])),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(oracle.used(), 3);
    }

    #[test]
    fn untrained_oracle_refuses() {
        let oracle = VictimOracle::untrained(task(), 10);
        assert!(matches!(
            oracle.query(&Tensor::zeros(&[1, 16, 16])),
            Err(Error::Contract(_))
        ));
        assert_eq!(oracle.used(), 0);
    }

    #[test]
    fn concurrent_queries_never_exceed_budget() {
        let oracle = tiny_victim().oracle(20);
        let x = Tensor::zeros(&[1, 16, 16]);
        let ok = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..10 {
                        if oracle.query(&x).is_ok() {
                            ok.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                });
            }
        });
        assert_eq!(oracle.used(), 20);
        assert_eq!(ok.load(Ordering::SeqCst), 20);
    }

    #[test]
    fn victim_rejects_shifted_data() {
        let ds = gen_dataset(task(), DomainParams::from_shift(0.5).unwrap(), 2, 1).unwrap();
        assert!(matches!(
            train_victim(&ds, &VictimConfig::default()),
            Err(Error::Contract(_))
        ));
    }
}
