//! Evaluation metrics: PSNR, toy-feature Fréchet and kernel distances, the
//! capability and fidelity ratings, and loss-landscape slices.
//!
//! Distributional metrics run on a seeded random convolutional embedder, not
//! on Inception features, and are labelled `tFID` / `tKID` wherever they are
//! reported.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::conv2d_forward;
use crate::error::{Error, Result};
use crate::linalg::{clamp_psd, sqrt_psd, symmetric_eigen, SquareMatrix};
use crate::tensor::{pairwise_sum, Tensor};

/// Negative eigenvalues within this (relative) tolerance are treated as round-off.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// `10·log10(max_val² / MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("psnr peak value {max_val} must be positive")));
    }
    let sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Mean absolute difference of two aligned tensors.
pub fn mean_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mean_l1")?;
    let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    Ok(pairwise_sum(&d) / d.len() as f64)
}

/// Frozen random feature extractor: two 3×3 stride-2 conv + ReLU stages and
/// a global average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbedder {
    pub seed: u64,
    pub dim: usize,
    pub in_channels: usize,
    stages: [(Tensor, Tensor); 2],
}

const HIDDEN: usize = 8;

impl FeatureEmbedder {
    pub fn new(in_channels: usize, dim: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || dim == 0 {
            return Err(Error::Config(
                "embedder needs positive channel and feature counts".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stage = |out: usize, inp: usize| {
            let std = (2.0 / (inp * 9) as f64).sqrt();
            (
                Tensor::randn(&[out, inp, 3, 3], 0.0, std, &mut rng),
                Tensor::zeros(&[out]),
            )
        };
        let stages = [stage(HIDDEN, in_channels), stage(dim, HIDDEN)];
        Ok(FeatureEmbedder {
            seed,
            dim,
            in_channels,
            stages,
        })
    }

    /// Features `[N, dim]` for images `[N,C,H,W]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.as_batch()?;
        if x.shape()[1] != self.in_channels {
            return Err(Error::dim(
                "embed",
                format!("embedder expects {} channels, got {:?}", self.in_channels, x.shape()),
            ));
        }
        let mut h = x;
        for (k, b) in &self.stages {
            h = conv2d_forward(&h, k, b, 2, 1)?.map(|v| v.max(0.0));
        }
        let (n, hw) = (h.shape()[0], h.shape()[2] * h.shape()[3]);
        let feats: Vec<f64> = h
            .data()
            .chunks(hw)
            .map(|plane| pairwise_sum(plane) / hw as f64)
            .collect();
        Tensor::new(vec![n, self.dim], feats)
    }
}

fn check_features(f: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if f.ndim() != 2 {
        return Err(Error::dim(op, format!("features must be [N, d], got {:?}", f.shape())));
    }
    Ok((f.shape()[0], f.shape()[1]))
}

fn mean_and_covariance(f: &Tensor) -> (Vec<f64>, SquareMatrix) {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let rows: Vec<&[f64]> = f.data().chunks(d).collect();
    let mu: Vec<f64> = (0..d)
        .map(|j| pairwise_sum(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()) / n as f64)
        .collect();
    let mut cov = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            let prods: Vec<f64> = rows.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).collect();
            let c = pairwise_sum(&prods) / (n - 1) as f64;
            cov.set(i, j, c);
            cov.set(j, i, c);
        }
    }
    (mu, cov)
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)` with unbiased covariances.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, d) = check_features(a, "frechet_distance")?;
    let (nb, db) = check_features(b, "frechet_distance")?;
    if d != db {
        return Err(Error::dim(
            "frechet_distance",
            format!("feature dims {d} and {db} differ"),
        ));
    }
    let need = d + 1;
    if na.min(nb) < need {
        return Err(Error::SampleSize {
            needed: need,
            got: na.min(nb),
        });
    }
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(&cov_a, PSD_TOLERANCE)?;
    let inner = root_a.matmul(&cov_b).matmul(&root_a);
    let eig = symmetric_eigen(&inner);
    let cross: f64 = clamp_psd(&eig.values, PSD_TOLERANCE)?.iter().map(|v| v.sqrt()).sum();
    let fd = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    let scale = mean_term + cov_a.trace() + cov_b.trace();
    if fd < -PSD_TOLERANCE * scale.max(1.0) {
        return Err(Error::Contract(format!(
            "Fréchet distance {fd:e} is negative beyond round-off"
        )));
    }
    Ok(fd.max(0.0))
}

/// Mean and standard deviation of the unbiased MMD² over random subsets (raw, not ×100).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelDistance {
    pub mean: f64,
    pub std: f64,
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² of one pair of equally sized subsets.
fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&[f64]]| {
        let mut vals = Vec::with_capacity(s.len() * s.len());
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if i != j {
                    vals.push(poly_kernel(a, b));
                }
            }
        }
        pairwise_sum(&vals) / (m * (m - 1.0))
    };
    let mut cross = Vec::with_capacity(x.len() * y.len());
    for a in x {
        for b in y {
            cross.push(poly_kernel(a, b));
        }
    }
    within(x) + within(y) - 2.0 * pairwise_sum(&cross) / (m * m)
}

/// KID-style distance with kernel `(xᵀy/d + 1)³`, averaged over `n_subsets` random subsets.
pub fn kernel_distance(
    a: &Tensor,
    b: &Tensor,
    n_subsets: usize,
    subset_size: usize,
    seed: u64,
) -> Result<KernelDistance> {
    let (na, d) = check_features(a, "kernel_distance")?;
    let (nb, db) = check_features(b, "kernel_distance")?;
    if d != db {
        return Err(Error::dim(
            "kernel_distance",
            format!("feature dims {d} and {db} differ"),
        ));
    }
    if subset_size < 2 || subset_size > na.min(nb) {
        return Err(Error::SampleSize {
            needed: subset_size.max(2),
            got: na.min(nb),
        });
    }
    if n_subsets == 0 {
        return Err(Error::Config("kernel distance needs at least one subset".into()));
    }
    let rows_a: Vec<&[f64]> = a.data().chunks(d).collect();
    let rows_b: Vec<&[f64]> = b.data().chunks(d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let estimates: Vec<f64> = (0..n_subsets)
        .map(|_| {
            let x: Vec<&[f64]> = sample(&mut rng, na, subset_size).iter().map(|i| rows_a[i]).collect();
            let y: Vec<&[f64]> = sample(&mut rng, nb, subset_size).iter().map(|i| rows_b[i]).collect();
            mmd2_unbiased(&x, &y)
        })
        .collect();
    let mean = pairwise_sum(&estimates) / n_subsets as f64;
    let std = if n_subsets > 1 {
        let dev: Vec<f64> = estimates.iter().map(|e| (e - mean).powi(2)).collect();
        (pairwise_sum(&dev) / (n_subsets - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(KernelDistance { mean, std })
}

/// The distance `d` of the capability and fidelity ratings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    L1,
    Psnr,
    Frechet,
    Kernel,
    L1ToOracle,
}

impl DistanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::L1 => "l1",
            DistanceMode::Psnr => "psnr",
            DistanceMode::Frechet => "frechet",
            DistanceMode::Kernel => "kernel",
            DistanceMode::L1ToOracle => "l1_to_oracle",
        }
    }

    /// Label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            DistanceMode::L1 | DistanceMode::L1ToOracle => "L1",
            DistanceMode::Psnr => "PSNR",
            DistanceMode::Frechet => "tFID",
            DistanceMode::Kernel => "tKIDx100",
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            DistanceMode::L1,
            DistanceMode::Psnr,
            DistanceMode::Frechet,
            DistanceMode::Kernel,
            DistanceMode::L1ToOracle,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown distance mode {s:?}")))
    }
}

/// Shared settings of the distributional metrics.
#[derive(Clone, Debug)]
pub struct MetricContext {
    pub embedder: FeatureEmbedder,
    pub kid_subsets: usize,
    /// `None` uses `min(100, n)`.
    pub kid_subset_size: Option<usize>,
    pub kid_seed: u64,
    pub psnr_peak: f64,
}

impl MetricContext {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        Ok(MetricContext {
            embedder: FeatureEmbedder::new(channels, 16, seed)?,
            kid_subsets: 10,
            kid_subset_size: None,
            kid_seed: seed,
            psnr_peak: 2.0,
        })
    }
}

/// One reported number.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// e.g. `fidelity.tFID`.
    pub metric: String,
    pub value: f64,
    /// Dispersion where the metric has one (KID subsets).
    pub std: Option<f64>,
    pub samples: usize,
    pub seed: Option<u64>,
}

/// A set of metric records with key=value and CSV renderings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

/// Shortest round-trip decimal representation.
pub fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

impl MetricReport {
    pub fn push(&mut self, r: MetricRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.records.extend(other.records);
    }

    pub fn get(&self, metric: &str) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.metric == metric)
    }

    pub fn value(&self, metric: &str) -> Option<f64> {
        self.get(metric).map(|r| r.value)
    }

    /// One `key=value` line per record field.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{}={}\n", r.metric, fmt_num(r.value)));
            if let Some(s) = r.std {
                out.push_str(&format!("{}.std={}\n", r.metric, fmt_num(s)));
            }
            out.push_str(&format!("{}.samples={}\n", r.metric, r.samples));
            if let Some(s) = r.seed {
                out.push_str(&format!("{}.seed={s}\n", r.metric));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,std,samples,seed\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.metric,
                fmt_num(r.value),
                r.std.map(fmt_num).unwrap_or_default(),
                r.samples,
                r.seed.map(|s| s.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

fn distributional(
    prefix: &str,
    mode: DistanceMode,
    a: &Tensor,
    b: &Tensor,
    ctx: &MetricContext,
) -> Result<MetricRecord> {
    let fa = ctx.embedder.embed(a)?;
    let fb = ctx.embedder.embed(b)?;
    let samples = fa.shape()[0].min(fb.shape()[0]);
    let metric = format!("{prefix}.{}", mode.label());
    match mode {
        DistanceMode::Frechet => Ok(MetricRecord {
            metric,
            value: frechet_distance(&fa, &fb)?,
            std: None,
            samples,
            seed: Some(ctx.embedder.seed),
        }),
        DistanceMode::Kernel => {
            let size = ctx.kid_subset_size.unwrap_or(samples.min(100));
            let k = kernel_distance(&fa, &fb, ctx.kid_subsets, size, ctx.kid_seed)?;
            Ok(MetricRecord {
                metric,
                value: 100.0 * k.mean,
                std: Some(100.0 * k.std),
                samples,
                seed: Some(ctx.kid_seed),
            })
        }
        _ => unreachable!("pairwise modes are handled by the caller"),
    }
}

fn non_empty(t: &Tensor) -> Result<()> {
    if t.ndim() != 4 || t.shape()[0] == 0 {
        return Err(Error::SampleSize {
            needed: 1,
            got: if t.ndim() == 4 { t.shape()[0] } else { 0 },
        });
    }
    Ok(())
}

/// Distance from attack outputs to the target domain.
///
/// `targets` are target-domain samples; for `l1_to_oracle` they must be the
/// ground truth `T(x)` aligned with the attack outputs.
pub fn r_capability(
    attack: &Tensor,
    targets: &Tensor,
    mode: DistanceMode,
    ctx: &MetricContext,
) -> Result<MetricReport> {
    non_empty(attack)?;
    non_empty(targets)?;
    let record = match mode {
        DistanceMode::Frechet | DistanceMode::Kernel => distributional("capability", mode, attack, targets, ctx)?,
        DistanceMode::L1ToOracle => MetricRecord {
            metric: "capability.L1".into(),
            value: mean_l1(attack, targets)?,
            std: None,
            samples: attack.shape()[0],
            seed: None,
        },
        _ => return Err(Error::Config(format!("mode {mode} is not a capability distance"))),
    };
    Ok(MetricReport { records: vec![record] })
}

/// Distance between attack and victim outputs on the same inputs.
pub fn r_fidelity(attack: &Tensor, victim: &Tensor, mode: DistanceMode, ctx: &MetricContext) -> Result<MetricReport> {
    non_empty(attack)?;
    attack.expect_same_shape(victim, "r_fidelity")?;
    let n = attack.shape()[0];
    let record = match mode {
        DistanceMode::L1 => MetricRecord {
            metric: "fidelity.L1".into(),
            value: mean_l1(attack, victim)?,
            std: None,
            samples: n,
            seed: None,
        },
        DistanceMode::Psnr => MetricRecord {
            metric: "fidelity.PSNR".into(),
            value: psnr(attack, victim, ctx.psnr_peak)?,
            std: None,
            samples: n,
            seed: None,
        },
        DistanceMode::Frechet | DistanceMode::Kernel => distributional("fidelity", mode, attack, victim, ctx)?,
        DistanceMode::L1ToOracle => return Err(Error::Config("l1_to_oracle is a capability distance".into())),
    };
    Ok(MetricReport { records: vec![record] })
}

/// Random direction scaled filter-by-filter to the norms of `params`.
///
/// A filter is a slice along axis 0 of a tensor with two or more axes; vectors
/// and scalars are normalised as a whole.
pub fn filter_normalized_direction(params: &[Tensor], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            let mut d = Tensor::randn(p.shape(), 0.0, 1.0, rng);
            let filters = if p.ndim() >= 2 { p.shape()[0] } else { 1 };
            let len = p.numel() / filters;
            for (dv, pv) in d.data_mut().chunks_mut(len).zip(p.data().chunks(len)) {
                let dn = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let pn = pv.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = if dn > 0.0 { pn / dn } else { 0.0 };
                dv.iter_mut().for_each(|v| *v *= s);
            }
            d
        })
        .collect()
}

/// `grid[i, j] = L(w + a_i·u + b_j·v)` with `a, b = linspace(−radius, radius, grid)`.
///
/// `params` is never modified, so the caller's weights are unchanged afterwards.
pub fn landscape_slice(
    params: &[Tensor],
    loss: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    grid: usize,
    radius: f64,
    seed: u64,
) -> Result<Tensor> {
    if grid.is_multiple_of(2) || grid == 0 {
        return Err(Error::Config(format!(
            "landscape grid {grid} must be odd so the centre is the current point"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("landscape radius {radius} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = filter_normalized_direction(params, &mut rng);
    let v = filter_normalized_direction(params, &mut rng);
    let half = (grid / 2) as f64;
    let coord = |i: usize| radius * (i as f64 - half) / half.max(1.0);
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let (a, b) = (coord(i), coord(j));
            let point: Vec<Tensor> = params
                .iter()
                .zip(u.iter().zip(&v))
                .map(|(p, (du, dv))| {
                    let mut q = p.clone();
                    if a != 0.0 {
                        q.axpy(a, du)?;
                    }
                    if b != 0.0 {
                        q.axpy(b, dv)?;
                    }
                    Ok(q)
                })
                .collect::<Result<_>>()?;
            out.push(loss(&point)?);
        }
    }
    Tensor::new(vec![grid, grid], out)
}
