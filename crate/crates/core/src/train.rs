//! Mini-batch GAN training shared by the victim and the surrogate arms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gan::{attack_total_loss, cyclegan_loss, pix2pix_loss, BackboneKind, LossBundle, LossScope, ModelBundle};
use crate::sam::{
    alpha_at, sam_gan_train_step, GroupEval, GroupObjective, GroupRef, GroupRole, OptimStates, RampSchedule, SamConfig,
    TrainStepReport,
};
use crate::tensor::Tensor;
use crate::wavelet::{wavelet_reg_loss, WaveletConfig};

/// The four ablation arms: wavelet term on/off × SAM on/off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    WaveletOnly,
    SamOnly,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::WaveletOnly, Arm::SamOnly, Arm::Full];

    pub fn uses_wavelet(self) -> bool {
        matches!(self, Arm::WaveletOnly | Arm::Full)
    }

    pub fn uses_sam(self) -> bool {
        matches!(self, Arm::SamOnly | Arm::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::WaveletOnly => "wavelet_only",
            Arm::SamOnly => "sam_only",
            Arm::Full => "full",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown arm {s:?} (expected baseline, wavelet_only, sam_only or full)"
            ))
        })
    }
}

/// Everything a training run needs besides the model and the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// λ of the backbone: L1 weight for Pix2Pix, cycle weight for CycleGAN.
    pub lambda: f64,
    /// Wavelet term and its weight schedule; `None` trains on the backbone loss alone.
    pub wavelet: Option<(WaveletConfig, RampSchedule)>,
    pub sam: SamConfig,
    /// Seeds the per-epoch shuffle.
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if let Some((_, ramp)) = &self.wavelet {
            if !(ramp.alpha_max >= 0.0) {
                return Err(Error::Config(format!(
                    "alpha_max {} must be non-negative",
                    ramp.alpha_max
                )));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Backbone loss (plus the scheduled wavelet term) on one fixed batch.
pub struct AttackObjective<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub lambda: f64,
    pub wavelet: Option<WaveletConfig>,
    pub alpha: f64,
}

impl AttackObjective<'_> {
    /// Builds the loss on `tape` for the given scope.
    pub fn build(&self, tape: &mut Tape, bundle: &ModelBundle, scope: LossScope) -> Result<LossBundle> {
        let lb = match bundle.spec.kind {
            BackboneKind::Pix2Pix => pix2pix_loss(tape, bundle, self.x, self.y, self.lambda, scope)?,
            BackboneKind::CycleGan => cyclegan_loss(tape, bundle, self.x, self.y, self.lambda, scope)?,
        };
        match self.wavelet {
            Some(cfg) if self.alpha > 0.0 && scope != LossScope::Discriminators => {
                let out = lb.translation.expect("backbones always record their translation");
                let w = wavelet_reg_loss(tape, out, self.y, cfg)?;
                attack_total_loss(tape, lb, w, self.alpha)
            }
            _ => Ok(lb),
        }
    }

    /// Value of the objective minimised by `group`, without gradients.
    pub fn group_loss(&self, bundle: &ModelBundle, group: &str) -> Result<f64> {
        let scope = if bundle.spec.discriminator_names().contains(&group) {
            LossScope::Discriminators
        } else {
            LossScope::Generators
        };
        let mut tape = Tape::new();
        let lb = self.build(&mut tape, bundle, scope)?;
        let node = lb
            .per_group
            .get(group)
            .ok_or_else(|| Error::Config(format!("no group {group:?} in this backbone")))?;
        Ok(tape.value(*node).item())
    }
}

impl GroupObjective for AttackObjective<'_> {
    fn evaluate(&mut self, bundle: &ModelBundle, group: GroupRef) -> Result<GroupEval> {
        let (scope, target) = match group.role {
            GroupRole::Generator => (LossScope::Generators, &bundle.generators[group.index]),
            GroupRole::Discriminator => (LossScope::Discriminators, &bundle.discriminators[group.index]),
        };
        let mut tape = Tape::new();
        let lb = self.build(&mut tape, bundle, scope)?;
        let loss = lb.per_group[&target.name];
        let value = tape.value(loss).item();
        let components = lb.components(&tape);
        if !value.is_finite() {
            return Ok(GroupEval {
                loss: value,
                grads: target.tensors(),
                components,
            });
        }
        let grads = tape.backward(loss)?.for_group(&lb.vars[&target.name], target);
        Ok(GroupEval {
            loss: value,
            grads,
            components,
        })
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStepReport>,
    pub alphas: Vec<f64>,
}

impl TrainLog {
    /// Loss of `group` at every step.
    pub fn curve(&self, group: &str) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.group_losses.get(group).copied().unwrap_or(f64::NAN))
            .collect()
    }

    /// Mean of component `key` over each epoch of `steps_per_epoch` steps.
    pub fn epoch_means(&self, key: &str, steps_per_epoch: usize) -> Vec<f64> {
        self.steps
            .chunks(steps_per_epoch.max(1))
            .map(|c| {
                c.iter()
                    .map(|s| s.components.get(key).copied().unwrap_or(f64::NAN))
                    .sum::<f64>()
                    / c.len() as f64
            })
            .collect()
    }

    /// CSV with one row per step: step, alpha, then every group loss and component.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<String> = Vec::new();
        for s in &self.steps {
            for k in s
                .group_losses
                .keys()
                .map(|k| format!("loss.{k}"))
                .chain(s.components.keys().cloned())
            {
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        let mut out = String::from("step,alpha");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for (s, a) in self.steps.iter().zip(&self.alphas) {
            out.push_str(&format!("{},{a:e}", s.step));
            for k in &keys {
                let v = match k.strip_prefix("loss.") {
                    Some(g) => s.group_losses.get(g),
                    None => s.components.get(k),
                };
                match v {
                    Some(v) => out.push_str(&format!(",{v:e}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Whether to keep going after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Train `bundle` on paired batches `(inputs[i], targets[i])` stacked as `[N,C,H,W]`.
///
/// `on_epoch(epoch, log)` runs after every epoch and may stop training early.
pub fn train_gan(
    bundle: &mut ModelBundle,
    inputs: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &TrainLog, &ModelBundle) -> Result<Control>,
) -> Result<TrainLog> {
    cfg.validate()?;
    inputs.expect_same_shape(targets, "train_gan")?;
    if inputs.ndim() != 4 {
        return Err(Error::dim(
            "train_gan",
            format!("expected [N,C,H,W] data, got {:?}", inputs.shape()),
        ));
    }
    let n = inputs.shape()[0];
    let mut states = OptimStates::new(bundle, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select_first(chunk);
            let y = targets.select_first(chunk);
            let alpha = cfg.wavelet.as_ref().map_or(0.0, |(_, r)| alpha_at(r, step));
            let mut objective = AttackObjective {
                x: &x,
                y: &y,
                lambda: cfg.lambda,
                wavelet: cfg.wavelet.as_ref().map(|(w, _)| *w),
                alpha,
            };
            let report = sam_gan_train_step(bundle, &mut objective, &cfg.sam, &mut states, step)?;
            log.steps.push(report);
            log.alphas.push(alpha);
            step += 1;
        }
        if on_epoch(epoch, &log, bundle)? == Control::Stop {
            break;
        }
    }
    Ok(log)
}

/// Mean of a component across a log, ignoring steps that lack it.
pub fn mean_component(log: &TrainLog, key: &str) -> f64 {
    let vals: Vec<f64> = log
        .steps
        .iter()
        .filter_map(|s| s.components.get(key).copied())
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// Group losses of the last step, for reports.
pub fn final_losses(log: &TrainLog) -> BTreeMap<String, f64> {
    log.steps.last().map(|s| s.group_losses.clone()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::BackboneSpec;

    fn small_spec(kind: BackboneKind) -> BackboneSpec {
        BackboneSpec {
            image_size: 8,
            base_channels: 4,
            ..BackboneSpec::new(kind)
        }
    }

    fn data(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::rand_uniform(&[n, 1, 8, 8], -1.0, 1.0, &mut rng);
        let y = x.map(|v| -0.5 * v);
        (x, y)
    }

    fn cfg(sam: SamConfig, wavelet: bool) -> TrainConfig {
        TrainConfig {
            lr: 2e-3,
            batch_size: 4,
            epochs: 2,
            lambda: 100.0,
            wavelet: wavelet.then(|| {
                (
                    WaveletConfig::new(2).unwrap(),
                    RampSchedule {
                        alpha_max: 0.15,
                        ramp_steps: 3,
                    },
                )
            }),
            sam,
            shuffle_seed: 5,
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("sam".parse::<Arm>().is_err());
        assert!(Arm::Full.uses_sam() && Arm::Full.uses_wavelet());
        assert!(!Arm::Baseline.uses_sam() && !Arm::Baseline.uses_wavelet());
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let (x, y) = data(10, 1);
        let run = || {
            let mut b = ModelBundle::build(small_spec(BackboneKind::Pix2Pix), 3).unwrap();
            let log = train_gan(&mut b, &x, &y, &cfg(SamConfig::uniform(1, 1, 0.05), true), |_, _, _| {
                Ok(Control::Continue)
            })
            .unwrap();
            (b, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(la, lb);
        assert_eq!(la.steps.len(), 6);
        assert!(la.steps.iter().all(|s| s.group_losses.values().all(|v| v.is_finite())));
        assert_eq!(la.alphas[0], 0.0);
        assert_eq!(la.alphas[5], 0.15);
        assert!(la.steps[1].components.contains_key("g.wavelet"));
        assert!(!la.steps[0].components.contains_key("g.wavelet"));
    }

    #[test]
    fn full_arm_degenerates_to_baseline() {
        let (x, y) = data(9, 2);
        let spec = small_spec(BackboneKind::Pix2Pix);
        let mut base = ModelBundle::build(spec, 4).unwrap();
        let mut full = base.clone();
        train_gan(&mut base, &x, &y, &cfg(SamConfig::disabled(1, 1), false), |_, _, _| {
            Ok(Control::Continue)
        })
        .unwrap();
        let mut c = cfg(SamConfig::uniform(1, 1, 0.0), true);
        c.wavelet.as_mut().unwrap().1.alpha_max = 0.0;
        train_gan(&mut full, &x, &y, &c, |_, _, _| Ok(Control::Continue)).unwrap();
        assert!(base.bit_eq(&full));
    }

    #[test]
    fn cyclegan_trains_every_group() {
        let (x, y) = data(4, 3);
        let mut b = ModelBundle::build(small_spec(BackboneKind::CycleGan), 1).unwrap();
        let before = b.clone();
        let mut c = cfg(SamConfig::uniform(2, 2, 0.05), true);
        c.lambda = 10.0;
        c.epochs = 1;
        let log = train_gan(&mut b, &x, &y, &c, |_, _, _| Ok(Control::Continue)).unwrap();
        for (g0, g1) in before.groups().zip(b.groups()) {
            assert!(!g0.bit_eq(g1), "group {} did not move", g0.name);
        }
        assert_eq!(log.steps[0].loss_evals.len(), 4);
        assert!(log.steps[0].loss_evals.values().all(|&n| n == 2));
    }

    #[test]
    fn early_stop_and_csv() {
        let (x, y) = data(8, 4);
        let mut b = ModelBundle::build(small_spec(BackboneKind::Pix2Pix), 1).unwrap();
        let mut c = cfg(SamConfig::disabled(1, 1), false);
        c.epochs = 10;
        let log = train_gan(&mut b, &x, &y, &c, |e, _, _| {
            Ok(if e == 1 { Control::Stop } else { Control::Continue })
        })
        .unwrap();
        assert_eq!(log.steps.len(), 4);
        let csv = log.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("step,alpha,loss.D,loss.G,"));
        assert_eq!(log.epoch_means("g.l1", 2).len(), 2);
    }
}
