//! Adam and sharpness-aware (SAM) GAN training steps.
//!
//! A SAM step for one parameter group evaluates the group's objective twice:
//! once at `w` to get the ascent direction `ε = ρ·g/‖g‖₂`, and once at `w + ε`.
//! The second gradient drives an ordinary Adam update applied to the
//! unperturbed `w`. Generators are stepped first (all from the same pre-step
//! weights), then discriminators against the updated generators.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::ModelBundle;
use crate::tensor::Tensor;

/// Below this gradient norm the SAM perturbation is defined as zero.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Per-group Adam moments with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[Tensor], lr: f64) -> Self {
        AdamState {
            m: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [Tensor], grads: &[Tensor], direction: Direction) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let sign = match direction {
        Direction::Descent => -1.0,
        Direction::Ascent => 1.0,
    };
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w += sign * state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Global L2 norm over all tensors of a group.
pub fn global_norm(tensors: &[Tensor]) -> f64 {
    tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// `ε = ρ·g/‖g‖₂` over the whole group; zero when `‖g‖₂ < 1e-12`.
pub fn sam_epsilon(grads: &[Tensor], rho: f64) -> Result<Vec<Tensor>> {
    if !(rho >= 0.0) {
        return Err(Error::Config(format!("SAM radius {rho} must be non-negative")));
    }
    let norm = global_norm(grads);
    if norm < MIN_GRAD_NORM {
        return Ok(grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
    }
    let scale = rho / norm;
    Ok(grads.iter().map(|g| g.map(|v| v * scale)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    /// Radius per generator.
    pub rho_g: Vec<f64>,
    /// Radius per discriminator.
    pub rho_d: Vec<f64>,
    pub enabled: bool,
}

impl SamConfig {
    pub fn uniform(n_gen: usize, n_disc: usize, rho: f64) -> Self {
        SamConfig {
            rho_g: vec![rho; n_gen],
            rho_d: vec![rho; n_disc],
            enabled: true,
        }
    }

    pub fn disabled(n_gen: usize, n_disc: usize) -> Self {
        SamConfig {
            enabled: false,
            ..Self::uniform(n_gen, n_disc, 0.0)
        }
    }

    fn check(&self, bundle: &ModelBundle) -> Result<()> {
        if self.rho_g.len() != bundle.generators.len() || self.rho_d.len() != bundle.discriminators.len() {
            return Err(Error::Config(format!(
                "SAM radii ({} + {}) do not match the bundle's {} generators and {} discriminators",
                self.rho_g.len(),
                self.rho_d.len(),
                bundle.generators.len(),
                bundle.discriminators.len()
            )));
        }
        if self.rho_g.iter().chain(&self.rho_d).any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("SAM radii must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear ramp of the wavelet weight from 0 to `alpha_max` over `ramp_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub alpha_max: f64,
    pub ramp_steps: usize,
}

pub fn alpha_at(schedule: &RampSchedule, t: usize) -> f64 {
    if t >= schedule.ramp_steps {
        return schedule.alpha_max;
    }
    schedule.alpha_max * t as f64 / schedule.ramp_steps as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupRef {
    pub role: GroupRole,
    pub index: usize,
}

/// Result of evaluating one group's objective.
#[derive(Clone, Debug)]
pub struct GroupEval {
    pub loss: f64,
    /// Gradient with respect to the evaluated group, aligned with its params.
    pub grads: Vec<Tensor>,
    /// Named loss terms for logging.
    pub components: BTreeMap<String, f64>,
}

/// The training loss: evaluates, at the bundle's current parameters, the
/// objective that `group` minimises and its gradient with respect to that group.
pub trait GroupObjective {
    fn evaluate(&mut self, bundle: &ModelBundle, group: GroupRef) -> Result<GroupEval>;
}

impl<F> GroupObjective for F
where
    F: FnMut(&ModelBundle, GroupRef) -> Result<GroupEval>,
{
    fn evaluate(&mut self, bundle: &ModelBundle, group: GroupRef) -> Result<GroupEval> {
        self(bundle, group)
    }
}

/// Adam state for every group of a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimStates {
    pub generators: Vec<AdamState>,
    pub discriminators: Vec<AdamState>,
}

impl OptimStates {
    pub fn new(bundle: &ModelBundle, lr: f64) -> Self {
        OptimStates {
            generators: bundle
                .generators
                .iter()
                .map(|g| AdamState::new(&g.tensors(), lr))
                .collect(),
            discriminators: bundle
                .discriminators
                .iter()
                .map(|g| AdamState::new(&g.tensors(), lr))
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in self.generators.iter_mut().chain(self.discriminators.iter_mut()) {
            s.lr = lr;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStepReport {
    pub step: usize,
    /// Loss of each group's objective at the unperturbed weights.
    pub group_losses: BTreeMap<String, f64>,
    /// Loss evaluations performed per group during this step.
    pub loss_evals: BTreeMap<String, usize>,
    /// ‖ε‖₂ applied per group (0 for plain Adam).
    pub eps_norms: BTreeMap<String, f64>,
    /// Components logged by the first generator and discriminator evaluations.
    pub components: BTreeMap<String, f64>,
}

fn group_of(bundle: &ModelBundle, g: GroupRef) -> &crate::autodiff::ParamGroup {
    match g.role {
        GroupRole::Generator => &bundle.generators[g.index],
        GroupRole::Discriminator => &bundle.discriminators[g.index],
    }
}

fn group_of_mut(bundle: &mut ModelBundle, g: GroupRef) -> &mut crate::autodiff::ParamGroup {
    match g.role {
        GroupRole::Generator => &mut bundle.generators[g.index],
        GroupRole::Discriminator => &mut bundle.discriminators[g.index],
    }
}

struct GroupUpdate {
    params: Vec<Tensor>,
    state: AdamState,
}

/// Evaluate, optionally perturb and re-evaluate, and compute the updated
/// parameters of one group without committing them.
fn sam_group_update(
    bundle: &mut ModelBundle,
    objective: &mut dyn GroupObjective,
    gref: GroupRef,
    rho: Option<f64>,
    state: &AdamState,
    step: usize,
    report: &mut TrainStepReport,
) -> Result<GroupUpdate> {
    let name = group_of(bundle, gref).name.clone();
    let diverged = || Error::Divergence {
        step,
        group: name.clone(),
        context: String::new(),
    };
    let first = objective.evaluate(bundle, gref)?;
    if !first.loss.is_finite() {
        return Err(diverged());
    }
    let mut evals = 1;
    report.group_losses.insert(name.clone(), first.loss);
    let prefix = match gref.role {
        GroupRole::Generator => "g",
        GroupRole::Discriminator => "d",
    };
    for (k, v) in &first.components {
        report.components.entry(format!("{prefix}.{k}")).or_insert(*v);
    }

    let weights = group_of(bundle, gref).tensors();
    let grads = match rho {
        None => {
            report.eps_norms.insert(name.clone(), 0.0);
            first.grads
        }
        Some(rho) => {
            let eps = sam_epsilon(&first.grads, rho)?;
            report.eps_norms.insert(name.clone(), global_norm(&eps));
            let perturbed: Vec<Tensor> = weights
                .iter()
                .zip(&eps)
                .map(|(w, e)| w.zip_map(e, |a, b| a + b))
                .collect::<Result<_>>()?;
            group_of_mut(bundle, gref).set_tensors(&perturbed)?;
            let second = objective.evaluate(bundle, gref);
            // Restore before looking at the result so no path leaves w + ε behind.
            group_of_mut(bundle, gref).set_tensors(&weights)?;
            let second = second?;
            evals += 1;
            if !second.loss.is_finite() {
                return Err(diverged());
            }
            second.grads
        }
    };
    report.loss_evals.insert(name, evals);

    let mut params = weights;
    let mut state = state.clone();
    adam_step(&mut state, &mut params, &grads, Direction::Descent)?;
    Ok(GroupUpdate { params, state })
}

/// One SAM-GAN iteration over all generators, then all discriminators.
///
/// Discriminators descend on their own minimisation-form objective, which is
/// the ascent on the minimax game. With `sam.enabled == false` each group is
/// evaluated once and updated by plain Adam.
pub fn sam_gan_train_step(
    bundle: &mut ModelBundle,
    objective: &mut dyn GroupObjective,
    sam: &SamConfig,
    states: &mut OptimStates,
    step: usize,
) -> Result<TrainStepReport> {
    sam.check(bundle)?;
    let mut report = TrainStepReport {
        step,
        ..Default::default()
    };
    for (role, count) in [
        (GroupRole::Generator, bundle.generators.len()),
        (GroupRole::Discriminator, bundle.discriminators.len()),
    ] {
        let mut updates = Vec::with_capacity(count);
        for index in 0..count {
            let gref = GroupRef { role, index };
            let (rho, state) = match role {
                GroupRole::Generator => (sam.rho_g[index], &states.generators[index]),
                GroupRole::Discriminator => (sam.rho_d[index], &states.discriminators[index]),
            };
            let rho = sam.enabled.then_some(rho);
            updates.push(sam_group_update(
                bundle,
                objective,
                gref,
                rho,
                state,
                step,
                &mut report,
            )?);
        }
        // Commit the whole side at once: groups on one side see each other's pre-step weights.
        for (index, update) in updates.into_iter().enumerate() {
            let gref = GroupRef { role, index };
            group_of_mut(bundle, gref).set_tensors(&update.params)?;
            match role {
                GroupRole::Generator => states.generators[index] = update.state,
                GroupRole::Discriminator => states.discriminators[index] = update.state,
            }
        }
    }
    Ok(report)
}

/// A scalar loss over a flat list of parameter tensors, used by the probes.
pub trait ProbeLoss {
    fn value(&mut self, params: &[Tensor]) -> Result<f64>;
    fn value_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

/// Adapts a closure returning `(loss, gradient)` to [`ProbeLoss`].
pub struct ClosureLoss<F>(pub F);

impl<F> ProbeLoss for ClosureLoss<F>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn value(&mut self, params: &[Tensor]) -> Result<f64> {
        Ok((self.0)(params)?.0)
    }

    fn value_and_grad(&mut self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        (self.0)(params)
    }
}

fn offset(params: &[Tensor], dir: &[Tensor]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .zip(dir)
        .map(|(p, d)| p.zip_map(d, |a, b| a + b))
        .collect()
}

/// Monte-Carlo lower bound of `max_{‖ε‖₂≤ρ} L(w+ε) − L(w)`.
///
/// Candidates are ε = 0, the first-order ascent direction `ρ·∇L/‖∇L‖`, and
/// `n_dirs` seeded Gaussian directions rescaled to norm ρ.
pub fn sharpness_probe(params: &[Tensor], loss: &mut dyn ProbeLoss, rho: f64, n_dirs: usize, seed: u64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::Config(format!("sharpness radius {rho} must be positive")));
    }
    if n_dirs == 0 {
        return Err(Error::Config("sharpness probe needs at least one direction".into()));
    }
    let (base, grad) = loss.value_and_grad(params)?;
    let mut best: f64 = 0.0;
    if global_norm(&grad) >= MIN_GRAD_NORM {
        let eps = sam_epsilon(&grad, rho)?;
        best = best.max(loss.value(&offset(params, &eps)?)? - base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_dirs {
        let dir: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::randn(p.shape(), 0.0, 1.0, &mut rng))
            .collect();
        let scale = rho / global_norm(&dir);
        let dir: Vec<Tensor> = dir.iter().map(|d| d.map(|v| v * scale)).collect();
        best = best.max(loss.value(&offset(params, &dir)?)? - base);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamGroup;
    use crate::gan::{BackboneKind, BackboneSpec};

    fn t1(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        let g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let e = sam_epsilon(&g, 0.05).unwrap();
        assert!((e[0].data()[0] - 0.03).abs() < 1e-15);
        assert!((e[0].data()[1] - 0.04).abs() < 1e-15);
        assert!((global_norm(&e) - 0.05).abs() < 1e-15);
        let z = sam_epsilon(&[Tensor::zeros(&[3])], 0.05).unwrap();
        assert_eq!(z[0].data(), &[0.0; 3]);
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(&[t1(0.0)], 1e-3);
        let mut w = vec![t1(0.0)];
        adam_step(&mut st, &mut w, &[t1(2.0)], Direction::Descent).unwrap();
        let expected = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((w[0].item() - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);

        let mut st = AdamState::new(&[t1(0.0)], 1e-3);
        let mut w = vec![t1(0.0)];
        adam_step(&mut st, &mut w, &[t1(2.0)], Direction::Ascent).unwrap();
        assert!((w[0].item() + expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(&[t1(0.0)], 1e-3);
        let mut w = vec![t1(0.7)];
        adam_step(&mut st, &mut w, &[t1(0.0)], Direction::Descent).unwrap();
        assert_eq!(w[0].item(), 0.7);
        assert_eq!(st.t, 1);
        assert!(adam_step(&mut st, &mut w, &[Tensor::zeros(&[2])], Direction::Descent).is_err());
    }

    #[test]
    fn alpha_ramp() {
        let s = RampSchedule {
            alpha_max: 0.15,
            ramp_steps: 100,
        };
        assert_eq!(alpha_at(&s, 0), 0.0);
        assert!((alpha_at(&s, 50) - 0.075).abs() < 1e-15);
        assert_eq!(alpha_at(&s, 1000), 0.15);
        let mut prev = 0.0;
        for t in 0..200 {
            let a = alpha_at(&s, t);
            assert!(a >= prev);
            prev = a;
        }
    }

    fn scalar_bundle(w: f64) -> ModelBundle {
        let g = ParamGroup::new("G", vec![("w".into(), t1(w))]).unwrap();
        let d = ParamGroup::new("D", vec![("w".into(), t1(0.0))]).unwrap();
        ModelBundle::from_groups(BackboneSpec::new(BackboneKind::Pix2Pix), vec![g], vec![d]).unwrap()
    }

    /// (w − 1)² for G, w² for D; records where gradients were taken.
    fn quadratic(seen: &mut Vec<f64>) -> impl FnMut(&ModelBundle, GroupRef) -> Result<GroupEval> + '_ {
        move |b: &ModelBundle, g: GroupRef| {
            let (w, target) = match g.role {
                GroupRole::Generator => (b.generators[0].params[0].1.item(), 1.0),
                GroupRole::Discriminator => (b.discriminators[0].params[0].1.item(), 0.0),
            };
            if g.role == GroupRole::Generator {
                seen.push(w);
            }
            Ok(GroupEval {
                loss: (w - target) * (w - target),
                grads: vec![t1(2.0 * (w - target))],
                components: BTreeMap::new(),
            })
        }
    }

    #[test]
    fn one_dimensional_sam_step() {
        let mut b = scalar_bundle(0.0);
        let mut states = OptimStates::new(&b, 1e-3);
        let sam = SamConfig::uniform(1, 1, 0.1);
        let mut seen = Vec::new();
        let report = sam_gan_train_step(&mut b, &mut quadratic(&mut seen), &sam, &mut states, 0).unwrap();
        // ∇ at 0 is −2, so ε = −0.1 and the perturbed gradient is 2(−0.1 − 1) = −2.2.
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0], 0.0);
        assert!((seen[1] + 0.1).abs() < 1e-15);
        assert_eq!(report.loss_evals["G"], 2);
        assert_eq!(report.loss_evals["D"], 2);
        // Adam's first step only sees the sign of −2.2, applied from w = 0.
        let w = b.generators[0].params[0].1.item();
        assert!((w - 1e-3 * 2.2 / (2.2 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_matches_plain_adam_bitwise() {
        let mut a = scalar_bundle(0.3);
        let mut b = a.clone();
        let mut sa = OptimStates::new(&a, 1e-2);
        let mut sb = sa.clone();
        let sam0 = SamConfig::uniform(1, 1, 0.0);
        let plain = SamConfig::disabled(1, 1);
        for step in 0..20 {
            let mut s1 = Vec::new();
            let mut s2 = Vec::new();
            let ra = sam_gan_train_step(&mut a, &mut quadratic(&mut s1), &sam0, &mut sa, step).unwrap();
            let rb = sam_gan_train_step(&mut b, &mut quadratic(&mut s2), &plain, &mut sb, step).unwrap();
            assert_eq!(ra.loss_evals["G"], 2);
            assert_eq!(rb.loss_evals["G"], 1);
        }
        assert!(a.bit_eq(&b));
        assert_eq!(sa, sb);
    }

    #[test]
    fn divergence_names_group_and_step() {
        let mut b = scalar_bundle(0.0);
        let mut states = OptimStates::new(&b, 1e-3);
        let mut nan = |_: &ModelBundle, _: GroupRef| {
            Ok(GroupEval {
                loss: f64::NAN,
                grads: vec![t1(0.0)],
                components: BTreeMap::new(),
            })
        };
        let err = sam_gan_train_step(&mut b, &mut nan, &SamConfig::uniform(1, 1, 0.05), &mut states, 17).unwrap_err();
        match err {
            Error::Divergence { step, group, .. } => {
                assert_eq!(step, 17);
                assert_eq!(group, "G");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mismatched_radii_are_rejected() {
        let mut b = scalar_bundle(0.0);
        let mut states = OptimStates::new(&b, 1e-3);
        let mut seen = Vec::new();
        let sam = SamConfig::uniform(2, 1, 0.05);
        assert!(matches!(
            sam_gan_train_step(&mut b, &mut quadratic(&mut seen), &sam, &mut states, 0),
            Err(Error::Config(_))
        ));
    }

    #[allow(clippy::type_complexity)]
    fn quad_probe(c: f64) -> ClosureLoss<impl FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>> {
        ClosureLoss(move |p: &[Tensor]| {
            let w = p[0].item();
            Ok((c * w * w, vec![t1(2.0 * c * w)]))
        })
    }

    #[test]
    fn probe_examples() {
        let mut constant = ClosureLoss(|p: &[Tensor]| Ok((3.0, vec![Tensor::zeros(p[0].shape())])));
        assert_eq!(sharpness_probe(&[t1(0.5)], &mut constant, 0.05, 4, 1).unwrap(), 0.0);
        let got = sharpness_probe(&[t1(0.0)], &mut quad_probe(2.5), 1.0, 3, 1).unwrap();
        assert!((got - 2.5).abs() < 1e-12);
        let flat = sharpness_probe(&[t1(0.2)], &mut quad_probe(1.0), 0.05, 8, 3).unwrap();
        let sharp = sharpness_probe(&[t1(0.2)], &mut quad_probe(4.0), 0.05, 8, 3).unwrap();
        assert!(sharp > flat);
        assert!(sharpness_probe(&[t1(0.0)], &mut quad_probe(1.0), 0.0, 3, 1).is_err());
    }
}
