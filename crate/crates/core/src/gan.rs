//! Toy Pix2Pix and CycleGAN backbones and their loss terms.
//!
//! Generators are small encoder/decoder stacks: strided 4×4 convolutions with
//! leaky ReLU on the way down, 3×3 convolutions + nearest upsampling on the way
//! up, and a tanh head. The last decoder stage sees the input image through a
//! channel-concatenated skip. Discriminators are patch-style stacks of strided
//! convolutions ending in a one-channel logit map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, GroupVars, NodeId, ParamGroup, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LEAK: Activation = Activation::LeakyRelu(0.2);
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Pix2Pix,
    CycleGan,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Pix2Pix => "pix2pix",
            BackboneKind::CycleGan => "cyclegan",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pix2pix" => Ok(BackboneKind::Pix2Pix),
            "cyclegan" => Ok(BackboneKind::CycleGan),
            _ => Err(Error::Config(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub base_channels: usize,
    pub depth: usize,
    pub image_channels: usize,
    pub image_size: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind) -> Self {
        BackboneSpec {
            kind,
            base_channels: 8,
            depth: 2,
            image_channels: 1,
            image_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.image_channels == 0 {
            return Err(Error::Config(format!("degenerate backbone {self:?}")));
        }
        if self.depth > 8 || !self.image_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^depth = 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    fn stage_channels(&self, k: usize) -> usize {
        if k == 0 {
            self.image_channels
        } else {
            self.base_channels << (k - 1)
        }
    }

    fn discriminator_inputs(&self) -> usize {
        match self.kind {
            BackboneKind::Pix2Pix => 2 * self.image_channels,
            BackboneKind::CycleGan => self.image_channels,
        }
    }

    pub fn generator_names(&self) -> &'static [&'static str] {
        match self.kind {
            BackboneKind::Pix2Pix => &["G"],
            BackboneKind::CycleGan => &["G1", "G2"],
        }
    }

    pub fn discriminator_names(&self) -> &'static [&'static str] {
        match self.kind {
            BackboneKind::Pix2Pix => &["D"],
            BackboneKind::CycleGan => &["D_X", "D_Y"],
        }
    }
}

/// Generators and discriminators of one backbone.
///
/// CycleGAN order is `G1: X→Y`, `G2: Y→X`, `D_X`, `D_Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: BackboneSpec,
    pub generators: Vec<ParamGroup>,
    pub discriminators: Vec<ParamGroup>,
}

fn conv_param(name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut ChaCha8Rng) -> [(String, Tensor); 2] {
    [
        (
            format!("{name}.weight"),
            Tensor::randn(&[out_c, in_c, k, k], 0.0, INIT_STD, rng),
        ),
        (format!("{name}.bias"), Tensor::zeros(&[out_c])),
    ]
}

fn generator_group(name: &str, spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<ParamGroup> {
    let mut params = Vec::new();
    for k in 1..=spec.depth {
        params.extend(conv_param(
            &format!("enc{k}"),
            spec.stage_channels(k),
            spec.stage_channels(k - 1),
            4,
            rng,
        ));
    }
    for k in (1..=spec.depth).rev() {
        let (in_c, out_c) = if k == 1 {
            (spec.stage_channels(1) + spec.image_channels, spec.image_channels)
        } else {
            (spec.stage_channels(k), spec.stage_channels(k - 1))
        };
        params.extend(conv_param(&format!("dec{k}"), out_c, in_c, 3, rng));
    }
    ParamGroup::new(name, params)
}

fn discriminator_group(name: &str, spec: &BackboneSpec, rng: &mut ChaCha8Rng) -> Result<ParamGroup> {
    let mut params = Vec::new();
    let mut in_c = spec.discriminator_inputs();
    for k in 1..=spec.depth {
        let out_c = spec.stage_channels(k);
        params.extend(conv_param(&format!("disc{k}"), out_c, in_c, 4, rng));
        in_c = out_c;
    }
    params.extend(conv_param("head", 1, in_c, 3, rng));
    ParamGroup::new(name, params)
}

impl ModelBundle {
    /// Fresh bundle with `N(0, 0.02²)` weights and zero biases.
    pub fn build(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generators = spec
            .generator_names()
            .iter()
            .map(|n| generator_group(n, &spec, &mut rng))
            .collect::<Result<_>>()?;
        let discriminators = spec
            .discriminator_names()
            .iter()
            .map(|n| discriminator_group(n, &spec, &mut rng))
            .collect::<Result<_>>()?;
        Ok(ModelBundle {
            spec,
            generators,
            discriminators,
        })
    }

    /// Assemble a bundle from explicit groups, e.g. for optimizer tests.
    pub fn from_groups(
        spec: BackboneSpec,
        generators: Vec<ParamGroup>,
        discriminators: Vec<ParamGroup>,
    ) -> Result<Self> {
        let mut names: Vec<&str> = generators
            .iter()
            .chain(&discriminators)
            .map(|g| g.name.as_str())
            .collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("group names must be unique within a bundle".into()));
        }
        Ok(ModelBundle {
            spec,
            generators,
            discriminators,
        })
    }

    pub fn groups(&self) -> impl Iterator<Item = &ParamGroup> {
        self.generators.iter().chain(&self.discriminators)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups().find(|g| g.name == name)
    }

    pub fn bit_eq(&self, other: &ModelBundle) -> bool {
        self.spec == other.spec
            && self.generators.len() == other.generators.len()
            && self.discriminators.len() == other.discriminators.len()
            && self.groups().zip(other.groups()).all(|(a, b)| a.bit_eq(b))
    }

    /// Run generator `index` on a batch `[B,C,H,W]` without recording gradients.
    pub fn translate(&self, index: usize, x: &Tensor) -> Result<Tensor> {
        let gen = self
            .generators
            .get(index)
            .ok_or_else(|| Error::Contract(format!("bundle has no generator {index}")))?;
        let mut tape = Tape::new();
        let vars = gen.register(&mut tape, false);
        let xn = tape.constant(x.as_batch()?);
        let out = generator_forward(&mut tape, &vars, &self.spec, xn)?;
        Ok(tape.value(out).clone())
    }
}

fn check_image(tape: &Tape, x: NodeId, channels: usize, spec: &BackboneSpec, op: &'static str) -> Result<()> {
    let s = tape.value(x).shape();
    if s.len() != 4 || s[1] != channels || s[2] != spec.image_size || s[3] != spec.image_size {
        return Err(Error::dim(
            op,
            format!("expected [B,{channels},{n},{n}], got {s:?}", n = spec.image_size),
        ));
    }
    Ok(())
}

/// Generator forward pass; output in (−1, 1) with the input's shape.
pub fn generator_forward(tape: &mut Tape, vars: &GroupVars, spec: &BackboneSpec, x: NodeId) -> Result<NodeId> {
    check_image(tape, x, spec.image_channels, spec, "generator")?;
    let mut p = 0;
    let mut h = x;
    for _ in 0..spec.depth {
        h = tape.conv2d(h, vars.get(p), vars.get(p + 1), 2, 1)?;
        h = tape.activation(h, LEAK)?;
        p += 2;
    }
    for k in (1..=spec.depth).rev() {
        if k == 1 {
            h = tape.upsample_nearest(h, 2)?;
            h = tape.concat_channels(h, x)?;
            h = tape.conv2d(h, vars.get(p), vars.get(p + 1), 1, 1)?;
            h = tape.activation(h, Activation::Tanh)?;
        } else {
            // Convolve at the coarse resolution, then upsample: 4× cheaper than the reverse.
            h = tape.conv2d(h, vars.get(p), vars.get(p + 1), 1, 1)?;
            h = tape.activation(h, LEAK)?;
            h = tape.upsample_nearest(h, 2)?;
        }
        p += 2;
    }
    Ok(h)
}

/// Discriminator forward pass producing a `[B,1,h,w]` logit map.
pub fn discriminator_forward(tape: &mut Tape, vars: &GroupVars, spec: &BackboneSpec, input: NodeId) -> Result<NodeId> {
    check_image(tape, input, spec.discriminator_inputs(), spec, "discriminator")?;
    let mut h = input;
    let mut p = 0;
    for _ in 0..spec.depth {
        h = tape.conv2d(h, vars.get(p), vars.get(p + 1), 2, 1)?;
        h = tape.activation(h, LEAK)?;
        p += 2;
    }
    tape.conv2d(h, vars.get(p), vars.get(p + 1), 1, 1)
}

/// Per-sample patch-averaged logits `[B]`.
fn pooled_logits(tape: &mut Tape, logit_map: NodeId) -> NodeId {
    tape.mean_per_sample(logit_map)
}

/// Discriminator and generator adversarial losses from real/fake logits.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerms {
    pub d_loss: NodeId,
    pub g_loss: NodeId,
}

/// `d_loss = bce(real, 1) + bce(fake, 0)`, `g_loss = bce(fake, 1)` (non-saturating).
pub fn gan_adversarial_terms(tape: &mut Tape, real_logits: NodeId, fake_logits: NodeId) -> Result<AdversarialTerms> {
    tape.value(real_logits)
        .expect_same_shape(tape.value(fake_logits), "gan_adversarial_terms")?;
    let d_loss = discriminator_adv_loss(tape, real_logits, fake_logits)?;
    let g_loss = generator_adv_loss(tape, fake_logits)?;
    Ok(AdversarialTerms { d_loss, g_loss })
}

fn targets_like(tape: &mut Tape, logits: NodeId, value: f64) -> NodeId {
    let shape = tape.value(logits).shape().to_vec();
    tape.constant(Tensor::full(&shape, value))
}

fn discriminator_adv_loss(tape: &mut Tape, real_logits: NodeId, fake_logits: NodeId) -> Result<NodeId> {
    let ones = targets_like(tape, real_logits, 1.0);
    let zeros = targets_like(tape, fake_logits, 0.0);
    let real = tape.bce_with_logits(real_logits, ones)?;
    let fake = tape.bce_with_logits(fake_logits, zeros)?;
    tape.add(real, fake)
}

fn generator_adv_loss(tape: &mut Tape, fake_logits: NodeId) -> Result<NodeId> {
    let ones = targets_like(tape, fake_logits, 1.0);
    tape.bce_with_logits(fake_logits, ones)
}

/// Which side of the game a loss evaluation serves.
///
/// Groups outside the scope are put on the tape as constants, and terms only
/// the other side needs are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossScope {
    Generators,
    Discriminators,
    All,
}

impl LossScope {
    fn generators(self) -> bool {
        self != LossScope::Discriminators
    }

    fn discriminators(self) -> bool {
        self != LossScope::Generators
    }
}

/// Losses of one forward pass, as nodes on the caller's tape.
///
/// Each total is the sum of its listed (already weighted) terms.
#[derive(Clone, Debug, Default)]
pub struct LossBundle {
    pub generator_terms: Vec<(String, NodeId)>,
    pub discriminator_terms: Vec<(String, NodeId)>,
    pub generator_total: Option<NodeId>,
    pub discriminator_total: Option<NodeId>,
    /// Objective each group minimises, keyed by group name.
    pub per_group: BTreeMap<String, NodeId>,
    /// Parameter nodes of every group, keyed by group name.
    pub vars: BTreeMap<String, GroupVars>,
    /// The primary translation X→Y of the batch (G(x) or G1(x)).
    pub translation: Option<NodeId>,
}

impl LossBundle {
    /// Term values keyed by name, plus `g_total` / `d_total`.
    pub fn components(&self, tape: &Tape) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self
            .generator_terms
            .iter()
            .chain(&self.discriminator_terms)
            .map(|(n, id)| (n.clone(), tape.value(*id).item()))
            .collect();
        if let Some(t) = self.generator_total {
            out.insert("g_total".into(), tape.value(t).item());
        }
        if let Some(t) = self.discriminator_total {
            out.insert("d_total".into(), tape.value(t).item());
        }
        out
    }
}

fn sum_terms(tape: &mut Tape, terms: &[(String, NodeId)]) -> Result<Option<NodeId>> {
    let mut iter = terms.iter();
    let Some((_, first)) = iter.next() else {
        return Ok(None);
    };
    let mut total = *first;
    for (_, t) in iter {
        total = tape.add(total, *t)?;
    }
    Ok(Some(total))
}

fn register_all(bundle: &ModelBundle, tape: &mut Tape, scope: LossScope) -> BTreeMap<String, GroupVars> {
    let mut vars = BTreeMap::new();
    for g in &bundle.generators {
        vars.insert(g.name.clone(), g.register(tape, scope.generators()));
    }
    for d in &bundle.discriminators {
        vars.insert(d.name.clone(), d.register(tape, scope.discriminators()));
    }
    vars
}

fn expect_kind(bundle: &ModelBundle, kind: BackboneKind) -> Result<()> {
    if bundle.spec.kind != kind {
        return Err(Error::Config(format!(
            "expected a {kind} bundle, got {}",
            bundle.spec.kind
        )));
    }
    Ok(())
}

/// Conditional GAN + λ·L1 loss of Pix2Pix on paired `(x, y)`.
///
/// The discriminator sees `(x, y)` concatenated along channels; its fake input
/// is a detached copy of `G(x)`.
pub fn pix2pix_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x: &Tensor,
    y: &Tensor,
    lambda_l1: f64,
    scope: LossScope,
) -> Result<LossBundle> {
    expect_kind(bundle, BackboneKind::Pix2Pix)?;
    x.expect_same_shape(y, "pix2pix_loss")?;
    let spec = bundle.spec;
    let vars = register_all(bundle, tape, scope);
    let (gv, dv) = (&vars["G"], &vars["D"]);
    let xn = tape.constant(x.clone());
    let yn = tape.constant(y.clone());
    let fake = generator_forward(tape, gv, &spec, xn)?;

    let mut lb = LossBundle {
        translation: Some(fake),
        ..Default::default()
    };
    if scope.generators() {
        let pair = tape.concat_channels(xn, fake)?;
        let map = discriminator_forward(tape, dv, &spec, pair)?;
        let logits = pooled_logits(tape, map);
        let adv = generator_adv_loss(tape, logits)?;
        let l1 = tape.l1(fake, yn)?;
        let l1 = tape.scale(l1, lambda_l1);
        lb.generator_terms = vec![("adv".into(), adv), ("l1".into(), l1)];
        lb.generator_total = sum_terms(tape, &lb.generator_terms)?;
        lb.per_group.insert("G".into(), lb.generator_total.expect("two terms"));
    }
    if scope.discriminators() {
        let detached = tape.constant(tape.value(fake).clone());
        let real_pair = tape.concat_channels(xn, yn)?;
        let fake_pair = tape.concat_channels(xn, detached)?;
        let real_map = discriminator_forward(tape, dv, &spec, real_pair)?;
        let fake_map = discriminator_forward(tape, dv, &spec, fake_pair)?;
        let real = pooled_logits(tape, real_map);
        let fake_l = pooled_logits(tape, fake_map);
        let d = discriminator_adv_loss(tape, real, fake_l)?;
        lb.discriminator_terms = vec![("adv_D".into(), d)];
        lb.discriminator_total = Some(d);
        lb.per_group.insert("D".into(), d);
    }
    lb.vars = vars;
    Ok(lb)
}

/// A differentiable image-to-image map used inside [`cyclegan_loss_with`].
pub type Translator<'a> = &'a dyn Fn(&mut Tape, NodeId) -> Result<NodeId>;

/// CycleGAN loss with caller-supplied generator and discriminator maps.
///
/// `g1: X→Y` is judged by `d_y`, `g2: Y→X` by `d_x`; the cycle term is
/// `λ·(L1(g2(g1(x)), x) + L1(g1(g2(y)), y))`.
#[allow(clippy::too_many_arguments)]
pub fn cyclegan_loss_with(
    tape: &mut Tape,
    g1: Translator,
    g2: Translator,
    d_x: Translator,
    d_y: Translator,
    x: NodeId,
    y: NodeId,
    lambda_cyc: f64,
    scope: LossScope,
) -> Result<LossBundle> {
    tape.value(x).expect_same_shape(tape.value(y), "cyclegan_loss")?;
    let fake_y = g1(tape, x)?;
    let fake_x = g2(tape, y)?;
    let mut lb = LossBundle {
        translation: Some(fake_y),
        ..Default::default()
    };
    if scope.generators() {
        let dy_map = d_y(tape, fake_y)?;
        let dy_logits = pooled_logits(tape, dy_map);
        let adv1 = generator_adv_loss(tape, dy_logits)?;
        let dx_map = d_x(tape, fake_x)?;
        let dx_logits = pooled_logits(tape, dx_map);
        let adv2 = generator_adv_loss(tape, dx_logits)?;
        let rec_x = g2(tape, fake_y)?;
        let rec_y = g1(tape, fake_x)?;
        let cyc_x = tape.l1(rec_x, x)?;
        let cyc_y = tape.l1(rec_y, y)?;
        let cyc = tape.add(cyc_x, cyc_y)?;
        let cyc = tape.scale(cyc, lambda_cyc);
        lb.generator_terms = vec![("adv_G1".into(), adv1), ("adv_G2".into(), adv2), ("cycle".into(), cyc)];
        let total = sum_terms(tape, &lb.generator_terms)?.expect("three terms");
        lb.generator_total = Some(total);
        lb.per_group.insert("G1".into(), total);
        lb.per_group.insert("G2".into(), total);
    }
    if scope.discriminators() {
        let fy = tape.constant(tape.value(fake_y).clone());
        let fx = tape.constant(tape.value(fake_x).clone());
        let real_y = d_y(tape, y)?;
        let real_y = pooled_logits(tape, real_y);
        let fake_y_l = d_y(tape, fy)?;
        let fake_y_l = pooled_logits(tape, fake_y_l);
        let dy = discriminator_adv_loss(tape, real_y, fake_y_l)?;
        let real_x = d_x(tape, x)?;
        let real_x = pooled_logits(tape, real_x);
        let fake_x_l = d_x(tape, fx)?;
        let fake_x_l = pooled_logits(tape, fake_x_l);
        let dx = discriminator_adv_loss(tape, real_x, fake_x_l)?;
        lb.discriminator_terms = vec![("adv_D_X".into(), dx), ("adv_D_Y".into(), dy)];
        lb.discriminator_total = sum_terms(tape, &lb.discriminator_terms)?;
        lb.per_group.insert("D_X".into(), dx);
        lb.per_group.insert("D_Y".into(), dy);
    }
    Ok(lb)
}

/// CycleGAN loss of a bundle on unpaired batches `x ∈ X`, `y ∈ Y`.
pub fn cyclegan_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    x: &Tensor,
    y: &Tensor,
    lambda_cyc: f64,
    scope: LossScope,
) -> Result<LossBundle> {
    expect_kind(bundle, BackboneKind::CycleGan)?;
    x.expect_same_shape(y, "cyclegan_loss")?;
    let spec = bundle.spec;
    let vars = register_all(bundle, tape, scope);
    let xn = tape.constant(x.clone());
    let yn = tape.constant(y.clone());
    let g1 = |t: &mut Tape, i: NodeId| generator_forward(t, &vars["G1"], &spec, i);
    let g2 = |t: &mut Tape, i: NodeId| generator_forward(t, &vars["G2"], &spec, i);
    let dx = |t: &mut Tape, i: NodeId| discriminator_forward(t, &vars["D_X"], &spec, i);
    let dy = |t: &mut Tape, i: NodeId| discriminator_forward(t, &vars["D_Y"], &spec, i);
    let mut lb = cyclegan_loss_with(tape, &g1, &g2, &dx, &dy, xn, yn, lambda_cyc, scope)?;
    lb.vars = vars;
    Ok(lb)
}

/// Add `α·L_w^p` to the generator side (L = L_o + α·L_w^p). Discriminator losses are untouched.
pub fn attack_total_loss(
    tape: &mut Tape,
    mut backbone: LossBundle,
    wavelet_term: NodeId,
    alpha: f64,
) -> Result<LossBundle> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!(
            "wavelet weight alpha {alpha} must be non-negative"
        )));
    }
    if alpha == 0.0 {
        return Ok(backbone);
    }
    let Some(old_total) = backbone.generator_total else {
        return Ok(backbone);
    };
    let term = tape.scale(wavelet_term, alpha);
    let total = tape.add(old_total, term)?;
    backbone.generator_terms.push(("wavelet".into(), term));
    backbone.generator_total = Some(total);
    for v in backbone.per_group.values_mut() {
        if *v == old_total {
            *v = total;
        }
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus;
    use rand::Rng;

    fn batch(seed: u64, spec: &BackboneSpec, n: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = [n, spec.image_channels, spec.image_size, spec.image_size];
        (
            Tensor::rand_uniform(&s, -1.0, 1.0, &mut rng),
            Tensor::rand_uniform(&s, -1.0, 1.0, &mut rng),
        )
    }

    #[test]
    fn bundle_shapes() {
        let p = ModelBundle::build(BackboneSpec::new(BackboneKind::Pix2Pix), 0).unwrap();
        assert_eq!((p.generators.len(), p.discriminators.len()), (1, 1));
        let c = ModelBundle::build(BackboneSpec::new(BackboneKind::CycleGan), 0).unwrap();
        let names: Vec<_> = c.groups().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["G1", "G2", "D_X", "D_Y"]);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = BackboneSpec::new(BackboneKind::CycleGan);
        let a = ModelBundle::build(spec, 42).unwrap();
        assert!(a.bit_eq(&ModelBundle::build(spec, 42).unwrap()));
        assert!(!a.bit_eq(&ModelBundle::build(spec, 43).unwrap()));
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        spec.image_size = 30;
        assert!(matches!(ModelBundle::build(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn generator_output_is_bounded_and_same_shape() {
        let spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        let mut b = ModelBundle::build(spec, 1).unwrap();
        // Blow up the weights so the tanh head saturates.
        for (_, t) in &mut b.generators[0].params {
            *t = t.map(|v| v * 500.0);
        }
        let (x, _) = batch(2, &spec, 3);
        let out = b.translate(0, &x.map(|v| v * 1e3)).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    }

    #[test]
    fn adversarial_terms_at_equilibrium() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[4]));
        let f = tape.constant(Tensor::zeros(&[4]));
        let t = gan_adversarial_terms(&mut tape, r, f).unwrap();
        assert!((tape.value(t.d_loss).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.value(t.g_loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_terms_perfect_discriminator() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::full(&[2], 40.0));
        let f = tape.constant(Tensor::full(&[2], -40.0));
        let t = gan_adversarial_terms(&mut tape, r, f).unwrap();
        assert!(tape.value(t.d_loss).item() < 1e-15);
    }

    #[test]
    fn adversarial_terms_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let fake: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let direct = -real.iter().map(|&r| sig(r).ln()).sum::<f64>() / 7.0
            - fake.iter().map(|&f| (1.0 - sig(f)).ln()).sum::<f64>() / 7.0;
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![7], real).unwrap());
        let f = tape.constant(Tensor::new(vec![7], fake.clone()).unwrap());
        let t = gan_adversarial_terms(&mut tape, r, f).unwrap();
        assert!((tape.value(t.d_loss).item() - direct).abs() < 1e-10);
        let g_direct = fake.iter().map(|&v| softplus(-v)).sum::<f64>() / 7.0;
        assert!((tape.value(t.g_loss).item() - g_direct).abs() < 1e-12);

        let short = tape.constant(Tensor::zeros(&[3]));
        assert!(gan_adversarial_terms(&mut tape, r, short).is_err());
    }

    #[test]
    fn pix2pix_components_sum_to_totals() {
        let spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        let b = ModelBundle::build(spec, 3).unwrap();
        let (x, y) = batch(4, &spec, 2);
        let mut tape = Tape::new();
        let lb = pix2pix_loss(&mut tape, &b, &x, &y, 100.0, LossScope::All).unwrap();
        let c = lb.components(&tape);
        assert!((c["adv"] + c["l1"] - c["g_total"]).abs() < 1e-10);
        assert!((c["adv_D"] - c["d_total"]).abs() < 1e-10);

        let mut tape = Tape::new();
        let lb0 = pix2pix_loss(&mut tape, &b, &x, &y, 0.0, LossScope::Generators).unwrap();
        let c0 = lb0.components(&tape);
        assert_eq!(c0["l1"], 0.0);
        assert_eq!(c0["g_total"], c0["adv"]);
        assert!(lb0.discriminator_total.is_none());
    }

    #[test]
    fn pix2pix_l1_vanishes_when_output_matches() {
        let spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        let b = ModelBundle::build(spec, 5).unwrap();
        let (x, _) = batch(6, &spec, 2);
        let y = b.translate(0, &x).unwrap();
        let mut tape = Tape::new();
        let lb = pix2pix_loss(&mut tape, &b, &x, &y, 100.0, LossScope::Generators).unwrap();
        assert_eq!(lb.components(&tape)["l1"], 0.0);
    }

    #[test]
    fn pix2pix_rejects_unpaired_shapes() {
        let spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        let b = ModelBundle::build(spec, 5).unwrap();
        let (x, _) = batch(6, &spec, 2);
        let (y, _) = batch(7, &spec, 3);
        let mut tape = Tape::new();
        assert!(matches!(
            pix2pix_loss(&mut tape, &b, &x, &y, 1.0, LossScope::All),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cyclegan_identity_generators_have_zero_cycle_loss() {
        let spec = BackboneSpec::new(BackboneKind::CycleGan);
        let b = ModelBundle::build(spec, 1).unwrap();
        let mut tape = Tape::new();
        let dv: Vec<_> = b.discriminators.iter().map(|d| d.register(&mut tape, true)).collect();
        let (x, _) = batch(2, &spec, 2);
        let xn = tape.constant(x.clone());
        let yn = tape.constant(x);
        let id = |_: &mut Tape, i: NodeId| Ok(i);
        let dx = |t: &mut Tape, i: NodeId| discriminator_forward(t, &dv[0], &spec, i);
        let dy = |t: &mut Tape, i: NodeId| discriminator_forward(t, &dv[1], &spec, i);
        let lb = cyclegan_loss_with(&mut tape, &id, &id, &dx, &dy, xn, yn, 10.0, LossScope::Generators).unwrap();
        assert_eq!(lb.components(&tape)["cycle"], 0.0);
    }

    #[test]
    fn cyclegan_cycle_term_matches_recomputation() {
        let spec = BackboneSpec::new(BackboneKind::CycleGan);
        let b = ModelBundle::build(spec, 11).unwrap();
        let (x, y) = batch(12, &spec, 2);
        let mut tape = Tape::new();
        let lb = cyclegan_loss(&mut tape, &b, &x, &y, 10.0, LossScope::All).unwrap();
        let c = lb.components(&tape);

        let rec_x = b.translate(1, &b.translate(0, &x).unwrap()).unwrap();
        let rec_y = b.translate(0, &b.translate(1, &y).unwrap()).unwrap();
        let l1 = |a: &Tensor, b: &Tensor| a.zip_map(b, |p, q| (p - q).abs()).unwrap().mean();
        let expected = 10.0 * (l1(&rec_x, &x) + l1(&rec_y, &y));
        assert!((c["cycle"] - expected).abs() < 1e-10);
        assert!((c["adv_G1"] + c["adv_G2"] + c["cycle"] - c["g_total"]).abs() < 1e-10);
        assert!((c["adv_D_X"] + c["adv_D_Y"] - c["d_total"]).abs() < 1e-10);

        let mut tape = Tape::new();
        let lb0 = cyclegan_loss(&mut tape, &b, &x, &y, 0.0, LossScope::Generators).unwrap();
        let c0 = lb0.components(&tape);
        assert_eq!(c0["g_total"], c0["adv_G1"] + c0["adv_G2"] + 0.0);
    }

    #[test]
    fn cyclegan_is_symmetric_under_domain_swap() {
        let spec = BackboneSpec::new(BackboneKind::CycleGan);
        let b = ModelBundle::build(spec, 21).unwrap();
        let mut swapped = b.clone();
        swapped.generators.swap(0, 1);
        swapped.discriminators.swap(0, 1);
        for (g, n) in swapped.groups_mut_names() {
            g.name = n.to_string();
        }
        let (x, y) = batch(22, &spec, 2);
        let mut t1 = Tape::new();
        let a = cyclegan_loss(&mut t1, &b, &x, &y, 10.0, LossScope::All).unwrap();
        let mut t2 = Tape::new();
        let s = cyclegan_loss(&mut t2, &swapped, &y, &x, 10.0, LossScope::All).unwrap();
        let (ca, cs) = (a.components(&t1), s.components(&t2));
        assert!((ca["g_total"] - cs["g_total"]).abs() < 1e-12);
        assert!((ca["d_total"] - cs["d_total"]).abs() < 1e-12);
        assert!((ca["adv_G1"] - cs["adv_G2"]).abs() < 1e-12);
    }

    impl ModelBundle {
        fn groups_mut_names(&mut self) -> Vec<(&mut ParamGroup, &'static str)> {
            let names: Vec<&'static str> = self
                .spec
                .generator_names()
                .iter()
                .chain(self.spec.discriminator_names())
                .copied()
                .collect();
            self.generators
                .iter_mut()
                .chain(self.discriminators.iter_mut())
                .zip(names)
                .collect()
        }
    }

    #[test]
    fn attack_total_adds_weighted_wavelet_term() {
        let spec = BackboneSpec::new(BackboneKind::Pix2Pix);
        let b = ModelBundle::build(spec, 3).unwrap();
        let (x, y) = batch(4, &spec, 2);
        let mut tape = Tape::new();
        let lb = pix2pix_loss(&mut tape, &b, &x, &y, 100.0, LossScope::All).unwrap();
        let base = lb.components(&tape);
        let lw = tape.constant(Tensor::scalar(2.0));
        let total = attack_total_loss(&mut tape, lb.clone(), lw, 0.15).unwrap();
        let c = total.components(&tape);
        assert!((c["g_total"] - base["g_total"] - 0.3).abs() < 1e-12);
        assert_eq!(c["d_total"], base["d_total"]);
        assert_eq!(total.per_group["G"], total.generator_total.unwrap());

        let same = attack_total_loss(&mut tape, lb.clone(), lw, 0.0).unwrap();
        assert_eq!(same.generator_total, lb.generator_total);
        assert!(matches!(
            attack_total_loss(&mut tape, lb, lw, -0.1),
            Err(Error::Config(_))
        ));
    }
}
