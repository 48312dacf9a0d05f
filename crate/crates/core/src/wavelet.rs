//! Orthonormal 2-D Haar transform and the high-frequency wavelet regulariser.
//!
//! For a 2×2 block `[[a, b], [c, d]]` the analysis step produces
//!
//! ```text
//! ll = (a + b + c + d) / 2    lh = (a + b − c − d) / 2
//! hl = (a − b + c − d) / 2    hh = (a − b − c + d) / 2
//! ```
//!
//! The map is orthonormal, so its adjoint is its inverse. Every function here
//! transforms the last two axes and treats leading axes as independent planes.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four sub-bands of one analysis step.
#[derive(Clone, Debug, PartialEq)]
pub struct Bands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Detail bands of one cascade level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailBands {
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Detail bands of levels `1..=p` plus the final low band.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub levels: Vec<DetailBands>,
    pub ll: Tensor,
}

/// Number of cascaded analysis steps. The family is fixed to orthonormal Haar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletConfig {
    pub levels: usize,
}

pub const WAVELET_FAMILY: &str = "haar-orthonormal";

impl WaveletConfig {
    pub fn new(levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("wavelet level count must be at least 1".into()));
        }
        Ok(WaveletConfig { levels })
    }

    /// Reject spatial sizes that cannot be halved `levels` times.
    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if !height.is_multiple_of(div) {
            return Err(Error::dim(
                "wavelet",
                format!("height axis {height} not divisible by 2^{} = {div}", self.levels),
            ));
        }
        if !width.is_multiple_of(div) {
            return Err(Error::dim(
                "wavelet",
                format!("width axis {width} not divisible by 2^{} = {div}", self.levels),
            ));
        }
        Ok(())
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    let nd = t.ndim();
    if nd < 2 {
        return Err(Error::dim(
            "wavelet",
            format!("need at least 2 axes, got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    Ok((t.numel() / (h * w), h, w))
}

fn with_spatial(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let nd = s.len();
    s[nd - 2] = h;
    s[nd - 1] = w;
    s
}

/// One analysis step over `planes` planes of size `h×w`; returns `[ll, lh, hl, hh]`.
fn analyze(data: &[f64], planes: usize, h: usize, w: usize) -> [Vec<f64>; 4] {
    let (oh, ow) = (h / 2, w / 2);
    let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; planes * oh * ow]);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                let k = p * oh * ow + i * ow + j;
                out[0][k] = (a + b + c + d) * 0.5;
                out[1][k] = (a + b - c - d) * 0.5;
                out[2][k] = (a - b + c - d) * 0.5;
                out[3][k] = (a - b - c + d) * 0.5;
            }
        }
    }
    out
}

/// Inverse of [`analyze`]; band planes are `oh×ow`, output is `2oh×2ow`.
fn synthesize(bands: [&[f64]; 4], planes: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let k = p * oh * ow + i * ow + j;
                let (ll, lh, hl, hh) = (bands[0][k], bands[1][k], bands[2][k], bands[3][k]);
                dst[2 * i * w + 2 * j] = (ll + lh + hl + hh) * 0.5;
                dst[2 * i * w + 2 * j + 1] = (ll + lh - hl - hh) * 0.5;
                dst[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) * 0.5;
                dst[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) * 0.5;
            }
        }
    }
    out
}

pub fn dwt2(image: &Tensor) -> Result<Bands> {
    let (planes, h, w) = spatial(image)?;
    if h % 2 != 0 {
        return Err(Error::dim("dwt2", format!("height axis {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::dim("dwt2", format!("width axis {w} is odd")));
    }
    let shape = with_spatial(image.shape(), h / 2, w / 2);
    let [ll, lh, hl, hh] = analyze(image.data(), planes, h, w);
    Ok(Bands {
        ll: Tensor::new(shape.clone(), ll)?,
        lh: Tensor::new(shape.clone(), lh)?,
        hl: Tensor::new(shape.clone(), hl)?,
        hh: Tensor::new(shape, hh)?,
    })
}

pub fn idwt2(bands: &Bands) -> Result<Tensor> {
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if b.shape() != bands.ll.shape() {
            return Err(Error::dim(
                "idwt2",
                format!("band {name} has shape {:?}, ll has {:?}", b.shape(), bands.ll.shape()),
            ));
        }
    }
    let (planes, oh, ow) = spatial(&bands.ll)?;
    let data = synthesize(
        [bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data()],
        planes,
        oh,
        ow,
    );
    Tensor::new(with_spatial(bands.ll.shape(), 2 * oh, 2 * ow), data)
}

impl WaveletPyramid {
    /// Cascade `cfg.levels` analysis steps, re-applying the transform to LL.
    pub fn decompose(image: &Tensor, cfg: WaveletConfig) -> Result<Self> {
        let (_, h, w) = spatial(image)?;
        cfg.check(h, w)?;
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut current = image.clone();
        for _ in 0..cfg.levels {
            let Bands { ll, lh, hl, hh } = dwt2(&current)?;
            levels.push(DetailBands { lh, hl, hh });
            current = ll;
        }
        Ok(WaveletPyramid { levels, ll: current })
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut current = self.ll.clone();
        for level in self.levels.iter().rev() {
            current = idwt2(&Bands {
                ll: current,
                lh: level.lh.clone(),
                hl: level.hl.clone(),
                hh: level.hh.clone(),
            })?;
        }
        Ok(current)
    }

    /// Detail bands of all levels in cascade order (lh, hl, hh per level).
    pub fn high_bands(&self) -> Vec<Tensor> {
        self.levels
            .iter()
            .flat_map(|l| [l.lh.clone(), l.hl.clone(), l.hh.clone()])
            .collect()
    }
}

/// High-frequency bands Ψ_p^H: detail bands of every level `1..=p`, final LL excluded.
pub fn high_bands(image: &Tensor, cfg: WaveletConfig) -> Result<Vec<Tensor>> {
    Ok(WaveletPyramid::decompose(image, cfg)?.high_bands())
}

/// Flattened detail coefficients per sample: `[B, ...]` → `[B, K]`.
///
/// Per sample the layout is level-major, then band (lh, hl, hh), then the
/// remaining axes in row-major order.
pub fn high_band_coeffs(batch: &Tensor, levels: usize) -> Result<Tensor> {
    let cfg = WaveletConfig::new(levels)?;
    if batch.ndim() < 3 {
        return Err(Error::dim(
            "high_band_coeffs",
            format!("expected a batch [B, ..., H, W], got {:?}", batch.shape()),
        ));
    }
    let b = batch.shape()[0];
    let (planes_total, h, w) = spatial(batch)?;
    cfg.check(h, w)?;
    let planes = planes_total / b;
    let per_sample = planes * h * w;
    let k = detail_count(planes, h, w, levels);
    let mut out = Vec::with_capacity(b * k);
    for s in 0..b {
        let mut current = batch.data()[s * per_sample..(s + 1) * per_sample].to_vec();
        let (mut ch, mut cw) = (h, w);
        for _ in 0..levels {
            let [ll, lh, hl, hh] = analyze(&current, planes, ch, cw);
            out.extend_from_slice(&lh);
            out.extend_from_slice(&hl);
            out.extend_from_slice(&hh);
            current = ll;
            ch /= 2;
            cw /= 2;
        }
    }
    Tensor::new(vec![b, k], out)
}

fn detail_count(planes: usize, h: usize, w: usize, levels: usize) -> usize {
    (1..=levels).map(|l| 3 * planes * (h >> l) * (w >> l)).sum()
}

/// Adjoint (= inverse with a zero final LL) of [`high_band_coeffs`].
pub fn high_band_coeffs_adjoint(grad: &Tensor, input_shape: &[usize], levels: usize) -> Result<Tensor> {
    let b = input_shape[0];
    let nd = input_shape.len();
    let (h, w) = (input_shape[nd - 2], input_shape[nd - 1]);
    let planes: usize = input_shape[1..nd - 2].iter().product();
    let k = detail_count(planes, h, w, levels);
    if grad.shape() != [b, k] {
        return Err(Error::dim(
            "high_band_coeffs_adjoint",
            format!("gradient shape {:?} does not match [{b}, {k}]", grad.shape()),
        ));
    }
    // Offsets of each level's block inside a sample's coefficient row.
    let mut offsets = Vec::with_capacity(levels);
    let mut off = 0;
    for l in 1..=levels {
        offsets.push(off);
        off += 3 * planes * (h >> l) * (w >> l);
    }
    let mut out = Vec::with_capacity(b * planes * h * w);
    for s in 0..b {
        let row = &grad.data()[s * k..(s + 1) * k];
        let (dh, dw) = (h >> levels, w >> levels);
        let mut current = vec![0.0; planes * dh * dw];
        for l in (1..=levels).rev() {
            let n = planes * (h >> l) * (w >> l);
            let base = offsets[l - 1];
            current = synthesize(
                [
                    &current,
                    &row[base..base + n],
                    &row[base + n..base + 2 * n],
                    &row[base + 2 * n..base + 3 * n],
                ],
                planes,
                h >> l,
                w >> l,
            );
        }
        out.extend_from_slice(&current);
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// L_w^p on the tape: mean absolute difference between the high bands of the
/// attack output and the (constant) victim output, over all band elements and
/// the batch. Differentiable with respect to `attack_out`.
pub fn wavelet_reg_loss(
    tape: &mut Tape,
    attack_out: NodeId,
    victim_out: &Tensor,
    cfg: WaveletConfig,
) -> Result<NodeId> {
    tape.value(attack_out)
        .expect_same_shape(victim_out, "wavelet_reg_loss")?;
    let attack_bands = tape.wavelet_high_bands(attack_out, cfg.levels)?;
    let victim_bands = tape.constant(high_band_coeffs(victim_out, cfg.levels)?);
    tape.l1(attack_bands, victim_bands)
}

/// Value-only L_w^p between two image batches.
pub fn wavelet_reg_value(a: &Tensor, b: &Tensor, cfg: WaveletConfig) -> Result<f64> {
    a.expect_same_shape(b, "wavelet_reg_value")?;
    let (ca, cb) = (high_band_coeffs(a, cfg.levels)?, high_band_coeffs(b, cfg.levels)?);
    Ok(ca.data().iter().zip(cb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / ca.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, CoordSample, ParamGroup};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![1, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn constant_block_has_no_detail() {
        let b = dwt2(&img(2, 2, &[1.0; 4])).unwrap();
        assert_eq!(b.ll.data(), &[2.0]);
        assert_eq!(
            (b.lh.data(), b.hl.data(), b.hh.data()),
            (&[0.0][..], &[0.0][..], &[0.0][..])
        );
        assert_eq!(idwt2(&b).unwrap(), img(2, 2, &[1.0; 4]));
    }

    #[test]
    fn ramp_block_bands() {
        let x = img(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = dwt2(&x).unwrap();
        assert_eq!(b.ll.data(), &[5.0]);
        assert_eq!(b.lh.data(), &[-2.0]);
        assert_eq!(b.hl.data(), &[-1.0]);
        assert_eq!(b.hh.data(), &[0.0]);
        assert_eq!(idwt2(&b).unwrap(), x);
    }

    #[test]
    fn odd_axis_is_named() {
        let err = dwt2(&Tensor::zeros(&[1, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let err = dwt2(&Tensor::zeros(&[1, 4, 5])).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn band_shape_mismatch_is_rejected() {
        let b = dwt2(&Tensor::zeros(&[1, 4, 4])).unwrap();
        let bad = Bands {
            hh: Tensor::zeros(&[1, 1, 2]),
            ..b
        };
        assert!(matches!(idwt2(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn energy_is_conserved_on_random_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let b = dwt2(&x).unwrap();
        let energy = b.ll.sq_norm() + b.lh.sq_norm() + b.hl.sq_norm() + b.hh.sq_norm();
        assert!((energy - x.sq_norm()).abs() / x.sq_norm() < 1e-12);
    }

    #[test]
    fn round_trip_random_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let y = idwt2(&dwt2(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn high_band_shapes() {
        let x = Tensor::full(&[1, 8, 8], 0.3);
        let cfg2 = WaveletConfig::new(2).unwrap();
        let bands = high_bands(&x, cfg2).unwrap();
        assert_eq!(bands.len(), 6);
        for (i, b) in bands.iter().enumerate() {
            let side = if i < 3 { 4 } else { 2 };
            assert_eq!(b.shape(), &[1, side, side]);
            assert!(b.data().iter().all(|&v| v.abs() < 1e-15));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::randn(&[1, 8, 8], 0.0, 1.0, &mut rng);
        let one = high_bands(&r, WaveletConfig::new(1).unwrap()).unwrap();
        let d = dwt2(&r).unwrap();
        assert_eq!(one, vec![d.lh, d.hl, d.hh]);
        assert!(high_bands(&Tensor::zeros(&[1, 12, 8]), WaveletConfig::new(3).unwrap()).is_err());
    }

    #[test]
    fn reg_loss_examples() {
        let cfg = WaveletConfig::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::randn(&[2, 1, 8, 8], 0.0, 0.5, &mut rng);
        assert_eq!(wavelet_reg_value(&v, &v, cfg).unwrap(), 0.0);
        let c1 = Tensor::full(&[2, 1, 8, 8], 0.7);
        let c2 = Tensor::full(&[2, 1, 8, 8], -0.2);
        assert!(wavelet_reg_value(&c1, &c2, cfg).unwrap().abs() < 1e-15);

        // Checkerboard of amplitude ε: only hh sees it, each hh coefficient is 2ε,
        // so the mean over lh/hl/hh elements is 2ε/3.
        let eps = 0.05;
        let mut a = v.clone();
        for (idx, x) in a.data_mut().iter_mut().enumerate() {
            let (i, j) = ((idx / 8) % 8, idx % 8);
            *x += if (i + j) % 2 == 0 { eps } else { -eps };
        }
        let got = wavelet_reg_value(&a, &v, cfg).unwrap();
        assert!((got - 2.0 * eps / 3.0).abs() < 1e-12, "{got}");

        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let l = wavelet_reg_loss(&mut tape, an, &v, cfg).unwrap();
        assert!((tape.value(l).item() - got).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_gradient_matches_finite_differences() {
        let cfg = WaveletConfig::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let victim = Tensor::randn(&[2, 1, 8, 8], 0.0, 0.5, &mut rng);
        let attack = Tensor::randn(&[2, 1, 8, 8], 0.0, 0.5, &mut rng);
        let mut group = ParamGroup::new("x", vec![("x".into(), attack)]).unwrap();
        let mut tape = Tape::new();
        let vars = group.register(&mut tape, true);
        let l = wavelet_reg_loss(&mut tape, vars.get(0), &victim, cfg).unwrap();
        let analytic = tape.backward(l).unwrap().for_group(&vars, &group);
        let err = finite_diff_check(
            &mut group,
            &analytic,
            |g| wavelet_reg_value(&g.params[0].1, &victim, cfg),
            1e-6,
            CoordSample::All,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_and_energy(half_h in 1usize..=32, half_w in 1usize..=32, c in 1usize..=3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[c, 2 * half_h, 2 * half_w], 0.0, 1.0, &mut rng);
            let bands = dwt2(&x).unwrap();
            prop_assert!(idwt2(&bands).unwrap().max_abs_diff(&x) < 1e-10);
            let e = bands.ll.sq_norm() + bands.lh.sq_norm() + bands.hl.sq_norm() + bands.hh.sq_norm();
            prop_assert!((e - x.sq_norm()).abs() / x.sq_norm() < 1e-10);
        }

        #[test]
        fn constant_shift_leaves_loss_unchanged(shift in -1.0f64..1.0, seed in any::<u64>()) {
            let cfg = WaveletConfig::new(2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[1, 1, 8, 8], 0.0, 0.5, &mut rng);
            let b = Tensor::randn(&[1, 1, 8, 8], 0.0, 0.5, &mut rng);
            let shifted = a.map(|v| v + shift);
            let (ha, hs) = (high_band_coeffs(&a, 2).unwrap(), high_band_coeffs(&shifted, 2).unwrap());
            prop_assert!(ha.max_abs_diff(&hs) < 1e-12);
            let base = wavelet_reg_value(&a, &b, cfg).unwrap();
            prop_assert!((wavelet_reg_value(&shifted, &b, cfg).unwrap() - base).abs() < 1e-12);
            prop_assert_eq!(base, wavelet_reg_value(&b, &a, cfg).unwrap());
        }
    }
}
