//! Fusion objective: structural similarity, object-aware pixel intensity and
//! multi-scale high-pass texture terms.
//!
//! All image arguments are single-channel `[H, W]` tensors with values in
//! `[0, 1]`. Norms are averaged over pixels so the loss weights do not depend
//! on resolution.

use serde::{Deserialize, Serialize};

use crate::cfdp::BoxSet;
use crate::error::{Error, Result};
use crate::numerics::{blur_tensor, gaussian_kernel, Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SALIENCY_EPS: f64 = 1e-8;
pub const GRAD_SCALES: [usize; 3] = [3, 5, 7];

/// Weights of the three fusion terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta1: 1.0,
            eta2: 10.0,
            eta3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.eta1, self.eta2, self.eta3];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with one positive, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Binary `[H, W]` mask of ground-truth box interiors.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask(Tensor);

impl ObjectMask {
    /// A pixel belongs to the mask when its centre lies inside any box.
    pub fn from_boxes(boxes: &BoxSet, height: usize, width: usize) -> Self {
        let mut m = Tensor::zeros(&[height, width]);
        let data = m.data_mut();
        for b in boxes.iter() {
            let (x0, y0, x1, y1) = b.corners();
            for i in 0..height {
                let py = (i as f64 + 0.5) / height as f64;
                if py < y0 || py > y1 {
                    continue;
                }
                for j in 0..width {
                    let px = (j as f64 + 0.5) / width as f64;
                    if px >= x0 && px <= x1 {
                        data[i * width + j] = 1.0;
                    }
                }
            }
        }
        Self(m)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 || t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::domain("object_mask", "mask must be a binary [H, W] tensor"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Convex per-pixel modality weights, `w1 + w2 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

fn check_2d(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn ssim_kernel() -> Vec<f64> {
    gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
}

/// Mean local SSIM over Gaussian windows. Windows are truncated at the
/// border and renormalised.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("ssim", format!("{sa:?} vs {sb:?}")));
    }
    let k = ssim_kernel();
    let mu_a = a.blur(&k)?;
    let mu_b = b.blur(&k)?;
    let mu_aa = mu_a.square()?;
    let mu_bb = mu_b.square()?;
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = a.square()?.blur(&k)?.sub(mu_aa)?;
    let var_b = b.square()?.blur(&k)?.sub(mu_bb)?;
    let cov = a.mul(b)?.blur(&k)?.sub(mu_ab)?;
    let num = mu_ab
        .affine(2.0, SSIM_C1)?
        .mul(cov.affine(2.0, SSIM_C2)?)?;
    let den = mu_aa
        .add(mu_bb)?
        .affine(1.0, SSIM_C1)?
        .mul(var_a.add(var_b)?.affine(1.0, SSIM_C2)?)?;
    num.div(den)?.mean()
}

/// [`ssim`] on plain tensors.
pub fn ssim_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_2d("ssim", a, b)?;
    let tape = Tape::new();
    Ok(ssim(tape.constant(a.clone()), tape.constant(b.clone()))?.item())
}

/// `(1 - SSIM(u, x)) / 2 + (1 - SSIM(u, y)) / 2`.
pub fn ssim_loss<'t>(u: Var<'t>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let sx = ssim(u, x)?;
    let sy = ssim(u, y)?;
    sx.add(sy)?.affine(-0.5, 1.0)
}

/// 0..=255 quantisation used by histograms.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalised 256-bin histogram.
pub fn histogram(img: &Tensor) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in img.data() {
        h[quantize(v) as usize] += 1.0;
    }
    let n = img.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Histogram-distance saliency: for each pixel, the expected absolute
/// grey-level distance to a pixel drawn from the image's histogram.
pub fn saliency_map(img: &Tensor) -> Tensor {
    let h = histogram(img);
    let table: Vec<f64> = (0..256)
        .map(|l: i32| {
            h.iter()
                .enumerate()
                .map(|(i, p)| p * (l - i as i32).abs() as f64)
                .sum()
        })
        .collect();
    img.map(|v| table[quantize(v) as usize])
}

pub fn saliency_weights(x: &Tensor, y: &Tensor) -> Result<SaliencyWeights> {
    check_2d("saliency_weights", x, y)?;
    let sx = saliency_map(x);
    let sy = saliency_map(y);
    let w1 = sx.zip_map(&sy, |a, b| a / (a + b + SALIENCY_EPS))?;
    let w2 = w1.map(|v| 1.0 - v);
    Ok(SaliencyWeights { w1, w2 })
}

/// Object term against `max(w1 x, w2 y)` inside the mask plus background
/// term against their average outside it, both mean absolute errors over
/// all pixels.
pub fn pixel_loss<'t>(
    u: Var<'t>,
    x: &Tensor,
    y: &Tensor,
    mask: &ObjectMask,
    w: &SaliencyWeights,
) -> Result<Var<'t>> {
    check_2d("pixel_loss", x, y)?;
    let m = mask.tensor();
    if u.shape() != x.shape() || m.shape() != x.shape() || w.w1.shape() != x.shape() {
        return Err(Error::shape(
            "pixel_loss",
            format!("u {:?}, sources {:?}, mask {:?}", u.shape(), x.shape(), m.shape()),
        ));
    }
    let wx = w.w1.zip_map(x, |a, b| a * b)?;
    let wy = w.w2.zip_map(y, |a, b| a * b)?;
    let t_obj = wx.zip_map(&wy, f64::max)?;
    let t_bg = wx.zip_map(&wy, |a, b| (a + b) / 2.0)?;
    let tape = u.tape();
    let obj = u
        .sub(tape.constant(t_obj))?
        .mul(tape.constant(m.clone()))?
        .abs()?
        .mean()?;
    let bg = u
        .sub(tape.constant(t_bg))?
        .mul(tape.constant(m.map(|v| 1.0 - v)))?
        .abs()?
        .mean()?;
    obj.add(bg)
}

/// Gaussian sigma used for a `k`-tap high-pass (OpenCV's default rule).
pub fn grad_sigma(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// `v - blur_k(v)`.
pub fn high_pass(img: &Tensor, k: usize) -> Result<Tensor> {
    let b = blur_tensor(img, &gaussian_kernel(k, grad_sigma(k)))?;
    img.zip_map(&b, |a, c| a - c)
}

/// Sum over `k in {3, 5, 7}` of the mean squared difference between the
/// high-pass of `u` and the elementwise max of the high-passes of `x`, `y`.
pub fn gradient_loss<'t>(u: Var<'t>, x: &Tensor, y: &Tensor) -> Result<Var<'t>> {
    check_2d("gradient_loss", x, y)?;
    if u.shape() != x.shape() {
        return Err(Error::shape("gradient_loss", format!("{:?} vs {:?}", u.shape(), x.shape())));
    }
    let tape = u.tape();
    let mut total: Option<Var<'t>> = None;
    for k in GRAD_SCALES {
        let kernel = gaussian_kernel(k, grad_sigma(k));
        let target = high_pass(x, k)?.zip_map(&high_pass(y, k)?, f64::max)?;
        let hp = u.sub(u.blur(&kernel)?)?;
        let term = hp.sub(tape.constant(target))?.square()?.mean()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

/// Weighted fusion loss with its unweighted components.
pub struct FusionLoss<'t> {
    pub total: Var<'t>,
    pub ssim: f64,
    pub pixel: f64,
    pub grad: f64,
}

pub fn fusion_loss<'t>(
    u: Var<'t>,
    x: &Tensor,
    y: &Tensor,
    mask: &ObjectMask,
    weights: &LossWeights,
) -> Result<FusionLoss<'t>> {
    weights.validate()?;
    let tape = u.tape();
    let sw = saliency_weights(x, y)?;
    let l_ssim = ssim_loss(u, tape.constant(x.clone()), tape.constant(y.clone()))?;
    let l_pix = pixel_loss(u, x, y, mask, &sw)?;
    let l_grad = gradient_loss(u, x, y)?;
    let total = l_ssim
        .scale(weights.eta1)?
        .add(l_pix.scale(weights.eta2)?)?
        .add(l_grad.scale(weights.eta3)?)?;
    Ok(FusionLoss {
        total,
        ssim: l_ssim.item(),
        pixel: l_pix.item(),
        grad: l_grad.item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfdp::BBox;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[h, w], |i| f(i / w, i % w))
    }

    #[test]
    fn self_similarity_is_one() {
        let x = img(16, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert!((ssim_value(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_constants_are_similar() {
        let a = Tensor::full(&[12, 12], 0.5);
        assert!((ssim_value(&a, &a.clone()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_ramp_anticorrelates() {
        let x = img(20, 20, |_, j| 0.5 + (j as f64 - 9.5) / 40.0);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim_value(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(ssim_value(&Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4, 5])).is_err());
    }

    #[test]
    fn ssim_loss_zero_for_identical() {
        let x = img(10, 10, |i, j| ((i + j) % 4) as f64 / 4.0);
        let tape = Tape::new();
        let v = tape.constant(x);
        assert!(ssim_loss(v, v, v).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn saliency_examples() {
        let c = Tensor::full(&[4, 4], 0.3);
        assert!(saliency_map(&c).data().iter().all(|&v| v == 0.0));

        let half = img(4, 4, |i, _| if i < 2 { 0.0 } else { 1.0 });
        assert!(saliency_map(&half).data().iter().all(|&v| v == 127.5));

        let lvl = 200.0 / 255.0;
        let q = img(2, 2, |i, j| if i == 1 && j == 1 { lvl } else { 0.0 });
        let s = saliency_map(&q);
        assert!((s.at(&[0, 0]) - 50.0).abs() < 1e-12);
        assert!((s.at(&[1, 1]) - 150.0).abs() < 1e-12);
    }

    #[test]
    fn saliency_weight_limits() {
        let c = Tensor::full(&[4, 4], 0.2);
        let w = saliency_weights(&c, &c).unwrap();
        assert!(w.w1.data().iter().all(|&v| v == 0.0));
        assert!(w.w2.data().iter().all(|&v| v == 1.0));

        let x = img(4, 4, |i, _| if i < 2 { 0.0 } else { 1.0 });
        let w = saliency_weights(&x, &x).unwrap();
        assert!(w.w1.data().iter().all(|&v| (v - 0.5).abs() < 1e-9));

        let w = saliency_weights(&x, &c).unwrap();
        assert!(w.w1.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn pixel_loss_exact_targets() {
        let x = img(6, 6, |i, j| ((i * 5 + j) % 7) as f64 / 7.0);
        let y = img(6, 6, |i, j| ((i + j * 3) % 5) as f64 / 5.0);
        let w = saliency_weights(&x, &y).unwrap();
        let tmax = w.w1.zip_map(&x, |a, b| a * b).unwrap().zip_map(
            &w.w2.zip_map(&y, |a, b| a * b).unwrap(),
            f64::max,
        ).unwrap();
        let ones = ObjectMask::from_tensor(Tensor::ones(&[6, 6])).unwrap();
        let tape = Tape::new();
        let l = pixel_loss(tape.constant(tmax), &x, &y, &ones, &w).unwrap();
        assert!(l.item().abs() < 1e-15);

        let tmean = w.w1.zip_map(&x, |a, b| a * b).unwrap().zip_map(
            &w.w2.zip_map(&y, |a, b| a * b).unwrap(),
            |a, b| (a + b) / 2.0,
        ).unwrap();
        let zeros = ObjectMask::from_tensor(Tensor::zeros(&[6, 6])).unwrap();
        let l = pixel_loss(tape.constant(tmean), &x, &y, &zeros, &w).unwrap();
        assert!(l.item().abs() < 1e-15);
    }

    #[test]
    fn pixel_loss_two_by_two_by_hand() {
        // x levels {0, 255, 0, 255} -> S_x = 127.5 everywhere
        // y constant -> S_y = 0, so w1 ~ 1, w2 ~ 0
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = Tensor::full(&[2, 2], 0.4);
        let w = saliency_weights(&x, &y).unwrap();
        let w1 = 127.5 / (127.5 + SALIENCY_EPS);
        let w2 = 1.0 - w1;
        let u = Tensor::new(vec![2, 2], vec![0.5, 0.2, 0.9, 0.1]).unwrap();
        let mask = ObjectMask::from_tensor(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        // object pixel (0,0): target max(w1*0, w2*0.4) = w2*0.4
        let obj = (0.5 - w2 * 0.4).abs() / 4.0;
        // background pixels: target (w1*x + w2*0.4)/2
        let bg = [(0.2, 1.0), (0.9, 0.0), (0.1, 1.0)]
            .iter()
            .map(|&(uv, xv)| (uv - (w1 * xv + w2 * 0.4) / 2.0).abs())
            .sum::<f64>()
            / 4.0;
        let tape = Tape::new();
        let l = pixel_loss(tape.constant(u), &x, &y, &mask, &w).unwrap();
        assert!((l.item() - (obj + bg)).abs() < 1e-14);
    }

    #[test]
    fn gradient_loss_vanishes() {
        let x = img(9, 9, |i, j| ((i * 3 + j) % 5) as f64 / 5.0);
        let tape = Tape::new();
        let l = gradient_loss(tape.constant(x.clone()), &x, &x).unwrap();
        assert!(l.item().abs() < 1e-15);
        let c = Tensor::full(&[9, 9], 0.6);
        let l = gradient_loss(tape.constant(c.clone()), &c, &Tensor::full(&[9, 9], 0.1)).unwrap();
        assert!(l.item().abs() < 1e-15);
    }

    #[test]
    fn weights_project_components() {
        let x = img(8, 8, |i, j| ((i * 5 + j * 2) % 9) as f64 / 9.0);
        let y = img(8, 8, |i, j| ((i + j) % 3) as f64 / 3.0);
        let u = img(8, 8, |i, j| ((i * j) % 7) as f64 / 7.0);
        let mask = ObjectMask::from_boxes(&BoxSet::new(vec![BBox::new(0.5, 0.5, 0.4, 0.4)]), 8, 8);
        let tape = Tape::new();
        let uv = tape.constant(u);
        let only_ssim = LossWeights { eta1: 1.0, eta2: 0.0, eta3: 0.0 };
        let f = fusion_loss(uv, &x, &y, &mask, &only_ssim).unwrap();
        let direct = ssim_loss(uv, tape.constant(x.clone()), tape.constant(y.clone())).unwrap();
        assert_eq!(f.total.item(), direct.item());
        assert!(LossWeights { eta1: 0.0, eta2: 0.0, eta3: 0.0 }.validate().is_err());
        assert!(LossWeights { eta1: -1.0, eta2: 1.0, eta3: 0.0 }.validate().is_err());
    }

    #[test]
    fn mask_covers_box_interior() {
        let m = ObjectMask::from_boxes(&BoxSet::new(vec![BBox::new(0.25, 0.25, 0.5, 0.5)]), 4, 4);
        let expect = [1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
        assert_eq!(m.tensor().data(), &expect);
    }
}
