//! Box diffusion: noise schedule, forward corruption of ground-truth boxes,
//! the l2 denoising objective and deterministic DDIM sampling from noise.
//!
//! Boxes are diffused in a signal-scaled space: `(2z - 1) * scale`, so that
//! normalised coordinates in `[0, 1]` span `[-scale, scale]`.

mod boxes;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use boxes::{BBox, BoxSet, MIN_EXTENT};

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::rng::{self, Stream};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Per-step noise coefficients for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * PI / 2.0).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let s = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * s, (0.02 * s).min(MAX_BETA));
                (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            hi
                        } else {
                            lo + (hi - lo) * i as f64 / (steps - 1) as f64
                        }
                    })
                    .collect()
            }
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product up to `t`; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (t == 0 && !allow_zero) {
            return Err(Error::domain(
                "diffusion",
                format!("timestep {t} outside 1..={}", self.steps()),
            ));
        }
        Ok(())
    }
}

/// Boxes mapped into the space the diffusion runs in.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledLatent {
    pub latent: Tensor,
    pub scale: f64,
}

impl ScaledLatent {
    pub fn from_boxes(z: &Tensor, scale: f64) -> Self {
        Self {
            latent: z.map(|v| (2.0 * v - 1.0) * scale),
            scale,
        }
    }

    pub fn unscale(&self) -> Tensor {
        let s = self.scale;
        self.latent.map(|v| (v / s + 1.0) / 2.0)
    }
}

/// Sample `z_t ~ q(z_t | z_0)` with the supplied standard-normal `eps`.
pub fn forward_noise(
    z0: &BoxSet,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
    scale: f64,
) -> Result<ScaledLatent> {
    schedule.check_t(t, true)?;
    let z = ScaledLatent::from_boxes(&z0.to_tensor()?, scale);
    if eps.shape() != z.latent.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("noise {:?} vs boxes {:?}", eps.shape(), z.latent.shape()),
        ));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ScaledLatent {
        latent: z.latent.zip_map(eps, |z, e| a * z + b * e)?,
        scale,
    })
}

/// `0.5 * mean((pred - target)^2)` over all coordinates.
pub fn detector_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    pred.sub(target)?.square()?.mean()?.scale(0.5)
}

/// Deterministic DDIM update from `t` to `t_prev` given a clean prediction.
pub fn ddim_step(
    z_t: &Tensor,
    pred_z0: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::domain("ddim_step", format!("t_prev {t_prev} must be < t {t}")));
    }
    schedule.check_t(t, false)?;
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    z_t.zip_map(pred_z0, |z, p| {
        let eps = (z - st * p) / nt;
        sp * p + np * eps
    })
}

/// Decreasing timesteps `T, ..., T/steps` followed by the `0` boundary.
pub fn time_grid(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return Err(Error::Config(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    let mut grid: Vec<usize> = (0..steps)
        .map(|i| ((total * (steps - i)) as f64 / steps as f64).round() as usize)
        .collect();
    grid.push(0);
    grid.dedup();
    Ok(grid)
}

/// Draw `n` boxes by iterating DDIM from pure noise.
///
/// `denoiser(z_t, t)` returns the predicted clean latent (scaled space). The
/// result is unscaled and clamped into valid box ranges.
pub fn sample<F>(
    mut denoiser: F,
    n: usize,
    steps: usize,
    schedule: &DiffusionSchedule,
    scale: f64,
    seed: u64,
) -> Result<BoxSet>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let grid = time_grid(schedule.steps(), steps)?;
    let mut z = rng::normal_tensor(&mut rng::stream(seed), &[n, 4]);
    for (i, pair) in grid.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let pred = denoiser(&z, t)?;
        if pred.shape() != z.shape() {
            return Err(Error::shape(
                "sample",
                format!("denoiser returned {:?} for {:?}", pred.shape(), z.shape()),
            ));
        }
        if !pred.all_finite() {
            return Err(Error::NonFinite {
                step: i,
                detail: format!("denoiser output at t={t}"),
            });
        }
        z = ddim_step(&z, &pred, t, t_prev, schedule)?;
    }
    let boxes = ScaledLatent { latent: z, scale }.unscale();
    Ok(BoxSet::from_tensor(&boxes)?.clamped())
}

/// Pad (or truncate) ground truth to exactly `n` boxes. Extra slots repeat the
/// ground truth cyclically with jitter of `jitter` times the box size; with
/// no ground truth the slots are uniform random boxes.
pub fn pad_boxes(gt: &BoxSet, n: usize, jitter: f64, rng: &mut Stream) -> BoxSet {
    (0..n)
        .map(|i| {
            if gt.is_empty() {
                return BBox::new(
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                )
                .clamped();
            }
            let b = gt.boxes()[i % gt.len()];
            if i < gt.len() {
                return b;
            }
            let mut j = || rng.random_range(-jitter..=jitter);
            BBox::new(
                b.cx + j() * b.w,
                b.cy + j() * b.h,
                b.w * (1.0 + j()),
                b.h * (1.0 + j()),
            )
            .clamped()
        })
        .collect()
}
