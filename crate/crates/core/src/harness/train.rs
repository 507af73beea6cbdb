use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfdp::{self, BoxSet, DiffusionSchedule, ScaledLatent};
use crate::error::{Error, Result};
use crate::gmta::{self, StepOutcome};
use crate::losses::{fusion_loss, FusionLoss, ObjectMask};
use crate::metrics::{MetricsReport, Predictions};
use crate::numerics::{BoundParams, Tape, Tensor, Var};
use crate::optim::Optimizer;
use crate::orppt;
use crate::rng::{self, Stream};
use crate::synthdata::Scene;

use super::config::RunConfig;
use super::model::{detector_forward, fuse_image, ToyModel};

/// One training step as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub scene: String,
    pub t: usize,
    pub l_u: f64,
    pub l_d: f64,
    pub l_ssim: f64,
    pub l_pixel: f64,
    pub l_grad: f64,
    /// `None` when the gradient matrix is rank deficient.
    pub kappa_before: Option<f64>,
    pub kappa_after: Option<f64>,
    pub singular_values: Vec<f64>,
    pub grad_norm_u: f64,
    pub grad_norm_d: f64,
    pub aligned: bool,
    /// Column norms of the matrix that was combined into the shared update.
    pub column_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    /// Mean of `|g_d| / |g_u|` over steps with a non-zero fusion gradient.
    pub fn mean_grad_ratio(&self) -> f64 {
        let ratios: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.grad_norm_u > 0.0)
            .map(|r| r.grad_norm_d / r.grad_norm_u)
            .collect();
        if ratios.is_empty() {
            return f64::NAN;
        }
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }

    /// Largest relative gap between combined column norms on aligned
    /// full-rank steps. Rank-deficient steps (one task without a shared
    /// gradient) have nothing to equalise and are skipped.
    pub fn max_aligned_norm_gap(&self) -> f64 {
        self.records
            .iter()
            .filter(|r| r.aligned && r.kappa_before.is_some())
            .map(|r| {
                let hi = r.column_norms.iter().cloned().fold(0.0, f64::max);
                let lo = r.column_norms.iter().cloned().fold(f64::INFINITY, f64::min);
                (hi - lo) / hi.max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Fusion loss of the fused image plus the pyramid the detector reads.
pub fn fusion_part<'t>(bp: &BoundParams<'t>, cfg: &RunConfig, scene: &Scene) -> Result<(Vec<Var<'t>>, FusionLoss<'t>)> {
    let tape = bp.get("detector.fc1.w")?.tape();
    let (x, y) = (&scene.visible, &scene.infrared);
    let s = x.shape();
    let ff = orppt::fuse_forward(bp, cfg.orppt(), tape.constant(x.clone()), tape.constant(y.clone()))?;
    let mask = ObjectMask::from_boxes(&scene.boxes, s[0], s[1]);
    let fl = fusion_loss(ff.fused, x, y, &mask, &cfg.loss_weights)?;
    Ok((ff.pyramid, fl))
}

/// Detector loss on boxes `z0` noised to step `t` with `eps`.
pub fn detection_part<'t>(
    bp: &BoundParams<'t>,
    cfg: &RunConfig,
    schedule: &DiffusionSchedule,
    pyramid: &[Var<'t>],
    z0: &BoxSet,
    t: usize,
    eps: &Tensor,
) -> Result<Var<'t>> {
    let d = &cfg.diffusion;
    let z_t = cfdp::forward_noise(z0, t, eps, schedule, d.scale)?;
    let pred = detector_forward(bp, &cfg.model, pyramid, &z_t.latent, t, schedule, d.scale)?;
    let target = ScaledLatent::from_boxes(&z0.to_tensor()?, d.scale).latent;
    cfdp::detector_loss(pred, pred.tape().constant(target))
}

/// Ground truth padded to `N` boxes, a step `t` in `1..=T` and unit noise.
pub fn draw_diffusion_inputs(cfg: &RunConfig, scene: &Scene, r: &mut Stream) -> (BoxSet, usize, Tensor) {
    let d = &cfg.diffusion;
    let z0 = cfdp::pad_boxes(&scene.boxes, d.proposals, d.pad_jitter, r);
    let t = r.random_range(1..=d.steps);
    let eps = rng::normal_tensor(r, &[d.proposals, 4]);
    (z0, t, eps)
}

pub fn schedule_of(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(cfg.diffusion.steps, cfg.diffusion.schedule)
}

/// Joint training. Each step draws one scene, computes both task losses and
/// applies one [`gmta::gmta_step`] (plain weighted sum when GMTA is off).
pub fn train(cfg: &RunConfig, scenes: &[Scene]) -> Result<(ToyModel, TrainLog)> {
    cfg.validate()?;
    let mut model = ToyModel::init(cfg.model.clone(), cfg.seed)?;
    let mut log = TrainLog::default();
    if cfg.iterations == 0 {
        return Ok((model, log));
    }
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let schedule = schedule_of(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    for step in 0..cfg.iterations {
        opt.set_lr_scale(cfg.lr_schedule.factor(step, cfg.iterations));
        let mut r = rng::stream(rng::derive(cfg.seed, &[0x7a1, step as u64]));
        let scene = &scenes[r.random_range(0..scenes.len())];
        let (z0, t, eps) = draw_diffusion_inputs(cfg, scene, &mut r);

        let tape = Tape::new();
        let bp = model.params.bind(&tape);
        let (pyramid, fl) = fusion_part(&bp, cfg, scene)?;
        let loss_d = detection_part(&bp, cfg, &schedule, &pyramid, &z0, t, &eps)?;
        let (l_u, l_d) = (fl.total.item(), loss_d.item());
        if !l_u.is_finite() || !l_d.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("L_u = {l_u}, L_d = {l_d}") });
        }
        let out: StepOutcome = gmta::gmta_step(&mut model.params, &bp, fl.total, loss_d, &cfg.gmta, step, &mut opt)?;
        log.records.push(StepRecord {
            step,
            scene: scene.id.clone(),
            t,
            l_u,
            l_d,
            l_ssim: fl.ssim,
            l_pixel: fl.pixel,
            l_grad: fl.grad,
            kappa_before: finite_or_none(out.kappa_before),
            kappa_after: finite_or_none(out.kappa_after),
            singular_values: out.singular_values,
            grad_norm_u: out.grad_norm_u,
            grad_norm_d: out.grad_norm_d,
            aligned: out.aligned,
            column_norms: out.used_column_norms,
        });
    }
    Ok((model, log))
}

/// Mean `(L_u, L_d)` over `scenes` with `cfg.eval_draws` fixed diffusion draws
/// per scene, identical for every model evaluated with the same seed.
pub fn held_out_losses(model: &ToyModel, cfg: &RunConfig, scenes: &[Scene], seed: u64) -> Result<(f64, f64)> {
    if scenes.is_empty() {
        return Err(Error::Config("no held-out scenes".into()));
    }
    let schedule = schedule_of(cfg)?;
    let (mut su, mut sd, mut n) = (0.0, 0.0, 0.0);
    for (i, scene) in scenes.iter().enumerate() {
        let mut r = rng::stream(rng::derive(seed, &[0xe7a1, i as u64]));
        let tape = Tape::new();
        let bp = model.params.bind(&tape);
        let (pyramid, fl) = fusion_part(&bp, cfg, scene)?;
        su += fl.total.item();
        for _ in 0..cfg.eval_draws {
            let (z0, t, eps) = draw_diffusion_inputs(cfg, scene, &mut r);
            sd += detection_part(&bp, cfg, &schedule, &pyramid, &z0, t, &eps)?.item();
        }
        n += 1.0;
    }
    Ok((su / n, sd / (n * cfg.eval_draws as f64)))
}

/// Run DDIM sampling with an arbitrary denoiser and score the boxes by
/// self-consistency: a box the denoiser maps to itself at `t = 1` scores 1.
pub fn detect_with<F>(mut denoiser: F, cfg: &RunConfig, seed: u64) -> Result<(BoxSet, Vec<f64>)>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let d = &cfg.diffusion;
    let schedule = schedule_of(cfg)?;
    let boxes = cfdp::sample(&mut denoiser, d.proposals, d.sampling_steps, &schedule, d.scale, seed)?;
    let z = ScaledLatent::from_boxes(&boxes.to_tensor()?, d.scale).latent;
    let again = denoiser(&z, 1)?;
    let max_residual = 4.0 * d.scale;
    let scores = z
        .data()
        .chunks(4)
        .zip(again.data().chunks(4))
        .map(|(a, b)| {
            let r = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let s = 1.0 - r / max_residual;
            if s.is_finite() {
                s.clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok((boxes, scores))
}

/// Boxes and scores for one scene using the model's detector.
pub fn detect(model: &ToyModel, cfg: &RunConfig, scene: &Scene, seed: u64) -> Result<(BoxSet, Vec<f64>)> {
    let tape = Tape::new();
    let bp = model.params.bind(&tape);
    let x = tape.constant(scene.visible.clone());
    let y = tape.constant(scene.infrared.clone());
    let pyramid = orppt::backbone_forward(&bp, &model.config.orppt, x, y)?;
    let scale = cfg.diffusion.scale;
    let schedule = schedule_of(cfg)?;
    let denoiser = |z: &Tensor, t: usize| -> Result<Tensor> {
        let v = detector_forward(&bp, &model.config, &pyramid, z, t, &schedule, scale)?.value();
        Ok((*v).clone())
    };
    detect_with(denoiser, cfg, seed)
}

/// Per-scene sampling seed for detection.
pub fn detect_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, &[0xde7, index as u64])
}

/// Fusion and detection metrics of `model` on `scenes`.
pub fn evaluate(model: &ToyModel, cfg: &RunConfig, scenes: &[Scene], seed: u64) -> Result<MetricsReport> {
    let mut fused = Vec::with_capacity(scenes.len());
    let mut preds = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        fused.push(fuse_image(model, &s.visible, &s.infrared)?);
        let (b, sc) = detect(model, cfg, s, detect_seed(seed, i))?;
        preds.push(Predictions::new(b, sc)?);
    }
    MetricsReport::build(
        scenes
            .iter()
            .zip(&fused)
            .zip(&preds)
            .map(|((s, u), p)| (s.id.as_str(), Some(u), &s.visible, &s.infrared, p, &s.boxes)),
    )
}
