use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfdp::{BoxSet, DiffusionSchedule, ScaledLatent};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::orppt::{self, OrpptConfig};
use crate::rng::{self, Stream};

/// Box-denoising head: each box pools a `grid x grid` layout of cells from
/// one pyramid level, appends its noisy coordinates and a sinusoidal
/// embedding of `t / T`, and a two-layer perceptron predicts the clean box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Pyramid level pooled from (1-based).
    pub level: usize,
    pub grid: usize,
    pub hidden: usize,
    /// Even width of the time embedding.
    pub time_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { level: 2, grid: 3, hidden: 128, time_dim: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub orppt: OrpptConfig,
    pub detector: DetectorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.orppt.validate()?;
        let d = &self.detector;
        if d.level == 0 || d.level > self.orppt.levels() {
            return Err(Error::Config(format!(
                "detector level {} outside 1..={}",
                d.level,
                self.orppt.levels()
            )));
        }
        if d.grid == 0 || d.hidden == 0 || d.time_dim == 0 || d.time_dim % 2 != 0 {
            return Err(Error::Config("detector grid/hidden must be positive and time_dim even".into()));
        }
        Ok(())
    }

    fn detector_input(&self) -> usize {
        let d = &self.detector;
        d.grid * d.grid * self.orppt.backbone_channels[d.level - 1] + 4 + d.time_dim
    }
}

/// Shared backbone, fusion head and detector head in one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ToyModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(rng::derive(seed, &[0x1a17]));
        orppt::init_params(&config.orppt, &mut params, &mut r)?;
        init_detector(&config, &mut params, &mut r);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ToyModel = serde_json::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }

    /// Names of fusion-private parameters.
    pub fn fusion_private(&self) -> impl Iterator<Item = &str> {
        self.params.names().filter(|n| n.starts_with("fusion."))
    }

    /// Names of detector-private parameters.
    pub fn detector_private(&self) -> impl Iterator<Item = &str> {
        self.params.names().filter(|n| n.starts_with("detector."))
    }
}

fn init_detector(cfg: &ModelConfig, ps: &mut ParamSet, r: &mut Stream) {
    let (d_in, hid) = (cfg.detector_input(), cfg.detector.hidden);
    let he = (2.0 / d_in as f64).sqrt();
    ps.insert("detector.fc1.w", rng::normal_tensor(r, &[d_in, hid]).map(|v| v * he));
    ps.insert("detector.fc1.b", Tensor::zeros(&[hid]));
    let xavier = (1.0 / hid as f64).sqrt();
    ps.insert("detector.fc2.w", rng::normal_tensor(r, &[hid, 4]).map(|v| v * xavier));
    ps.insert("detector.fc2.b", Tensor::zeros(&[4]));
}

/// `[sin(s f_k)..., cos(s f_k)...]` of the diffusion progress `s = t / T`
/// with octave frequencies `f_k = 2^k pi / 2`, so every component varies
/// smoothly over the whole schedule.
pub fn time_embedding(progress: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64).collect();
    freqs
        .iter()
        .map(|f| (progress * f).sin())
        .chain(freqs.iter().map(|f| (progress * f).cos()))
        .collect()
}

/// Row-stochastic `[N * grid^2, fh * fw]` matrix averaging feature cells
/// inside each box cell. Cells covering no feature centre take the nearest
/// feature pixel.
pub fn pooling_matrix(boxes: &BoxSet, grid: usize, fh: usize, fw: usize) -> Tensor {
    let rows = boxes.len() * grid * grid;
    let mut data = vec![0.0; rows * fh * fw];
    for (bi, b) in boxes.iter().enumerate() {
        let (x0, y0, _, _) = b.corners();
        let (cw, ch) = (b.w / grid as f64, b.h / grid as f64);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = &mut data[(bi * grid * grid + gy * grid + gx) * fh * fw..][..fh * fw];
                let (cx0, cy0) = (x0 + gx as f64 * cw, y0 + gy as f64 * ch);
                let (cx1, cy1) = (cx0 + cw, cy0 + ch);
                let mut count = 0usize;
                for i in 0..fh {
                    let py = (i as f64 + 0.5) / fh as f64;
                    if py < cy0 || py > cy1 {
                        continue;
                    }
                    for j in 0..fw {
                        let px = (j as f64 + 0.5) / fw as f64;
                        if px >= cx0 && px <= cx1 {
                            row[i * fw + j] = 1.0;
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    let i = ((((cy0 + cy1) / 2.0) * fh as f64).floor().max(0.0) as usize).min(fh - 1);
                    let j = ((((cx0 + cx1) / 2.0) * fw as f64).floor().max(0.0) as usize).min(fw - 1);
                    row[i * fw + j] = 1.0;
                } else {
                    let inv = 1.0 / count as f64;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
    }
    Tensor::new(vec![rows, fh * fw], data).expect("pooling layout")
}

/// Predicted clean latent `[N, 4]` for noisy latent `z_t` at step `t`.
pub fn detector_forward<'t>(
    bp: &BoundParams<'t>,
    cfg: &ModelConfig,
    pyramid: &[Var<'t>],
    z_t: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    scale: f64,
) -> Result<Var<'t>> {
    let d = &cfg.detector;
    let s = z_t.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(Error::shape("detector", format!("latent must be [N, 4], got {s:?}")));
    }
    if t > schedule.steps() {
        return Err(Error::domain("detector", format!("timestep {t} outside 0..={}", schedule.steps())));
    }
    let n = s[0];
    let feat = pyramid
        .get(d.level - 1)
        .copied()
        .ok_or_else(|| Error::shape("detector", format!("pyramid has no level {}", d.level)))?;
    let fs = feat.shape();
    let (c, fh, fw) = (fs[0], fs[1], fs[2]);
    let tape = feat.tape();

    let boxes = BoxSet::from_tensor(&ScaledLatent { latent: z_t.clone(), scale }.unscale())?.clamped();
    let pool = tape.constant(pooling_matrix(&boxes, d.grid, fh, fw));
    let pooled = pool
        .matmul(feat.reshape(&[c, fh * fw])?.transpose()?)?
        .reshape(&[n, d.grid * d.grid * c])?;

    let emb = time_embedding(t as f64 / schedule.steps() as f64, d.time_dim);
    let extra = Tensor::from_fn(&[n, 4 + d.time_dim], |k| {
        let (r, col) = (k / (4 + d.time_dim), k % (4 + d.time_dim));
        if col < 4 {
            z_t.data()[r * 4 + col]
        } else {
            emb[col - 4]
        }
    });
    let input = pooled.concat(&[tape.constant(extra)], 1)?;
    let h = input
        .matmul(bp.get("detector.fc1.w")?)?
        .add_along(bp.get("detector.fc1.b")?, 1)?
        .relu()?;
    h.matmul(bp.get("detector.fc2.w")?)?
        .add_along(bp.get("detector.fc2.b")?, 1)
}

/// Fused image of one pair with the given model, off the training tape.
pub fn fuse_image(model: &ToyModel, visible: &Tensor, infrared: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bp = model.params.bind(&tape);
    let out = orppt::fuse_forward(&bp, &model.config.orppt, tape.constant(visible.clone()), tape.constant(infrared.clone()))?;
    let u = out.fused.value();
    Ok((*u).clone())
}
