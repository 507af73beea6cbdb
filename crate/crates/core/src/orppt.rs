//! Multi-branch fusion network.
//!
//! A shared backbone turns each modality into a feature pyramid and the two
//! pyramids are summed level by level. Branch 0 mines pixel features straight
//! from the input pair; region branch `l` projects pyramid level `l`, splits
//! it into soft regions with learnable prompts and re-weights the features by
//! each region mask. Region outputs are brought to full resolution, summed
//! into a gate, injected into the pixel features and decoded into the fused
//! image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BoundParams, ParamSet, Tensor, Var};
use crate::rng::{self, Stream};

/// Parameters under this prefix are shared with the detector.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Variance stabiliser of the region-mask normalisation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrpptConfig {
    /// Output channels of the stride-2 backbone stages; one pyramid level per
    /// stage.
    pub backbone_channels: Vec<usize>,
    /// Width of the branch features and prompts.
    pub branch_channels: usize,
    /// Prompts per region branch.
    pub prompts: usize,
    /// Channels of the pixel branch and the aligned region outputs.
    pub fuse_channels: usize,
    /// Output channels of the first four reconstruction convolutions; a fifth
    /// produces the single fused channel.
    pub recon_channels: [usize; 4],
    /// Active branches. Branch 0 is the pixel branch and is always required;
    /// `l >= 1` reads pyramid level `l`.
    pub branches: Vec<usize>,
}

impl Default for OrpptConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![8, 16, 32, 32],
            branch_channels: 16,
            prompts: 4,
            fuse_channels: 8,
            recon_channels: [8, 4, 4, 4],
            branches: vec![0, 1, 2, 3],
        }
    }
}

impl OrpptConfig {
    pub fn levels(&self) -> usize {
        self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.backbone_channels.iter().all(|&c| c > 0)
            && self.branch_channels > 0
            && self.prompts > 0
            && self.fuse_channels > 0
            && self.recon_channels.iter().all(|&c| c > 0);
        if !positive || self.backbone_channels.is_empty() {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !self.branches.contains(&0) {
            return Err(Error::Config(format!(
                "branch set {:?} must contain the pixel branch 0",
                self.branches
            )));
        }
        let mut seen = vec![false; self.levels() + 1];
        for &b in &self.branches {
            if b > self.levels() {
                return Err(Error::Config(format!(
                    "branch {b} exceeds the {} pyramid levels",
                    self.levels()
                )));
            }
            if std::mem::replace(&mut seen[b], true) {
                return Err(Error::Config(format!("branch {b} listed twice")));
            }
        }
        Ok(())
    }

    pub fn region_branches(&self) -> impl Iterator<Item = usize> + '_ {
        self.branches.iter().copied().filter(|&b| b > 0)
    }
}

fn he_normal(rng: &mut Stream, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    rng::normal_tensor(rng, shape).map(|v| v * std)
}

fn add_conv(ps: &mut ParamSet, rng: &mut Stream, name: &str, c_out: usize, c_in: usize, k: usize, shared: bool) {
    let w = he_normal(rng, &[c_out, c_in, k, k], c_in * k * k);
    let b = Tensor::zeros(&[c_out]);
    if shared {
        ps.insert_shared(format!("{name}.w"), w);
        ps.insert_shared(format!("{name}.b"), b);
    } else {
        ps.insert(format!("{name}.w"), w);
        ps.insert(format!("{name}.b"), b);
    }
}

/// Register backbone and fusion-head parameters. Parameters of inactive
/// branches are still created so every branch set shares one layout.
pub fn init_params(cfg: &OrpptConfig, ps: &mut ParamSet, rng: &mut Stream) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for (s, &c) in cfg.backbone_channels.iter().enumerate() {
        add_conv(ps, rng, &format!("backbone.s{s}"), c, c_in, 3, true);
        c_in = c;
    }
    let f = cfg.fuse_channels;
    add_conv(ps, rng, "fusion.pfmm.c0", f, 2, 3, false);
    add_conv(ps, rng, "fusion.pfmm.c1", f, f, 3, false);
    let (c2, m) = (cfg.branch_channels, cfg.prompts);
    for (l, &c) in cfg.backbone_channels.iter().enumerate() {
        let p = format!("fusion.branch{}", l + 1);
        add_conv(ps, rng, &format!("{p}.phi"), c2, c, 3, false);
        let prompts = rng::normal_tensor(rng, &[m, c2]).map(|v| v / (c2 as f64).sqrt());
        ps.insert(format!("{p}.prompts"), prompts);
        ps.insert(format!("{p}.gamma"), Tensor::ones(&[m]));
        ps.insert(format!("{p}.beta"), Tensor::zeros(&[m]));
        add_conv(ps, rng, &format!("{p}.align"), f, m * c2, 1, false);
    }
    add_conv(ps, rng, "fusion.assemble", f, f, 1, false);
    add_conv(ps, rng, "fusion.gate", f, f, 1, false);
    let mut c_in = f;
    for (k, &c) in cfg.recon_channels.iter().enumerate() {
        add_conv(ps, rng, &format!("fusion.recon{k}"), c, c_in, 3, false);
        c_in = c;
    }
    add_conv(ps, rng, "fusion.recon4", 1, c_in, 3, false);
    Ok(())
}

/// `conv(x, name.w) + name.b`.
pub fn conv<'t>(bp: &BoundParams<'t>, name: &str, x: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let w = bp.get(&format!("{name}.w"))?;
    let k = w.shape()[2];
    x.conv2d(w, stride, k / 2)?.add_along(bp.get(&format!("{name}.b"))?, 0)
}

fn as_image<'t>(v: Var<'t>, op: &'static str) -> Result<Var<'t>> {
    match v.shape().as_slice() {
        [h, w] => v.reshape(&[1, *h, *w]),
        [1, _, _] => Ok(v),
        s => Err(Error::shape(op, format!("expected a single-channel image, got {s:?}"))),
    }
}

fn same_size(op: &'static str, x: Var<'_>, y: Var<'_>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("x {:?} vs y {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Feature pyramid of a single modality.
pub fn backbone_single<'t>(bp: &BoundParams<'t>, levels: usize, x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let mut h = as_image(x, "backbone")?;
    let mut out = Vec::with_capacity(levels);
    for s in 0..levels {
        h = conv(bp, &format!("backbone.s{s}"), h, 2)?.relu()?;
        out.push(h);
    }
    Ok(out)
}

/// Level-wise sum of the two modality pyramids, same weights for both.
pub fn backbone_forward<'t>(bp: &BoundParams<'t>, cfg: &OrpptConfig, x: Var<'t>, y: Var<'t>) -> Result<Vec<Var<'t>>> {
    same_size("backbone", x, y)?;
    let fx = backbone_single(bp, cfg.levels(), x)?;
    let fy = backbone_single(bp, cfg.levels(), y)?;
    fx.into_iter().zip(fy).map(|(a, b)| a.add(b)).collect()
}

/// Pixel branch: concatenated inputs through two 3x3 conv + ReLU layers.
pub fn pfmm<'t>(bp: &BoundParams<'t>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    same_size("pfmm", x, y)?;
    let xy = as_image(x, "pfmm")?.concat(&[as_image(y, "pfmm")?], 0)?;
    let h = conv(bp, "fusion.pfmm.c0", xy, 1)?.relu()?;
    conv(bp, "fusion.pfmm.c1", h, 1)?.relu()
}

/// `ReLU(gamma * norm(R phi) + beta)` where the norm standardises each mask
/// channel over spatial positions. With one position the normalised term is
/// zero and the result is `ReLU(beta)`.
pub fn region_mask<'t>(prompts: Var<'t>, phi: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let (ps, fs) = (prompts.shape(), phi.shape());
    if ps.len() != 2 || fs.len() != 3 || ps[1] != fs[0] {
        return Err(Error::shape(
            "region_mask",
            format!("prompts {ps:?} vs features {fs:?}"),
        ));
    }
    let (m, h, w) = (ps[0], fs[1], fs[2]);
    let dots = prompts.matmul(phi.reshape(&[fs[0], h * w])?)?;
    dots.reshape(&[m, h, w])?
        .instance_norm(NORM_EPS)?
        .mul_along(gamma, 0)?
        .add_along(beta, 0)?
        .relu()
}

/// `[b_1, ..., b_M]` with `b_m = a_m * phi` broadcast over feature channels.
pub fn region_representation<'t>(mask: Var<'t>, phi: Var<'t>) -> Result<Var<'t>> {
    mask.channel_outer(phi)
}

/// Output of region branch `l` (1-based) for pyramid level `o_l`.
pub fn region_branch<'t>(bp: &BoundParams<'t>, l: usize, o_l: Var<'t>) -> Result<Var<'t>> {
    let p = format!("fusion.branch{l}");
    let phi = conv(bp, &format!("{p}.phi"), o_l, 1)?.relu()?;
    let mask = region_mask(
        bp.get(&format!("{p}.prompts"))?,
        phi,
        bp.get(&format!("{p}.gamma"))?,
        bp.get(&format!("{p}.beta"))?,
    )?;
    region_representation(mask, phi)
}

/// Gate built from region outputs: each is channel-aligned by a 1x1 conv at
/// its own resolution, upsampled to `(h, w)` and summed, then passed through
/// 1x1 conv + ReLU and 1x1 conv + sigmoid.
pub fn region_gate<'t>(
    bp: &BoundParams<'t>,
    branches: &[(usize, Var<'t>)],
    h: usize,
    w: usize,
) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for &(l, b) in branches {
        let a = conv(bp, &format!("fusion.branch{l}.align"), b, 1)?.upsample_nearest(h, w)?;
        acc = Some(match acc {
            Some(s) => s.add(a)?,
            None => a,
        });
    }
    let Some(sum) = acc else { return Ok(None) };
    let mixed = conv(bp, "fusion.assemble", sum, 1)?.relu()?;
    Ok(Some(conv(bp, "fusion.gate", mixed, 1)?.sigmoid()?))
}

/// Inject the gate into the pixel features and decode the fused image
/// `[h, w]` in `[0, 1]`.
pub fn reconstruct<'t>(bp: &BoundParams<'t>, b0: Var<'t>, gate: Option<Var<'t>>) -> Result<Var<'t>> {
    let mut h = match gate {
        Some(g) => b0.mul(g)?.add(b0)?,
        None => b0,
    };
    for k in 0..4 {
        h = conv(bp, &format!("fusion.recon{k}"), h, 1)?.relu()?;
    }
    let out = conv(bp, "fusion.recon4", h, 1)?.sigmoid()?;
    let s = out.shape();
    out.reshape(&[s[1], s[2]])
}

/// Full fusion head on precomputed branch outputs.
pub fn assemble_fuse<'t>(bp: &BoundParams<'t>, b0: Var<'t>, branches: &[(usize, Var<'t>)]) -> Result<Var<'t>> {
    let s = b0.shape();
    if s.len() != 3 {
        return Err(Error::shape("assemble_fuse", format!("B_0 must be [C, H, W], got {s:?}")));
    }
    let gate = region_gate(bp, branches, s[1], s[2])?;
    reconstruct(bp, b0, gate)
}

/// Fused image and the pyramid it was computed from.
pub struct FusionForward<'t> {
    pub fused: Var<'t>,
    pub pyramid: Vec<Var<'t>>,
}

/// Backbone, active branches and reconstruction.
pub fn fuse_forward<'t>(bp: &BoundParams<'t>, cfg: &OrpptConfig, x: Var<'t>, y: Var<'t>) -> Result<FusionForward<'t>> {
    cfg.validate()?;
    let pyramid = backbone_forward(bp, cfg, x, y)?;
    let b0 = pfmm(bp, x, y)?;
    let branches = cfg
        .region_branches()
        .map(|l| Ok((l, region_branch(bp, l, pyramid[l - 1])?)))
        .collect::<Result<Vec<_>>>()?;
    let fused = assemble_fuse(bp, b0, &branches)?;
    Ok(FusionForward { fused, pyramid })
}
