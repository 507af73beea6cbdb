//! Fusion quality (EN, MI, VIF) and detection (COCO-style mAP) metrics.

use serde::{Deserialize, Serialize};

use crate::cfdp::{BBox, BoxSet};
use crate::error::{Error, Result};
use crate::losses::quantize;
use crate::numerics::{gaussian_kernel, Tensor};

/// Sensor noise variance for VIF, in 8-bit grey levels squared.
pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_SCALES: usize = 4;
/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

fn check_image(op: &'static str, img: &Tensor) -> Result<()> {
    if img.shape().len() != 2 || img.is_empty() {
        return Err(Error::shape(op, format!("expected a non-empty [H, W] image, got {:?}", img.shape())));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    check_image(op, a)?;
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn entropy_of(p: impl Iterator<Item = f64>) -> f64 {
    // 0 - x rather than -x so a point mass gives +0
    0.0 - p.filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy_en(img: &Tensor) -> Result<f64> {
    check_image("entropy_en", img)?;
    Ok(entropy_of(crate::losses::histogram(img).into_iter()))
}

/// `MI(a; b)` in bits from the 256 x 256 joint histogram.
pub fn mutual_information_pair(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("mutual_information", a, b)?;
    let mut joint = vec![0u32; 256 * 256];
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        joint[quantize(va) as usize * 256 + quantize(vb) as usize] += 1;
    }
    let n = a.len() as f64;
    let mut pa = [0.0; 256];
    let mut pb = [0.0; 256];
    for i in 0..256 {
        for j in 0..256 {
            let c = joint[i * 256 + j] as f64;
            pa[i] += c;
            pb[j] += c;
        }
    }
    let mut mi = 0.0;
    for i in 0..256 {
        if pa[i] == 0.0 {
            continue;
        }
        for j in 0..256 {
            let c = joint[i * 256 + j] as f64;
            if c > 0.0 {
                // p(a,b) / (p(a) p(b)) = c n / (ca cb)
                mi += c / n * (c * n / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `MI(x; u) + MI(y; u)`.
pub fn mutual_information(u: &Tensor, x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(mutual_information_pair(x, u)? + mutual_information_pair(y, u)?)
}

/// Plane of `f64` used by the VIF filters.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_tensor(t: &Tensor, gain: f64) -> Self {
        let s = t.shape();
        Self { h: s[0], w: s[1], v: t.data().iter().map(|x| x * gain).collect() }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable 'valid' correlation with `k`.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (h, w) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * w];
        for i in 0..self.h {
            let src = &self.v[i * self.w..][..self.w];
            for j in 0..w {
                rows[i * w + j] = k.iter().zip(&src[j..j + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for (t, kt) in k.iter().enumerate() {
                let src = &rows[(i + t) * w..][..w];
                for (o, s) in out[i * w..][..w].iter_mut().zip(src) {
                    *o += kt * s;
                }
            }
        }
        Plane { h, w, v: out }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let v = (0..h * w).map(|k| self.v[(k / w) * 2 * self.w + (k % w) * 2]).collect();
        Plane { h, w, v }
    }
}

fn vif_window(scale: usize) -> Vec<f64> {
    let n = (1 << (VIF_SCALES - scale + 1)) + 1;
    gaussian_kernel(n, n as f64 / 5.0)
}

/// Smallest side for which every scale's window fits.
pub fn vif_min_size() -> usize {
    let mut need = vif_window(VIF_SCALES).len();
    for scale in (2..=VIF_SCALES).rev() {
        // side s after 'valid' filtering with window n and 2x decimation
        let n = vif_window(scale).len();
        need = (2 * need - 1) + n - 1;
        need = need.max(vif_window(scale - 1).len());
    }
    need
}

/// Pixel-domain multi-scale VIF of `dist` against `reference`, on 8-bit
/// grey levels.
pub fn vif_pair(reference: &Tensor, dist: &Tensor) -> Result<f64> {
    check_same("vif", reference, dist)?;
    let s = reference.shape();
    let min = vif_min_size();
    if s[0] < min || s[1] < min {
        return Err(Error::domain("vif", format!("image {s:?} smaller than the {min}x{min} minimum")));
    }
    let mut r = Plane::from_tensor(reference, 255.0);
    let mut d = Plane::from_tensor(dist, 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let win = vif_window(scale);
        if scale > 1 {
            r = r.filter_valid(&win).downsample();
            d = d.filter_valid(&win).downsample();
        }
        let mu1 = r.filter_valid(&win);
        let mu2 = d.filter_valid(&win);
        let rr = r.zip(&r, |a, b| a * b).filter_valid(&win);
        let dd = d.zip(&d, |a, b| a * b).filter_valid(&win);
        let rd = r.zip(&d, |a, b| a * b).filter_valid(&win);
        for k in 0..mu1.v.len() {
            let (m1, m2) = (mu1.v[k], mu2.v[k]);
            let mut s1 = (rr.v[k] - m1 * m1).max(0.0);
            let s2 = (dd.v[k] - m2 * m2).max(0.0);
            let s12 = rd.v[k] - m1 * m2;
            let mut g = s12 / (s1 + 1e-10);
            let mut sv = s2 - g * s12;
            if s1 < 1e-10 {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(1e-10);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log2();
            den += (1.0 + s1 / VIF_NOISE_VAR).log2();
        }
    }
    if den == 0.0 {
        // flat reference carries no information to preserve
        return Ok(0.0);
    }
    Ok(num / den)
}

/// `VIF(x -> u) + VIF(y -> u)`.
pub fn vif_fusion(u: &Tensor, x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(vif_pair(x, u)? + vif_pair(y, u)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionMetricsReport {
    pub en: f64,
    pub mi: f64,
    pub vif: f64,
}

pub fn fusion_metrics(u: &Tensor, x: &Tensor, y: &Tensor) -> Result<FusionMetricsReport> {
    Ok(FusionMetricsReport {
        en: entropy_en(u)?,
        mi: mutual_information(u, x, y)?,
        vif: vif_fusion(u, x, y)?,
    })
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Scored boxes for one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub boxes: BoxSet,
    pub scores: Vec<f64>,
}

impl Predictions {
    pub fn new(boxes: BoxSet, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::shape(
                "predictions",
                format!("{} boxes but {} scores", boxes.len(), scores.len()),
            ));
        }
        Ok(Self { boxes, scores })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub map50: f64,
    pub map5095: f64,
}

fn check_boxes(boxes: &BoxSet, what: &str) -> Result<()> {
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_valid() {
            return Err(Error::domain(
                "map_eval",
                format!("degenerate {what} box {i}: {b:?}"),
            ));
        }
    }
    Ok(())
}

/// 101-point interpolated AP at one IoU threshold.
pub fn average_precision(preds: &[Predictions], gts: &[BoxSet], thr: f64) -> f64 {
    let n_pos: usize = gts.iter().map(BoxSet::len).sum();
    if n_pos == 0 {
        return 0.0;
    }
    let mut dets: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, p)| p.scores.iter().enumerate().map(move |(k, &sc)| (sc, s, k)))
        .collect();
    // stable: ties keep scene then box order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for &(_, s, k) in &dets {
        let d = &preds[s].boxes.boxes()[k];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[s].iter().enumerate() {
            if taken[s][j] {
                continue;
            }
            let v = iou(d, g);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[s][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / n_pos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < level - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Single-class COCO-style evaluation over scenes.
pub fn map_eval(preds: &[Predictions], gts: &[BoxSet]) -> Result<DetectionEval> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "map_eval",
            format!("{} prediction sets for {} scenes", preds.len(), gts.len()),
        ));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.boxes.len() != p.scores.len() {
            return Err(Error::shape("map_eval", "boxes and scores differ in length"));
        }
        if let Some(s) = p.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::domain("map_eval", format!("score {s} outside [0, 1]")));
        }
        check_boxes(&p.boxes, "predicted")?;
        check_boxes(g, "ground-truth")?;
    }
    let ap: Vec<f64> = IOU_THRESHOLDS.iter().map(|&t| average_precision(preds, gts, t)).collect();
    Ok(DetectionEval {
        thresholds: IOU_THRESHOLDS.to_vec(),
        map50: ap[0],
        map5095: ap.iter().sum::<f64>() / ap.len() as f64,
        ap,
    })
}

/// Per-scene metrics row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub en: Option<f64>,
    pub mi: Option<f64>,
    pub vif: Option<f64>,
    pub map50: f64,
    pub map5095: f64,
}

/// Per-scene rows plus dataset-level fusion means and pooled detection AP.
/// Fusion fields are absent when no fused images were supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: Vec<SceneMetrics>,
    pub fusion: Option<FusionMetricsReport>,
    pub detection: DetectionEval,
}

impl MetricsReport {
    /// Scenes given as `(id, fused, visible, infrared, predictions, truth)`.
    /// Either every scene has a fused image or none does.
    #[allow(clippy::type_complexity)]
    pub fn build<'a>(
        items: impl IntoIterator<
            Item = (&'a str, Option<&'a Tensor>, &'a Tensor, &'a Tensor, &'a Predictions, &'a BoxSet),
        >,
    ) -> Result<Self> {
        let mut scenes = Vec::new();
        let mut fused_rows = Vec::new();
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (id, u, x, y, p, g) in items {
            let f = u.map(|u| fusion_metrics(u, x, y)).transpose()?;
            let d = map_eval(std::slice::from_ref(p), std::slice::from_ref(g))?;
            scenes.push(SceneMetrics {
                scene: id.to_string(),
                en: f.as_ref().map(|f| f.en),
                mi: f.as_ref().map(|f| f.mi),
                vif: f.as_ref().map(|f| f.vif),
                map50: d.map50,
                map5095: d.map5095,
            });
            fused_rows.extend(f);
            preds.push(p.clone());
            gts.push(g.clone());
        }
        if scenes.is_empty() {
            return Err(Error::domain("metrics", "no scenes to evaluate"));
        }
        let fusion = if fused_rows.is_empty() {
            None
        } else if fused_rows.len() != scenes.len() {
            return Err(Error::domain("metrics", "fused images missing for some scenes"));
        } else {
            let n = fused_rows.len() as f64;
            let mean = |f: fn(&FusionMetricsReport) -> f64| fused_rows.iter().map(f).sum::<f64>() / n;
            Some(FusionMetricsReport { en: mean(|s| s.en), mi: mean(|s| s.mi), vif: mean(|s| s.vif) })
        };
        let detection = map_eval(&preds, &gts)?;
        Ok(Self { scenes, fusion, detection })
    }

    /// `scene-id,en,mi,vif,map50,map5095`, one row per scene and a final
    /// `all` row with the aggregate. Missing fusion values are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("scene-id,en,mi,vif,map50,map5095\n");
        for s in &self.scenes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.scene,
                cell(s.en),
                cell(s.mi),
                cell(s.vif),
                s.map50,
                s.map5095
            ));
        }
        let f = self.fusion.as_ref();
        let d = &self.detection;
        out.push_str(&format!(
            "all,{},{},{},{},{}\n",
            cell(f.map(|f| f.en)),
            cell(f.map(|f| f.mi)),
            cell(f.map(|f| f.vif)),
            d.map50,
            d.map5095
        ));
        out
    }
}
