//! Gradient-matrix task alignment.
//!
//! The per-task gradients of the shared parameters form the columns of a
//! `P x T` matrix `G`. Its condition number `sigma_max / sigma_min` measures
//! how badly one task dominates or conflicts with the other. Alignment
//! replaces `G` by the closest matrix with orthogonal, equal-norm columns,
//! `sigma_min * U V^T` (the scaled orthogonal Procrustes solution), so the
//! combined update `G_hat w` is perfectly conditioned.

mod svd;

use serde::{Deserialize, Serialize};

pub use svd::{svd_columns, Svd, MAX_SWEEPS};

use crate::error::{Error, Result};
use crate::numerics::{backward, flatten_grads, unflatten_grads, BoundParams, GradMap, ParamSet, Tensor, Var};
use crate::optim::Optimizer;

/// Singular values at or below `RANK_TOL * sigma_1` count as zero.
pub const RANK_TOL: f64 = 1e-12;

/// Per-task gradients of the shared parameters, stored by column.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrix {
    cols: Vec<Vec<f64>>,
}

impl GradientMatrix {
    pub fn from_columns(cols: Vec<Vec<f64>>) -> Result<Self> {
        let t = cols.len();
        let p = cols.first().map_or(0, Vec::len);
        if t == 0 || p < t || cols.iter().any(|c| c.len() != p) {
            return Err(Error::shape(
                "gradient_matrix",
                format!("need P >= T >= 1 equal-length columns, got {:?}", cols.iter().map(Vec::len).collect::<Vec<_>>()),
            ));
        }
        if cols.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("gradient_matrix", "non-finite gradient entry"));
        }
        Ok(Self { cols })
    }

    /// Row-major `[P, T]` tensor, rows are parameters.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::shape("gradient_matrix", format!("expected [P, T], got {s:?}")));
        }
        let (p, n) = (s[0], s[1]);
        Self::from_columns((0..n).map(|j| (0..p).map(|i| t.data()[i * n + j]).collect()).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        let (p, t) = (self.rows(), self.tasks());
        Tensor::from_fn(&[p, t], |k| self.cols[k % t][k / t])
    }

    pub fn rows(&self) -> usize {
        self.cols[0].len()
    }

    pub fn tasks(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.cols
    }

    pub fn column_norms(&self) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn frobenius(&self) -> f64 {
        self.cols.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &GradientMatrix) -> f64 {
        self.cols
            .iter()
            .flatten()
            .zip(other.cols.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            cols: self.cols.iter().map(|col| col.iter().map(|v| v * c).collect()).collect(),
        }
    }
}

/// Columns `[g_u, g_d]`.
pub fn build_gradient_matrix(g_u: &[f64], g_d: &[f64]) -> Result<GradientMatrix> {
    if g_u.len() != g_d.len() {
        return Err(Error::shape(
            "build_gradient_matrix",
            format!("task gradients have lengths {} and {}", g_u.len(), g_d.len()),
        ));
    }
    GradientMatrix::from_columns(vec![g_u.to_vec(), g_d.to_vec()])
}

/// Nonnegative task combination weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "task weights must be nonnegative with a positive sum, got {w:?}"
            )));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self(vec![0.5, 0.5])
    }
}

impl TryFrom<Vec<f64>> for TaskWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TaskWeights> for Vec<f64> {
    fn from(w: TaskWeights) -> Self {
        w.0
    }
}

/// Summary of one alignment. Infinite condition numbers serialise as `null`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub singular_values: Vec<f64>,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub rank: usize,
    pub frobenius_distance: f64,
    /// Common singular value of the aligned matrix.
    pub scale: f64,
    pub column_norms_before: Vec<f64>,
    pub column_norms_after: Vec<f64>,
}

pub fn svd(g: &GradientMatrix) -> Result<Svd> {
    svd_columns(g.columns(), RANK_TOL)
}

fn rank_of(sigma: &[f64]) -> usize {
    let cutoff = RANK_TOL * sigma[0];
    sigma.iter().filter(|&&s| s > cutoff && s > 0.0).count()
}

fn kappa(sigma: &[f64]) -> f64 {
    if rank_of(sigma) < sigma.len() {
        f64::INFINITY
    } else {
        sigma[0] / sigma[sigma.len() - 1]
    }
}

/// `sigma_max / sigma_min`, infinite when `G` is rank deficient.
pub fn condition_number(g: &GradientMatrix) -> Result<f64> {
    let s = svd(g)?;
    if s.sigma[0] == 0.0 {
        return Err(Error::NoGradientSignal);
    }
    Ok(kappa(&s.sigma))
}

/// Closest matrix with orthogonal columns of common norm `sigma_min`.
///
/// For rank-deficient input the result is `sigma_r * sum_{i<=r} u_i v_i^T`
/// with `sigma_r` the smallest non-zero singular value, i.e. both tasks are
/// projected onto the surviving principal directions.
pub fn align(g: &GradientMatrix) -> Result<(GradientMatrix, AlignmentReport)> {
    let s = svd(g)?;
    if s.sigma[0] == 0.0 {
        return Err(Error::NoGradientSignal);
    }
    let rank = rank_of(&s.sigma);
    let scale = s.sigma[rank - 1];
    let (p, t) = (g.rows(), g.tasks());
    let cols: Vec<Vec<f64>> = (0..t)
        .map(|j| {
            (0..p)
                .map(|r| (0..rank).map(|k| s.u[k][r] * s.v[k][j]).sum::<f64>() * scale)
                .collect()
        })
        .collect();
    let aligned = GradientMatrix::from_columns(cols)?;

    let after = svd(&aligned)?;
    let r_after = rank_of(&after.sigma);
    let kappa_after = after.sigma[0] / after.sigma[r_after - 1];
    let report = AlignmentReport {
        kappa_before: kappa(&s.sigma),
        kappa_after,
        rank,
        frobenius_distance: g.distance(&aligned),
        scale,
        column_norms_before: g.column_norms(),
        column_norms_after: aligned.column_norms(),
        singular_values: s.sigma,
    };
    Ok((aligned, report))
}

/// `g = G w`.
pub fn combine(g: &GradientMatrix, w: &TaskWeights) -> Result<Vec<f64>> {
    let w = w.as_slice();
    if w.len() != g.tasks() {
        return Err(Error::shape(
            "combine",
            format!("{} weights for {} tasks", w.len(), g.tasks()),
        ));
    }
    let mut out = vec![0.0; g.rows()];
    for (col, &wj) in g.columns().iter().zip(w) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += wj * v;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmtaConfig {
    pub enabled: bool,
    /// Align every `period` steps, starting at step 0.
    pub period: usize,
    pub weights: TaskWeights,
}

impl Default for GmtaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            period: 1,
            weights: TaskWeights::default(),
        }
    }
}

impl GmtaConfig {
    pub fn aligns_at(&self, step: usize) -> bool {
        self.enabled && self.period > 0 && step % self.period == 0
    }
}

/// What one joint update did.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub aligned: bool,
    /// Alignment report on aligned steps.
    pub report: Option<AlignmentReport>,
    /// Singular values of the raw shared-gradient matrix.
    pub singular_values: Vec<f64>,
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub grad_norm_u: f64,
    pub grad_norm_d: f64,
    /// Column norms of the matrix actually combined.
    pub used_column_norms: Vec<f64>,
    /// The gradient handed to the optimiser, per parameter.
    pub update: GradMap,
}

/// One synchronous update of both tasks.
///
/// Shared parameters move along `G_hat w` on aligned steps and `G w`
/// otherwise; every other parameter moves along `w_u * grad L_u +
/// w_d * grad L_d`, which is its own task's gradient since the other task
/// does not reach it.
pub fn gmta_step(
    params: &mut ParamSet,
    bound: &BoundParams<'_>,
    loss_u: Var<'_>,
    loss_d: Var<'_>,
    cfg: &GmtaConfig,
    step: usize,
    optimizer: &mut Optimizer,
) -> Result<StepOutcome> {
    let w = cfg.weights.as_slice();
    if w.len() != 2 {
        return Err(Error::Config(format!("two task weights required, got {}", w.len())));
    }
    let grads_u = backward(loss_u, bound)?;
    let grads_d = backward(loss_d, bound)?;
    let g_u = flatten_grads(&grads_u, params.shared())?;
    let g_d = flatten_grads(&grads_d, params.shared())?;
    let raw = build_gradient_matrix(&g_u, &g_d)?;
    let norms = raw.column_norms();

    let raw_svd = svd(&raw)?;
    let kappa_before = if raw_svd.sigma[0] == 0.0 {
        f64::INFINITY
    } else {
        kappa(&raw_svd.sigma)
    };

    let aligned = cfg.aligns_at(step);
    let (used, report) = if aligned {
        let (g_hat, rep) = align(&raw)?;
        (g_hat, Some(rep))
    } else {
        (raw, None)
    };
    let kappa_after = report.as_ref().map_or(kappa_before, |r| r.kappa_after);
    let shared = unflatten_grads(&combine(&used, &cfg.weights)?, params)?;

    let mut update = GradMap::new();
    for name in params.names() {
        let g = match shared.get(name) {
            Some(g) => g.clone(),
            None => grads_u[name].zip_map(&grads_d[name], |a, b| w[0] * a + w[1] * b)?,
        };
        update.insert(name.to_string(), g);
    }
    optimizer.apply(params, &update)?;

    Ok(StepOutcome {
        aligned,
        report,
        singular_values: raw_svd.sigma,
        kappa_before,
        kappa_after,
        grad_norm_u: norms[0],
        grad_norm_d: norms[1],
        used_column_norms: used.column_norms(),
        update,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm(cols: &[&[f64]]) -> GradientMatrix {
        GradientMatrix::from_columns(cols.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn builds_columns_in_task_order() {
        let g = build_gradient_matrix(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g.to_tensor(), Tensor::eye(2));
        assert!(build_gradient_matrix(&[1.0], &[1.0, 2.0]).is_err());
        let z = build_gradient_matrix(&[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(z.frobenius(), 0.0);
    }

    #[test]
    fn tensor_layout_round_trip() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = GradientMatrix::from_tensor(&t).unwrap();
        assert_eq!(g.column(0), &[1.0, 3.0, 5.0]);
        assert_eq!(g.to_tensor(), t);
    }

    #[test]
    fn condition_numbers() {
        assert!((condition_number(&gm(&[&[3.0, 0.0], &[0.0, 3.0]])).unwrap() - 1.0).abs() < 1e-15);
        assert!((condition_number(&gm(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap() - 2.0).abs() < 1e-15);
        assert!(condition_number(&gm(&[&[1.0, 1.0], &[2.0, 2.0]])).unwrap().is_infinite());
        assert!(matches!(
            condition_number(&gm(&[&[0.0, 0.0], &[0.0, 0.0]])),
            Err(Error::NoGradientSignal)
        ));
    }

    #[test]
    fn diagonal_aligns_to_identity() {
        let (g_hat, rep) = align(&gm(&[&[2.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!(g_hat.to_tensor().max_abs_diff(&Tensor::eye(2)) < 1e-15);
        assert_eq!(rep.rank, 2);
        assert!((rep.kappa_before - 2.0).abs() < 1e-15);
        assert!((rep.kappa_after - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_equal_norm_is_fixed_point() {
        let s = 0.7;
        let g = gm(&[&[s * 0.6, s * 0.8, 0.0], &[-s * 0.8, s * 0.6, 0.0]]);
        let (g_hat, rep) = align(&g).unwrap();
        assert!(g.distance(&g_hat) < 1e-15);
        assert!((rep.scale - s).abs() < 1e-15);
    }

    #[test]
    fn rank_one_fallback() {
        let g = gm(&[&[1.0, 2.0, 2.0], &[0.0, 0.0, 0.0]]);
        let (g_hat, rep) = align(&g).unwrap();
        assert_eq!(rep.rank, 1);
        assert!(rep.kappa_before.is_infinite());
        assert!((rep.kappa_after - 1.0).abs() < 1e-12);
        // u1 v1^T scaled by sigma1 reproduces the rank-1 matrix itself
        assert!(g.distance(&g_hat) < 1e-12);
        assert!(matches!(align(&gm(&[&[0.0, 0.0], &[0.0, 0.0]])), Err(Error::NoGradientSignal)));
    }

    #[test]
    fn combine_projects_and_adds() {
        let g = gm(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let w = TaskWeights::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(combine(&g, &w).unwrap(), vec![1.0, 2.0, 3.0]);
        let w = TaskWeights::new(vec![0.5, 2.0]).unwrap();
        assert_eq!(combine(&g, &w).unwrap(), vec![8.5, 11.0, 13.5]);
        let w3 = TaskWeights::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(combine(&g, &w3).is_err());
    }

    #[test]
    fn orthogonal_equal_norm_sum_has_pythagorean_norm() {
        let s = 1.5;
        let g = gm(&[&[s, 0.0, 0.0], &[0.0, 0.0, s]]);
        let v = combine(&g, &TaskWeights::new(vec![1.0, 1.0]).unwrap()).unwrap();
        let n2: f64 = v.iter().map(|x| x * x).sum();
        assert!((n2 - 2.0 * s * s).abs() < 1e-12);
    }

    #[test]
    fn task_weights_validation() {
        assert!(TaskWeights::new(vec![0.0, 0.0]).is_err());
        assert!(TaskWeights::new(vec![-1.0, 2.0]).is_err());
        let w: TaskWeights = serde_json::from_str("[0.3, 0.7]").unwrap();
        assert_eq!(w.as_slice(), &[0.3, 0.7]);
        assert!(serde_json::from_str::<TaskWeights>("[0, 0]").is_err());
    }

    #[test]
    fn cadence() {
        let c = GmtaConfig { period: 1000, ..Default::default() };
        assert!(c.aligns_at(0) && c.aligns_at(2000) && !c.aligns_at(999));
        let off = GmtaConfig { enabled: false, ..Default::default() };
        assert!(!off.aligns_at(0));
    }
}
