//! Helpers shared by the integration tests: finite-difference gradient
//! checks, random inputs and the gradient-check instances the acceptance run
//! reuses.
#![allow(dead_code)]

pub mod cli;

use proptest::test_runner::{Config as ProptestConfig, RngSeed};
use rand::Rng;

use fusiondet::cfdp::{
    ddim_step, detector_loss, forward_noise, time_grid, BBox, BoxSet, DiffusionSchedule, ScaledLatent, ScheduleKind,
};
use fusiondet::losses::{
    fusion_loss, gradient_loss, pixel_loss, saliency_weights, ssim_loss, LossWeights, ObjectMask,
};
use fusiondet::numerics::{backward, BoundParams, ParamSet, Tape, Tensor, Var};
use fusiondet::orppt::{self, OrpptConfig};
use fusiondet::rng::{self, Stream};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Gradient norms below this count as zero in relative errors.
pub const NORM_FLOOR: f64 = 1e-8;

/// Deterministic proptest runner: fixed seed, nothing written to disk.
pub fn pt_config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed_f00d),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)`, zero when both are below [`NORM_FLOOR`].
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}

pub fn uniform(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi)` and random sign, so kinks at zero are
/// never within a finite-difference step.
pub fn away_from_zero(r: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(lo..hi);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Image in `[0.05, 0.95]`.
pub fn image(r: &mut Stream, h: usize, w: usize) -> Tensor {
    uniform(r, &[h, w], 0.05, 0.95)
}

pub fn random_boxes(r: &mut Stream, n: usize) -> BoxSet {
    BoxSet::new(
        (0..n)
            .map(|_| {
                BBox::new(
                    r.random_range(0.2..0.8),
                    r.random_range(0.2..0.8),
                    r.random_range(0.1..0.5),
                    r.random_range(0.1..0.5),
                )
            })
            .collect(),
    )
}

fn perturbed(inputs: &[Tensor], k: usize, i: usize, d: f64) -> Vec<Tensor> {
    let mut v = inputs.to_vec();
    v[k].data_mut()[i] += d;
    v
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> fusiondet::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    f(&vars).expect("forward").item()
}

/// Tape gradient of scalar `f` w.r.t. every input, concatenated.
pub fn tape_grad<F>(inputs: &[Tensor], f: &F) -> Vec<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> fusiondet::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&vars).expect("forward");
    let g = tape.backward(root).expect("backward");
    vars.iter().flat_map(|v| g.get(*v).into_data()).collect()
}

/// Central differences of `f` w.r.t. every input coordinate, concatenated.
pub fn numeric_grad<F>(inputs: &[Tensor], f: &F) -> Vec<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> fusiondet::Result<Var<'t>>,
{
    let mut out = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let up = eval_scalar(&perturbed(inputs, k, i, FD_STEP), f);
            let down = eval_scalar(&perturbed(inputs, k, i, -FD_STEP), f);
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Relative error between the tape gradient and central differences.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> fusiondet::Result<Var<'t>>,
{
    rel_err(&tape_grad(inputs, &f), &numeric_grad(inputs, &f))
}

fn eval_params<F>(ps: &ParamSet, f: &F) -> f64
where
    F: for<'t> Fn(&BoundParams<'t>, &'t Tape) -> fusiondet::Result<Var<'t>>,
{
    let tape = Tape::new();
    let bp = ps.bind(&tape);
    f(&bp, &tape).expect("forward").item()
}

/// Gradient check of `f` w.r.t. a parameter set. Too many parameters for
/// coordinate-wise differences, so this compares directional derivatives
/// along `directions` directions, each the gradient plus an equally long
/// random component, and coordinate-wise derivatives for `coords` random
/// entries. Entries are drawn among those with `|g_i| >= 1e-3 max |g|`: a
/// central difference carries round-off near `1e-10 |f|`, which swamps the
/// relative error of a near-zero entry. Returns the largest relative error.
pub fn param_grad_check<F>(ps: &ParamSet, f: F, r: &mut Stream, directions: usize, coords: usize) -> f64
where
    F: for<'t> Fn(&BoundParams<'t>, &'t Tape) -> fusiondet::Result<Var<'t>>,
{
    let tape = Tape::new();
    let bp = ps.bind(&tape);
    let root = f(&bp, &tape).expect("forward");
    let grads = backward(root, &bp).expect("backward");
    let g: Vec<f64> = grads.values().flat_map(|t| t.data().iter().copied()).collect();
    let theta = ps.flatten();
    assert_eq!(g.len(), theta.len());
    let at = |flat: Vec<f64>| eval_params(&ps.unflatten(&flat).expect("layout"), &f);

    let mut worst: f64 = 0.0;
    let gn = norm(&g);
    for _ in 0..directions {
        let noise = rng::normal_tensor(r, &[g.len()]).into_data();
        let nn = norm(&noise).max(1e-300);
        let d: Vec<f64> = g.iter().zip(&noise).map(|(gi, ni)| gi + gn * ni / nn).collect();
        let dn = norm(&d).max(1e-300);
        let d: Vec<f64> = d.iter().map(|v| v / dn).collect();
        let analytic: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let shift = |s: f64| theta.iter().zip(&d).map(|(t, di)| t + s * di).collect::<Vec<_>>();
        let numeric = (at(shift(FD_STEP)) - at(shift(-FD_STEP))) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(&[analytic], &[numeric]));
    }
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let active: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 1e-3 * gmax && gmax > 0.0).collect();
    for _ in 0..coords.min(active.len()) {
        let i = active[r.random_range(0..active.len())];
        let mut up = theta.clone();
        up[i] += FD_STEP;
        let mut down = theta.clone();
        down[i] -= FD_STEP;
        analytic.push(g[i]);
        numeric.push((at(up) - at(down)) / (2.0 * FD_STEP));
    }
    if !analytic.is_empty() {
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// The losses covered by gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Detector,
    Ssim,
    Pixel,
    Gradient,
    Fusion,
}

pub const LOSS_KINDS: [LossKind; 5] = [
    LossKind::Detector,
    LossKind::Ssim,
    LossKind::Pixel,
    LossKind::Gradient,
    LossKind::Fusion,
];

/// Gradient-check relative error of one loss on a random 8x8 instance.
pub fn loss_fd_instance(kind: LossKind, seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let (h, w) = (8, 8);
    let x = image(&mut r, h, w);
    let y = image(&mut r, h, w);
    let u = image(&mut r, h, w);
    let mask = ObjectMask::from_boxes(&random_boxes(&mut r, 2), h, w);
    match kind {
        LossKind::Detector => {
            let pred = uniform(&mut r, &[4, 4], -2.0, 2.0);
            let target = uniform(&mut r, &[4, 4], -2.0, 2.0);
            grad_check(&[pred], |v| {
                detector_loss(v[0], v[0].tape().constant(target.clone()))
            })
        }
        LossKind::Ssim => grad_check(&[u], |v| {
            let t = v[0].tape();
            ssim_loss(v[0], t.constant(x.clone()), t.constant(y.clone()))
        }),
        LossKind::Pixel => {
            let sw = saliency_weights(&x, &y).expect("weights");
            grad_check(&[u], |v| pixel_loss(v[0], &x, &y, &mask, &sw))
        }
        LossKind::Gradient => grad_check(&[u], |v| gradient_loss(v[0], &x, &y)),
        LossKind::Fusion => grad_check(&[u], |v| {
            Ok(fusion_loss(v[0], &x, &y, &mask, &LossWeights::default())?.total)
        }),
    }
}

/// Default-config parameters with every value jittered, so biases are
/// nonzero and no activation sits exactly on a ReLU kink.
pub fn random_orppt_params(cfg: &OrpptConfig, r: &mut Stream) -> ParamSet {
    let mut ps = ParamSet::new();
    orppt::init_params(cfg, &mut ps, r).expect("init");
    let flat: Vec<f64> = ps
        .flatten()
        .into_iter()
        .map(|v| v + 0.1 * rng::normal(r))
        .collect();
    ps.unflatten(&flat).expect("layout")
}

/// Gradient-check relative error of the full fusion forward pass on a random
/// 8x8 instance: scalar `sum(u * R)` checked against the inputs
/// coordinate-wise and against the parameters by directional derivatives.
pub fn orppt_fd_instance(seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let cfg = OrpptConfig::default();
    let ps = random_orppt_params(&cfg, &mut r);
    let x = image(&mut r, 8, 8);
    let y = image(&mut r, 8, 8);
    let proj = uniform(&mut r, &[8, 8], -1.0, 1.0);

    let tape_in = {
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let u = orppt::fuse_forward(&bp, &cfg, xv, yv).expect("forward").fused;
        let root = u.mul(tape.constant(proj.clone())).and_then(Var::sum).expect("root");
        let g = tape.backward(root).expect("backward");
        let mut v = g.get(xv).into_data();
        v.extend(g.get(yv).into_data());
        v
    };
    let value = |x: &Tensor, y: &Tensor| -> f64 {
        let tape = Tape::new();
        let bp = ps.bind(&tape);
        let u = orppt::fuse_forward(&bp, &cfg, tape.constant(x.clone()), tape.constant(y.clone()))
            .expect("forward")
            .fused;
        u.mul(tape.constant(proj.clone())).and_then(Var::sum).expect("root").item()
    };
    let mut numeric = Vec::with_capacity(128);
    for which in 0..2 {
        for i in 0..64 {
            let (mut xu, mut yu) = (x.clone(), y.clone());
            let (mut xd, mut yd) = (x.clone(), y.clone());
            if which == 0 {
                xu.data_mut()[i] += FD_STEP;
                xd.data_mut()[i] -= FD_STEP;
            } else {
                yu.data_mut()[i] += FD_STEP;
                yd.data_mut()[i] -= FD_STEP;
            }
            numeric.push((value(&xu, &yu) - value(&xd, &yd)) / (2.0 * FD_STEP));
        }
    }
    let input_err = rel_err(&tape_in, &numeric);

    let param_err = param_grad_check(
        &ps,
        |bp, tape| {
            let u = orppt::fuse_forward(bp, &cfg, tape.constant(x.clone()), tape.constant(y.clone()))?.fused;
            u.mul(tape.constant(proj.clone()))?.sum()
        },
        &mut r,
        3,
        8,
    );
    input_err.max(param_err)
}

/// Gaussian-weighted local mean with the window truncated at the border and
/// its weights renormalised, evaluated tap by tap.
pub fn window_mean(img: &Tensor, size: usize, sigma: f64) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = (size / 2) as isize;
    Tensor::from_fn(&[h, w], |idx| {
        let (i, j) = ((idx / w) as isize, (idx % w) as isize);
        let (mut num, mut den) = (0.0, 0.0);
        for di in -r..=r {
            for dj in -r..=r {
                let (y, x) = (i + di, j + dj);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let k = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                num += k * img.at(&[y as usize, x as usize]);
                den += k;
            }
        }
        num / den
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random `p x 2` columns with a random norm ratio and correlation, full
/// rank with probability one.
pub fn random_columns(r: &mut Stream, p: usize) -> Vec<Vec<f64>> {
    let a = rng::normal_tensor(r, &[p]).into_data();
    let b = rng::normal_tensor(r, &[p]).into_data();
    let ratio = 10f64.powf(r.random_range(-2.0..2.0));
    let mix = r.random_range(-0.9..0.9);
    let d: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| ratio * (mix * x + (1.0 - mix * mix).sqrt() * y))
        .collect();
    vec![a, d]
}

/// Two orthonormal vectors from Gram-Schmidt on Gaussian draws.
pub fn random_orthonormal_pair(r: &mut Stream, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q1 = rng::normal_tensor(r, &[p]).into_data();
    let n1 = norm(&q1);
    q1.iter_mut().for_each(|v| *v /= n1);
    let mut q2 = rng::normal_tensor(r, &[p]).into_data();
    let d = dot(&q1, &q2);
    q2.iter_mut().zip(&q1).for_each(|(v, a)| *v -= d * a);
    let n2 = norm(&q2);
    q2.iter_mut().for_each(|v| *v /= n2);
    (q1, q2)
}

/// `|G - s Q|_F` for `Q = [q1, q2]`.
pub fn distance_to_scaled(cols: &[Vec<f64>], s: f64, q: &(Vec<f64>, Vec<f64>)) -> f64 {
    let d1: f64 = cols[0].iter().zip(&q.0).map(|(g, v)| (g - s * v).powi(2)).sum();
    let d2: f64 = cols[1].iter().zip(&q.1).map(|(g, v)| (g - s * v).powi(2)).sum();
    (d1 + d2).sqrt()
}

/// Singular values of a `p x 2` matrix from the closed-form eigenvalues of
/// its 2x2 Gram matrix, descending.
pub fn singular_values_2(cols: &[Vec<f64>]) -> (f64, f64) {
    let (a, b, c) = (dot(&cols[0], &cols[0]), dot(&cols[0], &cols[1]), dot(&cols[1], &cols[1]));
    let mid = (a + c) / 2.0;
    let rad = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    ((mid + rad).sqrt(), (mid - rad).max(0.0).sqrt())
}

/// Alignment by the polar formula `sigma_min G (G^T G)^(-1/2)`, using the
/// closed-form square root of a 2x2 SPD matrix.
pub fn polar_align(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (a, b, c) = (dot(&cols[0], &cols[0]), dot(&cols[0], &cols[1]), dot(&cols[1], &cols[1]));
    let s = (a * c - b * b).sqrt();
    let t = (a + c + 2.0 * s).sqrt();
    // sqrt(M) = (M + s I) / t, det(sqrt(M)) = s
    let (p, q, rr) = ((a + s) / t, b / t, (c + s) / t);
    let inv = [[rr / s, -q / s], [-q / s, p / s]];
    let sigma_min = singular_values_2(cols).1;
    (0..2)
        .map(|j| {
            cols[0]
                .iter()
                .zip(&cols[1])
                .map(|(g0, g1)| sigma_min * (g0 * inv[0][j] + g1 * inv[1][j]))
                .collect()
        })
        .collect()
}

/// Latent scale used by the diffusion checks.
pub const SCALE: f64 = 2.0;

pub fn schedule(steps: usize) -> DiffusionSchedule {
    DiffusionSchedule::new(steps, ScheduleKind::Cosine).expect("schedule")
}

pub fn boxes(seed: u64, n: usize) -> BoxSet {
    random_boxes(&mut rng::stream(seed), n)
}

pub fn scaled(z0: &BoxSet) -> Tensor {
    ScaledLatent::from_boxes(&z0.to_tensor().expect("boxes"), SCALE).latent
}

/// Mean and population variance of every coordinate of `z_t` over `n`
/// independent noise draws.
fn moments(z0: &BoxSet, t: usize, s: &DiffusionSchedule, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed);
    let k = z0.len() * 4;
    let (mut sum, mut sq) = (vec![0.0; k], vec![0.0; k]);
    for _ in 0..n {
        let eps = rng::normal_tensor(&mut r, &[z0.len(), 4]);
        let z = forward_noise(z0, t, &eps, s, SCALE).expect("diffusion").latent;
        for (i, v) in z.data().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let var = sq.iter().zip(&mean).map(|(q, m)| q / n as f64 - m * m).collect();
    (mean, var)
}

/// Two-sided 3-sigma bound on one coordinate's Monte-Carlo mean.
pub const Z_SINGLE: f64 = 3.0;
/// The same 0.27% false-alarm rate spread over the 48 coordinate checks of
/// the sweep below (Bonferroni).
pub const Z_SWEEP: f64 = 4.15;

/// Largest deviation of the Monte-Carlo moments from their targets, as
/// fractions of the allowed bounds (`<= 1` passes). Means may deviate by
/// `z` standard errors, variances by 5%.
pub fn moment_test(t: usize, steps: usize, seed: u64, z: f64) -> f64 {
    let s = schedule(steps);
    let z0 = boxes(seed, 2);
    let n = 100_000;
    let (mean, var) = moments(&z0, t, &s, n, seed ^ 0xabc);
    let ab = s.alpha_bar(t);
    let target = scaled(&z0);
    let mean_bound = z * ((1.0 - ab) / n as f64).sqrt();
    let mut worst: f64 = 0.0;
    for (i, m) in mean.iter().enumerate() {
        worst = worst.max((m - ab.sqrt() * target.data()[i]).abs() / mean_bound);
        worst = worst.max((var[i] - (1.0 - ab)).abs() / (0.05 * (1.0 - ab)));
    }
    worst
}

/// Largest coordinate error when DDIM with the true clean latent replays
/// the forward trajectory along the full grid of `steps` steps.
pub fn exact_trajectory_error(seed: u64, total: usize, steps: usize) -> f64 {
    let s = schedule(total);
    let z0 = boxes(seed, 3);
    let eps = rng::normal_tensor(&mut rng::stream(seed ^ 0x55), &[3, 4]);
    let clean = scaled(&z0);
    let grid = time_grid(total, steps).expect("diffusion");
    let mut z = forward_noise(&z0, grid[0], &eps, &s, SCALE).expect("diffusion").latent;
    let mut worst: f64 = 0.0;
    for pair in grid.windows(2) {
        z = ddim_step(&z, &clean, pair[0], pair[1], &s).expect("diffusion");
        let expect = forward_noise(&z0, pair[1], &eps, &s, SCALE).expect("diffusion").latent;
        worst = worst.max(z.max_abs_diff(&expect));
    }
    worst
}

/// `|two half steps - one step|` for a constant clean prediction.
pub fn half_step_error(seed: u64, total: usize, t: usize, mid: usize, end: usize) -> f64 {
    let s = schedule(total);
    let mut r = rng::stream(seed);
    let z = rng::normal_tensor(&mut r, &[4, 4]);
    let pred = rng::normal_tensor(&mut r, &[4, 4]);
    let two = ddim_step(&ddim_step(&z, &pred, t, mid, &s).expect("diffusion"), &pred, mid, end, &s).expect("diffusion");
    let one = ddim_step(&z, &pred, t, end, &s).expect("diffusion");
    two.max_abs_diff(&one)
}

