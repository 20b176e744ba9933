//! Loss terms: cross-entropy, windowed normalized cross-correlation, and
//! displacement smoothness.

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Softmax cross-entropy over `(n, C, 1, 1, 1)` logits, batch-averaged.
/// Returns the loss and the softmax probabilities `(n, C)` row-major.
pub fn cross_entropy_forward(logits: &Volume5, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [n, c, d, h, w] = logits.shape();
    if d != 1 || h != 1 || w != 1 {
        return Err(Error::shape(format!(
            "logits must be (n, C, 1, 1, 1), got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for (ni, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::argument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let row: Vec<f64> = (0..c).map(|ci| logits.plane(ni, ci)[0]).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &l in &row {
            denom += (l - max).exp();
        }
        let lse = max + denom.ln();
        for ci in 0..c {
            probs[ni * c + ci] = (row[ci] - lse).exp();
        }
        loss += lse - row[y];
    }
    Ok((loss / n as f64, probs))
}

/// `(softmax - onehot) / n`, scaled by the upstream scalar gradient.
pub fn cross_entropy_backward(
    go: f64,
    logits: &Volume5,
    labels: &[usize],
    probs: &[f64],
) -> Result<Volume5> {
    let [n, c, _, _, _] = logits.shape();
    let mut grad = Volume5::zeros_like(logits);
    let scale = go / n as f64;
    for (ni, &y) in labels.iter().enumerate() {
        for ci in 0..c {
            let p = probs[ni * c + ci];
            let onehot = if ci == y { 1.0 } else { 0.0 };
            grad.plane_mut(ni, ci)[0] = scale * (p - onehot);
        }
    }
    Ok(grad)
}

/// Inclusive prefix-sum volume for O(1) box sums over one plane.
struct IntegralPlane {
    d: usize,
    h: usize,
    w: usize,
    acc: Vec<f64>,
}

impl IntegralPlane {
    fn build(plane: &[f64], d: usize, h: usize, w: usize) -> Self {
        let (dd, hh, ww) = (d + 1, h + 1, w + 1);
        let mut acc = vec![0.0; dd * hh * ww];
        for z in 0..d {
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += plane[(z * h + y) * w + x];
                    let idx = ((z + 1) * hh + (y + 1)) * ww + (x + 1);
                    acc[idx] = row + acc[idx - ww] // (z+1, y, x+1)
                        + acc[idx - hh * ww]       // (z, y+1, x+1)
                        - acc[idx - hh * ww - ww]; // (z, y, x+1)
                }
            }
        }
        Self { d, h, w, acc }
    }

    /// Sum over the inclusive box `[z0..=z1, y0..=y1, x0..=x1]`.
    #[inline]
    fn box_sum(&self, z0: usize, z1: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        debug_assert!(z1 < self.d && y1 < self.h && x1 < self.w);
        let (hh, ww) = (self.h + 1, self.w + 1);
        let at = |z: usize, y: usize, x: usize| self.acc[(z * hh + y) * ww + x];
        at(z1 + 1, y1 + 1, x1 + 1) - at(z0, y1 + 1, x1 + 1) - at(z1 + 1, y0, x1 + 1)
            - at(z1 + 1, y1 + 1, x0)
            + at(z0, y0, x1 + 1)
            + at(z0, y1 + 1, x0)
            + at(z1 + 1, y0, x0)
            - at(z0, y0, x0)
    }
}

#[inline]
fn window_bounds(center: usize, radius: usize, size: usize) -> (usize, usize) {
    let lo = center.saturating_sub(radius);
    let hi = (center + radius).min(size - 1);
    (lo, hi)
}

/// Per-plane window statistics used by both directions of the NCC loss.
struct NccPlaneStats {
    /// correlation per window center
    r: Vec<f64>,
    /// 1 / sqrt(va * vb)
    alpha: Vec<f64>,
    /// r / va
    beta: Vec<f64>,
    /// r / vb
    gamma: Vec<f64>,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
}

fn ncc_plane_stats(
    a: &[f64],
    b: &[f64],
    sp: [usize; 3],
    radius: usize,
    eps: f64,
) -> NccPlaneStats {
    let [d, h, w] = sp;
    let len = d * h * w;
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ia = IntegralPlane::build(a, d, h, w);
    let ib = IntegralPlane::build(b, d, h, w);
    let iaa = IntegralPlane::build(&aa, d, h, w);
    let ibb = IntegralPlane::build(&bb, d, h, w);
    let iab = IntegralPlane::build(&ab, d, h, w);
    let mut out = NccPlaneStats {
        r: vec![0.0; len],
        alpha: vec![0.0; len],
        beta: vec![0.0; len],
        gamma: vec![0.0; len],
        mean_a: vec![0.0; len],
        mean_b: vec![0.0; len],
    };
    let mut i = 0;
    for z in 0..d {
        let (z0, z1) = window_bounds(z, radius, d);
        for y in 0..h {
            let (y0, y1) = window_bounds(y, radius, h);
            for x in 0..w {
                let (x0, x1) = window_bounds(x, radius, w);
                let cnt = ((z1 - z0 + 1) * (y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                let s_a = ia.box_sum(z0, z1, y0, y1, x0, x1);
                let s_b = ib.box_sum(z0, z1, y0, y1, x0, x1);
                let s_aa = iaa.box_sum(z0, z1, y0, y1, x0, x1);
                let s_bb = ibb.box_sum(z0, z1, y0, y1, x0, x1);
                let s_ab = iab.box_sum(z0, z1, y0, y1, x0, x1);
                let cov = s_ab - s_a * s_b / cnt;
                // clamp tiny negative rounding residue before adding eps
                let va = (s_aa - s_a * s_a / cnt).max(0.0) + eps;
                let vb = (s_bb - s_b * s_b / cnt).max(0.0) + eps;
                let denom = (va * vb).sqrt();
                let r = cov / denom;
                out.r[i] = r;
                out.alpha[i] = 1.0 / denom;
                out.beta[i] = r / va;
                out.gamma[i] = r / vb;
                out.mean_a[i] = s_a / cnt;
                out.mean_b[i] = s_b / cnt;
                i += 1;
            }
        }
    }
    out
}

/// Negative mean local normalized cross-correlation. Windows are clipped at
/// the borders (statistics use however many voxels remain in range), `eps`
/// regularizes both variances, and the mean runs over every voxel, channel
/// and batch item. The value always lies in `[-1, 1]`.
pub fn ncc_loss_forward(a: &Volume5, b: &Volume5, window: usize, eps: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::argument(format!(
            "NCC window must be odd and positive, got {window}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::argument(format!("NCC eps must be positive, got {eps}")));
    }
    let [n, c, d, h, w] = a.shape();
    let radius = window / 2;
    let mut acc = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            let stats = ncc_plane_stats(a.plane(ni, ci), b.plane(ni, ci), [d, h, w], radius, eps);
            acc += stats.r.iter().sum::<f64>();
        }
    }
    Ok(-acc / (n * c * d * h * w) as f64)
}

pub struct NccGrads {
    pub a: Volume5,
    pub b: Volume5,
}

/// Analytic gradient of [`ncc_loss_forward`] with respect to both inputs.
///
/// For a voxel `p`, every window `o` containing it contributes
/// `d r_o / d a(p) = (b(p) - mean_b_o) * alpha_o - (a(p) - mean_a_o) * beta_o`,
/// so the sums over containing windows are box filters of the per-window
/// coefficient maps, evaluated again with integral volumes.
pub fn ncc_loss_backward(
    go: f64,
    a: &Volume5,
    b: &Volume5,
    window: usize,
    eps: f64,
) -> Result<NccGrads> {
    a.check_same_shape(b)?;
    let [n, c, d, h, w] = a.shape();
    let radius = window / 2;
    let scale = -go / (n * c * d * h * w) as f64;
    let mut ga = Volume5::zeros_like(a);
    let mut gb = Volume5::zeros_like(b);
    for ni in 0..n {
        for ci in 0..c {
            let ap = a.plane(ni, ci);
            let bp = b.plane(ni, ci);
            let stats = ncc_plane_stats(ap, bp, [d, h, w], radius, eps);
            // box-filter the per-window coefficients
            let alpha_ma: Vec<f64> = stats
                .alpha
                .iter()
                .zip(&stats.mean_a)
                .map(|(x, m)| x * m)
                .collect();
            let alpha_mb: Vec<f64> = stats
                .alpha
                .iter()
                .zip(&stats.mean_b)
                .map(|(x, m)| x * m)
                .collect();
            let beta_ma: Vec<f64> = stats
                .beta
                .iter()
                .zip(&stats.mean_a)
                .map(|(x, m)| x * m)
                .collect();
            let gamma_mb: Vec<f64> = stats
                .gamma
                .iter()
                .zip(&stats.mean_b)
                .map(|(x, m)| x * m)
                .collect();
            let i_alpha = IntegralPlane::build(&stats.alpha, d, h, w);
            let i_alpha_ma = IntegralPlane::build(&alpha_ma, d, h, w);
            let i_alpha_mb = IntegralPlane::build(&alpha_mb, d, h, w);
            let i_beta = IntegralPlane::build(&stats.beta, d, h, w);
            let i_beta_ma = IntegralPlane::build(&beta_ma, d, h, w);
            let i_gamma = IntegralPlane::build(&stats.gamma, d, h, w);
            let i_gamma_mb = IntegralPlane::build(&gamma_mb, d, h, w);
            let gap = ga.plane_mut(ni, ci);
            let gbp = gb.plane_mut(ni, ci);
            let mut i = 0;
            for z in 0..d {
                let (z0, z1) = window_bounds(z, radius, d);
                for y in 0..h {
                    let (y0, y1) = window_bounds(y, radius, h);
                    for x in 0..w {
                        let (x0, x1) = window_bounds(x, radius, w);
                        let s_alpha = i_alpha.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_alpha_ma = i_alpha_ma.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_alpha_mb = i_alpha_mb.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_beta = i_beta.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_beta_ma = i_beta_ma.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_gamma = i_gamma.box_sum(z0, z1, y0, y1, x0, x1);
                        let s_gamma_mb = i_gamma_mb.box_sum(z0, z1, y0, y1, x0, x1);
                        let av = ap[i];
                        let bv = bp[i];
                        gap[i] = scale
                            * (bv * s_alpha - s_alpha_mb - (av * s_beta - s_beta_ma));
                        gbp[i] = scale
                            * (av * s_alpha - s_alpha_ma - (bv * s_gamma - s_gamma_mb));
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(NccGrads { a: ga, b: gb })
}

/// Mean squared forward difference of a displacement field, averaged over
/// the three axes: `(1/3) * sum_axis mean_voxels |d psi / d axis|^2`, where
/// the squared norm sums over the three field channels and the last slice
/// along each axis has no forward neighbor and is excluded from that axis.
pub fn smoothness_loss_forward(disp: &Volume5) -> Result<f64> {
    let [n, c, d, h, w] = disp.shape();
    if c != 3 {
        return Err(Error::shape(format!(
            "smoothness expects a 3-channel field, got {:?}",
            disp.shape()
        )));
    }
    let mut total = 0.0;
    for (axis, counts) in axis_counts([d, h, w]).into_iter().enumerate() {
        if counts == 0 {
            continue;
        }
        let mut acc = 0.0;
        for ni in 0..n {
            for ch in 0..3 {
                let p = disp.plane(ni, ch);
                acc += axis_sq_diff_sum(p, [d, h, w], axis);
            }
        }
        total += acc / (n * counts) as f64;
    }
    Ok(total / 3.0)
}

pub fn smoothness_loss_backward(go: f64, disp: &Volume5) -> Result<Volume5> {
    let [n, c, d, h, w] = disp.shape();
    if c != 3 {
        return Err(Error::shape("smoothness expects a 3-channel field"));
    }
    let mut grad = Volume5::zeros_like(disp);
    for (axis, counts) in axis_counts([d, h, w]).into_iter().enumerate() {
        if counts == 0 {
            continue;
        }
        let scale = go * 2.0 / (3.0 * (n * counts) as f64);
        let step = match axis {
            0 => h * w,
            1 => w,
            _ => 1,
        };
        let limit = |z: usize, y: usize, x: usize| match axis {
            0 => z + 1 < d,
            1 => y + 1 < h,
            _ => x + 1 < w,
        };
        for ni in 0..n {
            for ch in 0..3 {
                let p = disp.plane(ni, ch).to_vec();
                let gp = grad.plane_mut(ni, ch);
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            if !limit(z, y, x) {
                                continue;
                            }
                            let i = (z * h + y) * w + x;
                            let diff = p[i + step] - p[i];
                            gp[i + step] += scale * diff;
                            gp[i] -= scale * diff;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

fn axis_counts([d, h, w]: [usize; 3]) -> [usize; 3] {
    [
        (d.saturating_sub(1)) * h * w,
        d * (h.saturating_sub(1)) * w,
        d * h * (w.saturating_sub(1)),
    ]
}

fn axis_sq_diff_sum(plane: &[f64], [d, h, w]: [usize; 3], axis: usize) -> f64 {
    let step = match axis {
        0 => h * w,
        1 => w,
        _ => 1,
    };
    let mut acc = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let valid = match axis {
                    0 => z + 1 < d,
                    1 => y + 1 < h,
                    _ => x + 1 < w,
                };
                if !valid {
                    continue;
                }
                let i = (z * h + y) * w + x;
                let diff = plane[i + step] - plane[i];
                acc += diff * diff;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_volume(shape: [usize; 5], seed: u64) -> Volume5 {
        let mut rng = Rng::new(seed);
        let numel: usize = shape.iter().product();
        Volume5::from_vec(shape, (0..numel).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Volume5::zeros([1, 2, 1, 1, 1]).unwrap();
        let (loss, probs) = cross_entropy_forward(&logits, &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_near_zero() {
        let logits = Volume5::from_vec([1, 2, 1, 1, 1], vec![20.0, -20.0]).unwrap();
        let (loss, _) = cross_entropy_forward(&logits, &[0]).unwrap();
        assert!(loss < 1e-8);
        assert!(loss >= 0.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let logits = Volume5::zeros([1, 2, 1, 1, 1]).unwrap();
        assert!(matches!(
            cross_entropy_forward(&logits, &[2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let logits = Volume5::from_vec([2, 2, 1, 1, 1], vec![0.4, -0.3, 1.2, 0.8]).unwrap();
        let labels = [1usize, 0];
        let (_, probs) = cross_entropy_forward(&logits, &labels).unwrap();
        let grad = cross_entropy_backward(1.0, &logits, &labels, &probs).unwrap();
        for ni in 0..2 {
            for ci in 0..2 {
                let onehot = if labels[ni] == ci { 1.0 } else { 0.0 };
                let expect = (probs[ni * 2 + ci] - onehot) / 2.0;
                assert!((grad.plane(ni, ci)[0] - expect).abs() < 1e-14);
            }
        }
    }

    /// Naive per-window NCC, used as an oracle for the integral-volume path.
    fn naive_ncc(a: &Volume5, b: &Volume5, window: usize, eps: f64) -> f64 {
        let [n, c, d, h, w] = a.shape();
        let r = (window / 2) as i64;
        let mut acc = 0.0;
        for ni in 0..n {
            for ci in 0..c {
                for z in 0..d as i64 {
                    for y in 0..h as i64 {
                        for x in 0..w as i64 {
                            let mut va = Vec::new();
                            let mut vb = Vec::new();
                            for dz in -r..=r {
                                for dy in -r..=r {
                                    for dx in -r..=r {
                                        let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                                        if zz < 0
                                            || yy < 0
                                            || xx < 0
                                            || zz >= d as i64
                                            || yy >= h as i64
                                            || xx >= w as i64
                                        {
                                            continue;
                                        }
                                        va.push(a.at(ni, ci, zz as usize, yy as usize, xx as usize));
                                        vb.push(b.at(ni, ci, zz as usize, yy as usize, xx as usize));
                                    }
                                }
                            }
                            let cnt = va.len() as f64;
                            let ma = va.iter().sum::<f64>() / cnt;
                            let mb = vb.iter().sum::<f64>() / cnt;
                            let cov: f64 =
                                va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum();
                            let sa: f64 = va.iter().map(|p| (p - ma) * (p - ma)).sum::<f64>() + eps;
                            let sb: f64 = vb.iter().map(|q| (q - mb) * (q - mb)).sum::<f64>() + eps;
                            acc += cov / (sa * sb).sqrt();
                        }
                    }
                }
            }
        }
        -acc / (n * c * d * h * w) as f64
    }

    #[test]
    fn matches_naive_window_oracle() {
        let a = random_volume([1, 1, 5, 6, 7], 1);
        let b = random_volume([1, 1, 5, 6, 7], 2);
        for window in [3usize, 5] {
            let fast = ncc_loss_forward(&a, &b, window, 1e-5).unwrap();
            let slow = naive_ncc(&a, &b, window, 1e-5);
            assert!((fast - slow).abs() < 1e-10, "window {window}");
        }
    }

    #[test]
    fn identical_high_variance_inputs_give_minus_one() {
        let a = random_volume([1, 1, 8, 8, 8], 3).map(|v| v * 10.0);
        let loss = ncc_loss_forward(&a, &a, 5, 1e-5).unwrap();
        assert!(loss <= -0.999, "loss = {loss}");
    }

    #[test]
    fn negated_shifted_input_gives_plus_one() {
        let a = random_volume([1, 1, 8, 8, 8], 4).map(|v| v * 10.0);
        let b = a.map(|v| -v + 7.0);
        let loss = ncc_loss_forward(&a, &b, 5, 1e-5).unwrap();
        assert!(loss >= 0.999, "loss = {loss}");
    }

    #[test]
    fn affine_intensity_invariance() {
        let a = random_volume([1, 1, 8, 8, 8], 5).map(|v| v * 5.0);
        let b = random_volume([1, 1, 8, 8, 8], 6).map(|v| v * 5.0);
        let base = ncc_loss_forward(&a, &b, 5, 1e-5).unwrap();
        let remapped = b.map(|v| 2.0 * v + 3.0);
        let loss = ncc_loss_forward(&a, &remapped, 5, 1e-5).unwrap();
        assert!((loss - base).abs() < 1e-3, "{loss} vs {base}");
    }

    #[test]
    fn ncc_bounded_by_one() {
        for seed in 0..10 {
            let a = random_volume([1, 1, 6, 6, 6], seed);
            let b = random_volume([1, 1, 6, 6, 6], seed + 50);
            let loss = ncc_loss_forward(&a, &b, 5, 1e-5).unwrap();
            assert!((-1.0..=1.0).contains(&loss));
        }
    }

    #[test]
    fn independent_random_inputs_weakly_correlated() {
        let mut max_abs: f64 = 0.0;
        for seed in 0..10 {
            let a = random_volume([1, 1, 16, 16, 16], 100 + seed);
            let b = random_volume([1, 1, 16, 16, 16], 200 + seed);
            let loss = ncc_loss_forward(&a, &b, 5, 1e-5).unwrap();
            max_abs = max_abs.max(loss.abs());
        }
        // observed max ~0.03 over these seeds
        println!("max |ncc loss| over 10 independent pairs: {max_abs:.4}");
        assert!(max_abs < 0.15, "max = {max_abs}");
    }

    #[test]
    fn constant_field_zero_smoothness() {
        let mut f = Volume5::zeros([1, 3, 4, 4, 4]).unwrap();
        f.plane_mut(0, 0).fill(2.0);
        f.plane_mut(0, 1).fill(-1.0);
        assert_eq!(smoothness_loss_forward(&f).unwrap(), 0.0);
    }

    #[test]
    fn unit_x_ramp_gives_one_third() {
        let mut f = Volume5::zeros([1, 3, 4, 4, 4]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    f.plane_mut(0, 2)[(z * 4 + y) * 4 + x] = x as f64;
                }
            }
        }
        let loss = smoothness_loss_forward(&f).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-15, "loss = {loss}");
    }

    #[test]
    fn smoothness_nonnegative_random() {
        for seed in 0..5 {
            let f = random_volume([1, 3, 4, 4, 4], 60 + seed);
            assert!(smoothness_loss_forward(&f).unwrap() >= 0.0);
        }
    }
}
