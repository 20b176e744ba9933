//! Instance normalization, rectifier, and global average pooling.

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Variance floor inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

pub struct InstanceNormCtx {
    /// Per `(n, c)` plane: (mean, 1/sqrt(var + eps)).
    stats: Vec<(f64, f64)>,
    eps: f64,
}

/// Per-sample, per-channel normalization over the spatial extent with a
/// learnable affine: `y = gamma * (x - mean)/sqrt(var + eps) + beta`.
/// No running statistics are kept, so batch size never affects the result.
pub fn instance_norm_forward(
    x: &Volume5,
    gamma: &Volume5,
    beta: &Volume5,
) -> Result<(Volume5, InstanceNormCtx)> {
    let [n, c, _, _, _] = x.shape();
    if gamma.shape() != [1, c, 1, 1, 1] || beta.shape() != [1, c, 1, 1, 1] {
        return Err(Error::shape(format!(
            "norm affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let eps = NORM_EPS;
    let mut out = Volume5::zeros_like(x);
    let mut stats = Vec::with_capacity(n * c);
    let plane_len = x.plane_len() as f64;
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let mean = src.iter().sum::<f64>() / plane_len;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane_len;
            let inv_std = 1.0 / (var + eps).sqrt();
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let dst = out.plane_mut(ni, ci);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = g * (s - mean) * inv_std + b;
            }
            stats.push((mean, inv_std));
        }
    }
    Ok((out, InstanceNormCtx { stats, eps }))
}

pub struct InstanceNormGrads {
    pub input: Volume5,
    pub gamma: Volume5,
    pub beta: Volume5,
}

pub fn instance_norm_backward(
    go: &Volume5,
    x: &Volume5,
    gamma: &Volume5,
    ctx: &InstanceNormCtx,
) -> Result<InstanceNormGrads> {
    go.check_same_shape(x)?;
    let [n, c, _, _, _] = x.shape();
    if ctx.stats.len() != n * c {
        return Err(Error::usage("instance norm context mismatch"));
    }
    let _ = ctx.eps;
    let plane_len = x.plane_len() as f64;
    let mut gx = Volume5::zeros_like(x);
    let mut ggamma = Volume5::zeros([1, c, 1, 1, 1])?;
    let mut gbeta = Volume5::zeros([1, c, 1, 1, 1])?;
    for ni in 0..n {
        for ci in 0..c {
            let (mean, inv_std) = ctx.stats[ni * c + ci];
            let g = gamma.data()[ci];
            let src = x.plane(ni, ci);
            let gop = go.plane(ni, ci);
            // gradients of the affine
            let mut sum_go = 0.0;
            let mut sum_go_xhat = 0.0;
            for i in 0..src.len() {
                let xhat = (src[i] - mean) * inv_std;
                sum_go += gop[i];
                sum_go_xhat += gop[i] * xhat;
            }
            ggamma.data_mut()[ci] += sum_go_xhat;
            gbeta.data_mut()[ci] += sum_go;
            // gradient through the normalization
            let gxp = gx.plane_mut(ni, ci);
            let mean_go = sum_go / plane_len;
            let mean_go_xhat = sum_go_xhat / plane_len;
            for i in 0..src.len() {
                let xhat = (src[i] - mean) * inv_std;
                gxp[i] = g * inv_std * (gop[i] - mean_go - xhat * mean_go_xhat);
            }
        }
    }
    Ok(InstanceNormGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    })
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Volume5) -> Volume5 {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(go: &Volume5, x: &Volume5) -> Result<Volume5> {
    go.check_same_shape(x)?;
    let mut out = Volume5::zeros_like(x);
    let od = out.data_mut();
    for i in 0..od.len() {
        od[i] = if x.data()[i] > 0.0 { go.data()[i] } else { 0.0 };
    }
    Ok(out)
}

/// Spatial mean per `(n, c)`, output `(n, c, 1, 1, 1)`.
pub fn global_avg_pool_forward(x: &Volume5) -> Result<Volume5> {
    let [n, c, _, _, _] = x.shape();
    let mut out = Volume5::zeros([n, c, 1, 1, 1])?;
    let inv = 1.0 / x.plane_len() as f64;
    for ni in 0..n {
        for ci in 0..c {
            out.plane_mut(ni, ci)[0] = x.plane(ni, ci).iter().sum::<f64>() * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(go: &Volume5, in_shape: [usize; 5]) -> Result<Volume5> {
    let [n, c, _, _, _] = in_shape;
    if go.shape() != [n, c, 1, 1, 1] {
        return Err(Error::usage(format!(
            "pool gradient shape {:?} does not match ({n},{c},1,1,1)",
            go.shape()
        )));
    }
    let mut out = Volume5::zeros(in_shape)?;
    let inv = 1.0 / out.plane_len() as f64;
    for ni in 0..n {
        for ci in 0..c {
            let g = go.plane(ni, ci)[0] * inv;
            out.plane_mut(ni, ci).fill(g);
        }
    }
    Ok(out)
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
    fn normalized_planes_have_zero_mean_unit_var() {
        let x = random_volume([2, 3, 4, 4, 4], 1);
        let gamma = Volume5::new([1, 3, 1, 1, 1], 1.0).unwrap();
        let beta = Volume5::zeros([1, 3, 1, 1, 1]).unwrap();
        let (y, _) = instance_norm_forward(&x, &gamma, &beta).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let p = y.plane(n, c);
                let mean = p.iter().sum::<f64>() / p.len() as f64;
                let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn constant_plane_maps_to_beta() {
        let x = Volume5::new([1, 1, 2, 2, 2], 5.0).unwrap();
        let gamma = Volume5::new([1, 1, 1, 1, 1], 2.0).unwrap();
        let beta = Volume5::new([1, 1, 1, 1, 1], 0.3).unwrap();
        let (y, _) = instance_norm_forward(&x, &gamma, &beta).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn relu_clamps_and_masks() {
        let x = Volume5::from_vec([1, 1, 1, 1, 4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let go = Volume5::new([1, 1, 1, 1, 4], 1.0).unwrap();
        let gx = relu_backward(&go, &x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gap_mean_and_backward() {
        let x = random_volume([1, 2, 2, 2, 2], 3);
        let pooled = global_avg_pool_forward(&x).unwrap();
        assert!((pooled.plane(0, 0)[0] - x.plane(0, 0).iter().sum::<f64>() / 8.0).abs() < 1e-15);
        let go = Volume5::new([1, 2, 1, 1, 1], 8.0).unwrap();
        let gx = global_avg_pool_backward(&go, x.shape()).unwrap();
        assert!(gx.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
