//! Differentiable resampling: trilinear interpolation, displacement-field
//! warping and composition, cross-grid field upsampling, and affine grids.
//!
//! Displacement fields are `(n, 3, z, y, x)` volumes in voxel units of
//! their own grid, channel order `(dz, dy, dx)`. Warping is pull-style:
//! `out(v) = sample(src, v + disp(v))`. Out-of-range reads return zero, so
//! the sampler stays linear in `src`.
//!
//! Affine grids are built as the identity grid plus a displacement,
//! `coords(v) = v + (denorm(A*n(v)) - denorm(n(v)))`, which makes an exact
//! identity matrix produce exact voxel-center coordinates. Normalized
//! coordinates span `[-1, 1]` with endpoints on the first and last voxel
//! center; a size-1 axis maps to 0.

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Displacement field with its pyramid level, for bookkeeping at module
/// boundaries. The wrapped volume always has exactly 3 channels.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    vol: Volume5,
    level: usize,
}

impl DisplacementField {
    pub fn new(vol: Volume5, level: usize) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::shape(format!(
                "displacement field needs 3 channels, got {}",
                vol.channels()
            )));
        }
        vol.check_finite()?;
        Ok(Self { vol, level })
    }

    pub fn volume(&self) -> &Volume5 {
        &self.vol
    }

    pub fn into_volume(self) -> Volume5 {
        self.vol
    }

    pub fn level(&self) -> usize {
        self.level
    }
}

/// 3x4 affine in normalized coordinates, rows ordered `(z, y, x)`; the last
/// column is the translation. Maps normalized target coordinates to
/// normalized source coordinates (pull convention).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix(pub [[f64; 4]; 3]);

impl AffineMatrix {
    pub fn identity() -> Self {
        AffineMatrix([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
    }

    /// 90-degree rotation about the y axis. In normalized `(z, y, x)`
    /// coordinates the source position of target `(nz, ny, nx)` is
    /// `(-nx, ny, nz)`; on a cube grid a one-hot voxel at `(a, b, c)` lands
    /// at `(c, b, N-1-a)`.
    pub fn rotation_90_y() -> Self {
        AffineMatrix([
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ])
    }

    /// Composition `self(other(x))`: `other` is applied first.
    pub fn compose(&self, other: &AffineMatrix) -> AffineMatrix {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 4]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = (0..3).map(|k| a[r][k] * b[k][c]).sum();
            }
            out[r][3] = a[r][3] + (0..3).map(|k| a[r][k] * b[k][3]).sum::<f64>();
        }
        AffineMatrix(out)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Largest absolute deviation of the linear part from orthonormality.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = &self.0;
        let mut defect: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((dot - target).abs());
            }
        }
        defect
    }
}

/// Voxel index to normalized `[-1, 1]` coordinate (size-1 axes map to 0).
#[inline]
pub fn norm_coord(i: f64, size: usize) -> f64 {
    if size > 1 {
        2.0 * i / (size - 1) as f64 - 1.0
    } else {
        0.0
    }
}

/// Inverse of [`norm_coord`].
#[inline]
pub fn denorm_coord(s: f64, size: usize) -> f64 {
    (s + 1.0) * (size - 1) as f64 / 2.0
}

fn require_disp(disp: &Volume5) -> Result<()> {
    if disp.channels() != 3 {
        return Err(Error::shape(format!(
            "displacement field needs 3 channels, got shape {:?}",
            disp.shape()
        )));
    }
    Ok(())
}

/// Trilinear interpolation of `src` at absolute voxel coordinates.
/// `coords` is `(n, 3, z, y, x)` with channels `(cz, cy, cx)`; the output
/// grid is the coords grid. Reads outside `src` return zero; integer
/// coordinates reproduce `src` exactly.
pub fn trilinear_sample(src: &Volume5, coords: &Volume5) -> Result<Volume5> {
    let (out, _) = sample_with_corners(src, coords)?;
    Ok(out)
}

/// Shared inner sampler; also used by every backward pass below.
fn sample_with_corners(src: &Volume5, coords: &Volume5) -> Result<(Volume5, ())> {
    require_disp(coords)?;
    let [n, c, sd, sh, sw] = src.shape();
    let [cn, _, od, oh, ow] = coords.shape();
    if cn != n {
        return Err(Error::shape(format!(
            "batch mismatch: src {n} vs coords {cn}"
        )));
    }
    let mut out = Volume5::zeros([n, c, od, oh, ow])?;
    let plane = od * oh * ow;
    for ni in 0..n {
        let cz = coords.plane(ni, 0);
        let cy = coords.plane(ni, 1);
        let cx = coords.plane(ni, 2);
        for ci in 0..c {
            let sp = src.plane(ni, ci);
            let op = out.plane_mut(ni, ci);
            for i in 0..plane {
                let (z, y, x) = (cz[i], cy[i], cx[i]);
                if !z.is_finite() || !y.is_finite() || !x.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite sample coordinate ({z}, {y}, {x})"
                    )));
                }
                let z0 = z.floor();
                let y0 = y.floor();
                let x0 = x.floor();
                let fz = z - z0;
                let fy = y - y0;
                let fx = x - x0;
                let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
                let mut acc = 0.0;
                for az in 0..2i64 {
                    let zi = z0 + az;
                    if zi < 0 || zi >= sd as i64 {
                        continue;
                    }
                    let wz = if az == 1 { fz } else { 1.0 - fz };
                    for ay in 0..2i64 {
                        let yi = y0 + ay;
                        if yi < 0 || yi >= sh as i64 {
                            continue;
                        }
                        let wy = if ay == 1 { fy } else { 1.0 - fy };
                        let row = (zi as usize * sh + yi as usize) * sw;
                        for ax in 0..2i64 {
                            let xi = x0 + ax;
                            if xi < 0 || xi >= sw as i64 {
                                continue;
                            }
                            let wx = if ax == 1 { fx } else { 1.0 - fx };
                            acc += wz * wy * wx * sp[row + xi as usize];
                        }
                    }
                }
                op[i] = acc;
            }
        }
    }
    Ok((out, ()))
}

pub struct SampleGrads {
    pub src: Volume5,
    pub coords: Volume5,
}

/// Gradients of [`trilinear_sample`] with respect to the source volume and
/// the sample coordinates. At exact integer coordinates the coordinate
/// derivative uses the lower interpolation cell (the `floor` cell).
pub fn trilinear_sample_backward(
    go: &Volume5,
    src: &Volume5,
    coords: &Volume5,
) -> Result<SampleGrads> {
    require_disp(coords)?;
    let [n, c, sd, sh, sw] = src.shape();
    let [_, _, od, oh, ow] = coords.shape();
    if go.shape() != [n, c, od, oh, ow] {
        return Err(Error::usage(format!(
            "upstream gradient shape {:?} does not match sampled output {:?}",
            go.shape(),
            [n, c, od, oh, ow]
        )));
    }
    let mut grad_src = Volume5::zeros_like(src);
    let mut grad_coords = Volume5::zeros_like(coords);
    let plane = od * oh * ow;
    for ni in 0..n {
        let cz = coords.plane(ni, 0);
        let cy = coords.plane(ni, 1);
        let cx = coords.plane(ni, 2);
        for ci in 0..c {
            let sp = src.plane(ni, ci);
            let gp = go.plane(ni, ci);
            let gs = grad_src.plane_mut(ni, ci);
            // channel planes of grad_coords borrowed one at a time
            for i in 0..plane {
                let g = gp[i];
                if g == 0.0 {
                    continue;
                }
                let (z, y, x) = (cz[i], cy[i], cx[i]);
                let z0 = z.floor();
                let y0 = y.floor();
                let x0 = x.floor();
                let fz = z - z0;
                let fy = y - y0;
                let fx = x - x0;
                let (z0, y0, x0) = (z0 as i64, y0 as i64, x0 as i64);
                let mut dz_acc = 0.0;
                let mut dy_acc = 0.0;
                let mut dx_acc = 0.0;
                for az in 0..2i64 {
                    let zi = z0 + az;
                    if zi < 0 || zi >= sd as i64 {
                        continue;
                    }
                    let wz = if az == 1 { fz } else { 1.0 - fz };
                    let dwz = if az == 1 { 1.0 } else { -1.0 };
                    for ay in 0..2i64 {
                        let yi = y0 + ay;
                        if yi < 0 || yi >= sh as i64 {
                            continue;
                        }
                        let wy = if ay == 1 { fy } else { 1.0 - fy };
                        let dwy = if ay == 1 { 1.0 } else { -1.0 };
                        let row = (zi as usize * sh + yi as usize) * sw;
                        for ax in 0..2i64 {
                            let xi = x0 + ax;
                            if xi < 0 || xi >= sw as i64 {
                                continue;
                            }
                            let wx = if ax == 1 { fx } else { 1.0 - fx };
                            let dwx = if ax == 1 { 1.0 } else { -1.0 };
                            let val = sp[row + xi as usize];
                            gs[row + xi as usize] += g * wz * wy * wx;
                            dz_acc += dwz * wy * wx * val;
                            dy_acc += wz * dwy * wx * val;
                            dx_acc += wz * wy * dwx * val;
                        }
                    }
                }
                grad_coords.plane_mut(ni, 0)[i] += g * dz_acc;
                grad_coords.plane_mut(ni, 1)[i] += g * dy_acc;
                grad_coords.plane_mut(ni, 2)[i] += g * dx_acc;
            }
        }
    }
    Ok(SampleGrads {
        src: grad_src,
        coords: grad_coords,
    })
}

/// Identity grid plus displacement: `coords(v) = v + disp(v)`.
fn coords_from_disp(disp: &Volume5) -> Result<Volume5> {
    require_disp(disp)?;
    let [n, _, d, h, w] = disp.shape();
    let mut coords = disp.clone();
    for ni in 0..n {
        for (ch, size) in [(0usize, d), (1, h), (2, w)] {
            let plane = coords.plane_mut(ni, ch);
            let mut i = 0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let base = match ch {
                            0 => z,
                            1 => y,
                            _ => x,
                        } as f64;
                        plane[i] += base;
                        i += 1;
                    }
                }
            }
            let _ = size;
        }
    }
    Ok(coords)
}

/// Pull-warps `src` by a displacement field on the same grid.
pub fn warp(src: &Volume5, disp: &Volume5) -> Result<Volume5> {
    require_disp(disp)?;
    if src.batch() != disp.batch() || src.spatial() != disp.spatial() {
        return Err(Error::shape(format!(
            "warp shape mismatch: src {:?} vs field {:?}",
            src.shape(),
            disp.shape()
        )));
    }
    let coords = coords_from_disp(disp)?;
    trilinear_sample(src, &coords)
}

pub struct WarpGrads {
    pub src: Volume5,
    pub disp: Volume5,
}

pub fn warp_backward(go: &Volume5, src: &Volume5, disp: &Volume5) -> Result<WarpGrads> {
    let coords = coords_from_disp(disp)?;
    let grads = trilinear_sample_backward(go, src, &coords)?;
    Ok(WarpGrads {
        src: grads.src,
        disp: grads.coords,
    })
}

/// Composition of displacement fields on one grid:
/// `result(v) = inner(v) + sample(outer, v + inner(v))`, so that
/// `warp(warp(src, outer), inner) == warp(src, compose(outer, inner))` up
/// to interpolation error.
pub fn compose(outer: &Volume5, inner: &Volume5) -> Result<Volume5> {
    require_disp(outer)?;
    require_disp(inner)?;
    outer.check_same_shape(inner)?;
    let coords = coords_from_disp(inner)?;
    let mut out = trilinear_sample(outer, &coords)?;
    out.add_scaled(inner, 1.0)?;
    Ok(out)
}

/// Literal elementwise sum of two fields; the first-order approximation of
/// [`compose`] for small fields.
pub fn compose_additive(outer: &Volume5, inner: &Volume5) -> Result<Volume5> {
    require_disp(outer)?;
    require_disp(inner)?;
    outer.check_same_shape(inner)?;
    let mut out = outer.clone();
    out.add_scaled(inner, 1.0)?;
    Ok(out)
}

pub struct ComposeGrads {
    pub outer: Volume5,
    pub inner: Volume5,
}

pub fn compose_backward(go: &Volume5, outer: &Volume5, inner: &Volume5) -> Result<ComposeGrads> {
    let coords = coords_from_disp(inner)?;
    let sample_grads = trilinear_sample_backward(go, outer, &coords)?;
    let mut grad_inner = go.clone();
    grad_inner.add_scaled(&sample_grads.coords, 1.0)?;
    Ok(ComposeGrads {
        outer: sample_grads.src,
        inner: grad_inner,
    })
}

/// Trilinear upsampling of a coarse field to a finer grid, then per-channel
/// scaling by the axis size ratio so values stay in voxel units of the new
/// grid. Endpoint voxel centers map onto each other.
pub fn upsample_displacement(disp: &Volume5, target: [usize; 3]) -> Result<Volume5> {
    require_disp(disp)?;
    let [n, _, sd, sh, sw] = disp.shape();
    let [td, th, tw] = target;
    if td < sd || th < sh || tw < sw || td == 0 {
        return Err(Error::shape(format!(
            "upsample target {target:?} must be >= source ({sd},{sh},{sw}) per axis"
        )));
    }
    let ratio = [
        td as f64 / sd as f64,
        th as f64 / sh as f64,
        tw as f64 / sw as f64,
    ];
    let map = |t: usize, t_size: usize, s_size: usize| -> f64 {
        if t_size > 1 {
            t as f64 * (s_size - 1) as f64 / (t_size - 1) as f64
        } else {
            0.0
        }
    };
    let mut coords = Volume5::zeros([n, 3, td, th, tw])?;
    for ni in 0..n {
        for z in 0..td {
            for y in 0..th {
                for x in 0..tw {
                    let i = (z * th + y) * tw + x;
                    coords.plane_mut(ni, 0)[i] = map(z, td, sd);
                    coords.plane_mut(ni, 1)[i] = map(y, th, sh);
                    coords.plane_mut(ni, 2)[i] = map(x, tw, sw);
                }
            }
        }
    }
    let mut out = trilinear_sample(disp, &coords)?;
    for ni in 0..n {
        for ch in 0..3 {
            let r = ratio[ch];
            for v in out.plane_mut(ni, ch) {
                *v *= r;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_displacement`].
pub fn upsample_displacement_backward(
    go: &Volume5,
    source_shape: [usize; 5],
) -> Result<Volume5> {
    let [n, _, sd, sh, sw] = source_shape;
    let [_, _, td, th, tw] = go.shape();
    let ratio = [
        td as f64 / sd as f64,
        th as f64 / sh as f64,
        tw as f64 / sw as f64,
    ];
    let map = |t: usize, t_size: usize, s_size: usize| -> f64 {
        if t_size > 1 {
            t as f64 * (s_size - 1) as f64 / (t_size - 1) as f64
        } else {
            0.0
        }
    };
    let mut grad = Volume5::zeros(source_shape)?;
    for ni in 0..n {
        for ch in 0..3 {
            let r = ratio[ch];
            let gp = go.plane(ni, ch);
            let gs = grad.plane_mut(ni, ch);
            for z in 0..td {
                let cz = map(z, td, sd);
                let z0 = cz.floor() as usize;
                let fz = cz - z0 as f64;
                for y in 0..th {
                    let cyv = map(y, th, sh);
                    let y0 = cyv.floor() as usize;
                    let fy = cyv - y0 as f64;
                    for x in 0..tw {
                        let cxv = map(x, tw, sw);
                        let x0 = cxv.floor() as usize;
                        let fx = cxv - x0 as f64;
                        let g = gp[(z * th + y) * tw + x] * r;
                        if g == 0.0 {
                            continue;
                        }
                        for az in 0..2usize {
                            let zi = z0 + az;
                            if zi >= sd {
                                continue;
                            }
                            let wz = if az == 1 { fz } else { 1.0 - fz };
                            for ay in 0..2usize {
                                let yi = y0 + ay;
                                if yi >= sh {
                                    continue;
                                }
                                let wy = if ay == 1 { fy } else { 1.0 - fy };
                                for ax in 0..2usize {
                                    let xi = x0 + ax;
                                    if xi >= sw {
                                        continue;
                                    }
                                    let wx = if ax == 1 { fx } else { 1.0 - fx };
                                    gs[(zi * sh + yi) * sw + xi] += g * wz * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Voxel-space sample coordinates for an affine in normalized coordinates,
/// one matrix per batch item. Built as identity-plus-displacement so an
/// exact identity matrix yields exact voxel centers.
pub fn affine_grid(mats: &[AffineMatrix], batch: usize, spatial: [usize; 3]) -> Result<Volume5> {
    if mats.len() != batch {
        return Err(Error::shape(format!(
            "{} matrices for batch {batch}",
            mats.len()
        )));
    }
    let [d, h, w] = spatial;
    let mut coords = Volume5::zeros([batch, 3, d, h, w])?;
    let sizes = [d, h, w];
    for (ni, mat) in mats.iter().enumerate() {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let nc = [
                        norm_coord(z as f64, d),
                        norm_coord(y as f64, h),
                        norm_coord(x as f64, w),
                    ];
                    let sc = mat.apply(nc);
                    let voxel = [z as f64, y as f64, x as f64];
                    for ch in 0..3 {
                        coords.plane_mut(ni, ch)[i] = voxel[ch]
                            + (denorm_coord(sc[ch], sizes[ch])
                                - denorm_coord(nc[ch], sizes[ch]));
                    }
                }
            }
        }
    }
    Ok(coords)
}

/// Displacement-equivalent of an affine: `disp(v) = affine_coords(v) - v`.
/// Warping with this field reproduces resampling through the affine grid.
pub fn affine_to_displacement(
    mats: &[AffineMatrix],
    batch: usize,
    spatial: [usize; 3],
) -> Result<Volume5> {
    let mut coords = affine_grid(mats, batch, spatial)?;
    let [d, h, w] = spatial;
    for ni in 0..batch {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    coords.plane_mut(ni, 0)[i] -= z as f64;
                    coords.plane_mut(ni, 1)[i] -= y as f64;
                    coords.plane_mut(ni, 2)[i] -= x as f64;
                }
            }
        }
    }
    Ok(coords)
}

/// Accumulates coordinate gradients back onto the 12 affine entries per
/// batch item. `grad_coords` may come from the sampler (resampling path) or
/// directly from a displacement consumer (fold-in path); the two uses share
/// this chain because coords and displacement differ by a constant.
pub fn affine_grid_backward(
    grad_coords: &Volume5,
    spatial: [usize; 3],
) -> Result<Vec<[[f64; 4]; 3]>> {
    let [n, c, d, h, w] = grad_coords.shape();
    if c != 3 || [d, h, w] != spatial {
        return Err(Error::usage(format!(
            "coordinate gradient shape {:?} does not match grid {spatial:?}",
            grad_coords.shape()
        )));
    }
    let sizes = [d, h, w];
    let mut out = vec![[[0.0; 4]; 3]; n];
    for ni in 0..n {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let nc = [
                        norm_coord(z as f64, d),
                        norm_coord(y as f64, h),
                        norm_coord(x as f64, w),
                    ];
                    let hvec = [nc[0], nc[1], nc[2], 1.0];
                    for ch in 0..3 {
                        let scale = (sizes[ch] - 1) as f64 / 2.0;
                        let g = grad_coords.plane(ni, ch)[i] * scale;
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..4 {
                            out[ni][ch][k] += g * hvec[k];
                        }
                    }
                }
            }
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

    fn identity_coords(batch: usize, spatial: [usize; 3]) -> Volume5 {
        affine_grid(&vec![AffineMatrix::identity(); batch], batch, spatial).unwrap()
    }

    #[test]
    fn identity_sampling_is_exact() {
        let src = random_volume([2, 3, 4, 5, 6], 1);
        let coords = identity_coords(2, [4, 5, 6]);
        let out = trilinear_sample(&src, &coords).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn midpoint_interpolation() {
        let mut src = Volume5::zeros([1, 1, 1, 1, 2]).unwrap();
        *src.at_mut(0, 0, 0, 0, 1) = 1.0;
        let mut coords = Volume5::zeros([1, 3, 1, 1, 1]).unwrap();
        coords.plane_mut(0, 2)[0] = 0.5;
        let out = trilinear_sample(&src, &coords).unwrap();
        assert!((out.at(0, 0, 0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_out_of_bounds_reads_zero() {
        let src = random_volume([1, 1, 3, 3, 3], 4);
        let mut coords = Volume5::zeros([1, 3, 1, 1, 1]).unwrap();
        coords.plane_mut(0, 0)[0] = 100.0;
        coords.plane_mut(0, 1)[0] = -50.0;
        coords.plane_mut(0, 2)[0] = 1.0;
        let out = trilinear_sample(&src, &coords).unwrap();
        assert_eq!(out.at(0, 0, 0, 0, 0), 0.0);
    }

    #[test]
    fn non_finite_coordinate_is_numeric_error() {
        let src = random_volume([1, 1, 3, 3, 3], 4);
        let mut coords = Volume5::zeros([1, 3, 1, 1, 1]).unwrap();
        coords.data_mut()[0] = f64::NAN;
        assert!(matches!(
            trilinear_sample(&src, &coords),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sampler_linear_in_source() {
        let u = random_volume([1, 2, 4, 4, 4], 7);
        let v = random_volume([1, 2, 4, 4, 4], 8);
        let mut coords = identity_coords(1, [4, 4, 4]);
        for val in coords.data_mut().iter_mut() {
            *val += 0.3;
        }
        let (a, b) = (2.0, -0.7);
        let mut combo = u.clone();
        combo.scale_in_place(a);
        combo.add_scaled(&v, b).unwrap();
        let lhs = trilinear_sample(&combo, &coords).unwrap();
        let mut rhs = trilinear_sample(&u, &coords).unwrap();
        rhs.scale_in_place(a);
        rhs.add_scaled(&trilinear_sample(&v, &coords).unwrap(), b)
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn warp_zero_field_is_identity() {
        let src = random_volume([1, 2, 4, 4, 4], 10);
        let disp = Volume5::zeros([1, 3, 4, 4, 4]).unwrap();
        let out = warp(&src, &disp).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn warp_integer_shift_matches_index_shift() {
        let src = random_volume([1, 1, 3, 3, 4], 11);
        let mut disp = Volume5::zeros([1, 3, 3, 3, 4]).unwrap();
        disp.plane_mut(0, 2).fill(1.0); // +1 voxel along x
        let out = warp(&src, &disp).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..4 {
                    let expect = if x + 1 < 4 { src.at(0, 0, z, y, x + 1) } else { 0.0 };
                    assert!((out.at(0, 0, z, y, x) - expect).abs() < 1e-14);
                }
            }
        }
    }

    fn smooth_field(shape: [usize; 5], seed: u64, amp: f64) -> Volume5 {
        // low-frequency sinusoid field, smooth by construction
        let mut rng = Rng::new(seed);
        let [n, _, d, h, w] = shape;
        let mut out = Volume5::zeros(shape).unwrap();
        for ni in 0..n {
            for ch in 0..3 {
                let pz = rng.uniform_in(0.5, 1.5);
                let py = rng.uniform_in(0.5, 1.5);
                let px = rng.uniform_in(0.5, 1.5);
                let plane = out.plane_mut(ni, ch);
                let mut i = 0;
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let t = pz * z as f64 / d as f64
                                + py * y as f64 / h as f64
                                + px * x as f64 / w as f64;
                            plane[i] = amp * (std::f64::consts::TAU * t).sin();
                            i += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn compose_identities() {
        let f = smooth_field([1, 3, 4, 4, 4], 3, 0.8);
        let zero = Volume5::zeros([1, 3, 4, 4, 4]).unwrap();
        assert!(compose(&zero, &f).unwrap().max_abs_diff(&f).unwrap() < 1e-12);
        assert!(compose(&f, &zero).unwrap().max_abs_diff(&f).unwrap() < 1e-12);
    }

    #[test]
    fn compose_of_constant_fields_adds() {
        let mut a = Volume5::zeros([1, 3, 5, 5, 5]).unwrap();
        let mut b = Volume5::zeros([1, 3, 5, 5, 5]).unwrap();
        for (ch, (va, vb)) in [(0usize, (0.5, -0.25)), (1, (0.0, 0.75)), (2, (1.0, 0.5))] {
            a.plane_mut(0, ch).fill(va);
            b.plane_mut(0, ch).fill(vb);
        }
        let c = compose(&a, &b).unwrap();
        // interior voxels see the exact sum; near the border the outer field
        // is sampled outside its support and zero-fill breaks the identity
        for ch in 0..3 {
            let expect = a.at(0, ch, 2, 2, 2) + b.at(0, ch, 2, 2, 2);
            assert!((c.at(0, ch, 2, 2, 2) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_matches_per_voxel_oracle() {
        let outer = smooth_field([1, 3, 5, 5, 5], 21, 0.9);
        let inner = smooth_field([1, 3, 5, 5, 5], 22, 0.7);
        let got = compose(&outer, &inner).unwrap();
        // brute-force: inner(v) + trilinear(outer, v + inner(v))
        for z in 0..5usize {
            for y in 0..5usize {
                for x in 0..5usize {
                    let i = (z * 5 + y) * 5 + x;
                    let pos = [
                        z as f64 + inner.plane(0, 0)[i],
                        y as f64 + inner.plane(0, 1)[i],
                        x as f64 + inner.plane(0, 2)[i],
                    ];
                    for ch in 0..3 {
                        let mut acc = 0.0;
                        let z0 = pos[0].floor() as i64;
                        let y0 = pos[1].floor() as i64;
                        let x0 = pos[2].floor() as i64;
                        for az in 0..2i64 {
                            for ay in 0..2i64 {
                                for ax in 0..2i64 {
                                    let (zi, yi, xi) = (z0 + az, y0 + ay, x0 + ax);
                                    if zi < 0 || yi < 0 || xi < 0 || zi > 4 || yi > 4 || xi > 4 {
                                        continue;
                                    }
                                    let wz = if az == 1 {
                                        pos[0] - z0 as f64
                                    } else {
                                        1.0 - (pos[0] - z0 as f64)
                                    };
                                    let wy = if ay == 1 {
                                        pos[1] - y0 as f64
                                    } else {
                                        1.0 - (pos[1] - y0 as f64)
                                    };
                                    let wx = if ax == 1 {
                                        pos[2] - x0 as f64
                                    } else {
                                        1.0 - (pos[2] - x0 as f64)
                                    };
                                    acc += wz
                                        * wy
                                        * wx
                                        * outer.at(0, ch, zi as usize, yi as usize, xi as usize);
                                }
                            }
                        }
                        let expect = inner.plane(0, ch)[i] + acc;
                        assert!((got.plane(0, ch)[i] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn warp_twice_close_to_composed_warp() {
        // trilinear interpolation is exact on linear functions, so a gently
        // curved source keeps the double-interpolation error far below the
        // field-composition tolerance
        let n = 12usize;
        let mut src = Volume5::zeros([1, 1, n, n, n]).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let lin = 0.3 * z as f64 + 0.2 * y as f64 + 0.25 * x as f64;
                    let curve = 0.002
                        * (std::f64::consts::TAU * (z + y + x) as f64 / n as f64).sin();
                    *src.at_mut(0, 0, z, y, x) = lin + curve;
                }
            }
        }
        let gentle = |phase: f64| {
            let mut f = Volume5::zeros([1, 3, n, n, n]).unwrap();
            for ch in 0..3 {
                let plane = f.plane_mut(0, ch);
                let mut i = 0;
                for z in 0..n {
                    for y in 0..n {
                        for x in 0..n {
                            let t = (z + y + x) as f64 / 96.0 + phase + ch as f64 * 0.21;
                            plane[i] = 0.2 * (std::f64::consts::TAU * t).sin();
                            i += 1;
                        }
                    }
                }
            }
            f
        };
        let fa = gentle(0.11);
        let fb = gentle(0.47);
        let twice = warp(&warp(&src, &fa).unwrap(), &fb).unwrap();
        let once = warp(&src, &compose(&fa, &fb).unwrap()).unwrap();
        // skip a two-voxel rim: the intermediate warp contaminates its
        // border voxels with zero-fill, which the second interpolation then
        // touches one voxel further in
        let mut diff: f64 = 0.0;
        for z in 2..n - 2 {
            for y in 2..n - 2 {
                for x in 2..n - 2 {
                    diff = diff.max((twice.at(0, 0, z, y, x) - once.at(0, 0, z, y, x)).abs());
                }
            }
        }
        assert!(diff < 1e-3, "diff = {diff}");
    }

    #[test]
    fn upsample_constant_doubles_with_grid() {
        let mut f = Volume5::zeros([1, 3, 2, 2, 2]).unwrap();
        f.plane_mut(0, 0).fill(0.5);
        f.plane_mut(0, 1).fill(-1.0);
        f.plane_mut(0, 2).fill(2.0);
        let up = upsample_displacement(&f, [4, 4, 4]).unwrap();
        for (ch, expect) in [(0usize, 1.0), (1, -2.0), (2, 4.0)] {
            assert!(up.plane(0, ch).iter().all(|&v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn upsample_zero_is_zero() {
        let f = Volume5::zeros([1, 3, 2, 2, 2]).unwrap();
        let up = upsample_displacement(&f, [4, 6, 8]).unwrap();
        assert_eq!(up.max_abs(), 0.0);
    }

    #[test]
    fn upsample_ramp_doubles_pointwise() {
        // field value = x-index on the coarse grid; the analytic trilinear
        // value at fine position t is t*(S-1)/(T-1), scaled by T/S.
        let mut f = Volume5::zeros([1, 3, 1, 1, 4]).unwrap();
        for x in 0..4 {
            f.plane_mut(0, 2)[x] = x as f64;
        }
        let up = upsample_displacement(&f, [1, 1, 8]).unwrap();
        for t in 0..8 {
            let expect = t as f64 * 3.0 / 7.0 * 2.0;
            assert!((up.plane(0, 2)[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_shrinking_rejected() {
        let f = Volume5::zeros([1, 3, 4, 4, 4]).unwrap();
        assert!(upsample_displacement(&f, [2, 4, 4]).is_err());
    }

    #[test]
    fn affine_identity_roundtrip() {
        let src = random_volume([1, 2, 4, 4, 4], 40);
        let coords = identity_coords(1, [4, 4, 4]);
        let out = trilinear_sample(&src, &coords).unwrap();
        assert!(out.max_abs_diff(&src).unwrap() < 1e-12);
    }

    #[test]
    fn rotation_90_permutes_one_hot() {
        let n = 8usize;
        let mut src = Volume5::zeros([1, 1, n, n, n]).unwrap();
        let (a, b, c) = (2usize, 5usize, 1usize);
        *src.at_mut(0, 0, a, b, c) = 1.0;
        let coords = affine_grid(&[AffineMatrix::rotation_90_y()], 1, [n, n, n]).unwrap();
        let out = trilinear_sample(&src, &coords).unwrap();
        // oracle: output(z,y,x) = src(N-1-x, y, z) => hot voxel at (c, b, N-1-a)
        let got = out.at(0, 0, c, b, n - 1 - a);
        assert!(got >= 0.999, "got {got}");
        assert!((out.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pure_translation_shifts_one_hot() {
        let n = 8usize;
        let mut src = Volume5::zeros([1, 1, n, n, n]).unwrap();
        *src.at_mut(0, 0, 3, 3, 3) = 1.0;
        // translation by exactly one voxel along +x in normalized units
        let step = 2.0 / (n - 1) as f64;
        let mut m = AffineMatrix::identity();
        m.0[2][3] = step;
        let coords = affine_grid(&[m], 1, [n, n, n]).unwrap();
        let out = trilinear_sample(&src, &coords).unwrap();
        assert!(out.at(0, 0, 3, 3, 2) >= 0.999);
    }

    #[test]
    fn rotation_matrix_is_proper() {
        let r = AffineMatrix::rotation_90_y();
        assert!(r.orthonormality_defect() < 1e-15);
        let m = r.0;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        assert!((det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn affine_compose_order() {
        // compose applies `other` first: translate then rotate differs from
        // rotate then translate
        let r = AffineMatrix::rotation_90_y();
        let mut t = AffineMatrix::identity();
        t.0[2][3] = 0.5;
        let rt = r.compose(&t);
        let tr = t.compose(&r);
        assert_ne!(rt, tr);
        let p = [0.0, 0.0, 0.25];
        let via = r.apply(t.apply(p));
        let direct = rt.apply(p);
        for i in 0..3 {
            assert!((via[i] - direct[i]).abs() < 1e-15);
        }
    }
}
