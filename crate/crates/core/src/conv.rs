//! Dense 3D convolution (cross-correlation) with zero padding.
//!
//! All convolutions here are cross-correlations over an explicit offset
//! list: `out(v) = sum_ic sum_off w[oc,ic,off] * x[ic, v*stride + off]`,
//! with reads outside the volume treated as zero and padding fixed at
//! `K/2`. The offset-list form lets the adaptive difference convolution
//! reuse the same inner loops for its cube and pyramid sums.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Offset paired with its flat index into a `K^3` kernel.
pub(crate) type OffsetEntry = ([i64; 3], usize);

pub(crate) fn offset_entries(offsets: &[[i64; 3]], k: usize) -> Vec<OffsetEntry> {
    let m = (k / 2) as i64;
    offsets
        .iter()
        .map(|&[dz, dy, dx]| {
            let kidx = (((dz + m) as usize * k) + (dy + m) as usize) * k + (dx + m) as usize;
            ([dz, dy, dx], kidx)
        })
        .collect()
}

/// Output spatial extent for same-padding convolution: `ceil(in/stride)`.
pub fn out_extent(in_size: usize, stride: usize) -> usize {
    (in_size - 1) / stride + 1
}

/// Inclusive output range along one axis for which `o*stride + off` stays
/// inside `[0, in_size)`. Returns an empty range when no position is valid.
#[inline]
fn valid_out_range(in_size: usize, off: i64, stride: usize, out_size: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (in_size as i64 - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    if hi < lo as i64 {
        return (1, 0);
    }
    (lo, (hi as usize).min(out_size - 1))
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub stride: [usize; 3],
    pub k: usize,
}

pub(crate) fn conv_dims(x: &Volume5, w: &Volume5, stride: [usize; 3]) -> Result<ConvDims> {
    let [n, in_c, d, h, wd] = x.shape();
    let [oc, wic, kz, ky, kx] = w.shape();
    if kz != ky || ky != kx || kz % 2 == 0 {
        return Err(Error::shape(format!(
            "kernel must be cubic with odd extent, got ({kz},{ky},{kx})"
        )));
    }
    if wic != in_c {
        return Err(Error::shape(format!(
            "weight expects {wic} input channels, input has {in_c}"
        )));
    }
    if stride.iter().any(|&s| s == 0 || s > 2) {
        return Err(Error::config(format!(
            "per-axis stride must be 1 or 2, got {stride:?}"
        )));
    }
    Ok(ConvDims {
        batch: n,
        in_c,
        out_c: oc,
        in_sp: [d, h, wd],
        out_sp: [
            out_extent(d, stride[0]),
            out_extent(h, stride[1]),
            out_extent(wd, stride[2]),
        ],
        stride,
        k: kz,
    })
}

/// Cross-correlation restricted to the given offsets. Parallel over
/// `(batch, out_channel)` planes; each plane is written by one task only,
/// so results do not depend on thread count.
pub(crate) fn offset_conv_forward(
    x: &Volume5,
    w: &Volume5,
    entries: &[OffsetEntry],
    dims: &ConvDims,
) -> Result<Volume5> {
    let [od, oh, ow] = dims.out_sp;
    let [id, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let mut out = Volume5::zeros([dims.batch, dims.out_c, od, oh, ow])?;
    let plane = od * oh * ow;
    let k3 = dims.k * dims.k * dims.k;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, out_plane)| {
            let n = pi / dims.out_c;
            let oc = pi % dims.out_c;
            for ic in 0..dims.in_c {
                let x_plane = x.plane(n, ic);
                let w_base = (oc * dims.in_c + ic) * k3;
                for &([dz, dy, dx], kidx) in entries {
                    let coeff = w.data()[w_base + kidx];
                    if coeff == 0.0 {
                        continue;
                    }
                    let (zl, zh) = valid_out_range(id, dz, sz, od);
                    let (yl, yh) = valid_out_range(ih, dy, sy, oh);
                    let (xl, xh) = valid_out_range(iw, dx, sx, ow);
                    if zl > zh || yl > yh || xl > xh {
                        continue;
                    }
                    for oz in zl..=zh {
                        let izb = (oz * sz) as i64 + dz;
                        for oy in yl..=yh {
                            let iyb = (oy * sy) as i64 + dy;
                            let in_row = ((izb as usize) * ih + iyb as usize) * iw;
                            let out_row = (oz * oh + oy) * ow;
                            for ox in xl..=xh {
                                let ixb = (ox * sx) as i64 + dx;
                                out_plane[out_row + ox] +=
                                    coeff * x_plane[in_row + ixb as usize];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient with respect to the input: scatters `go * w` back through the
/// offset list. Parallel over `(batch, in_channel)` planes.
pub(crate) fn offset_conv_backward_input(
    go: &Volume5,
    w: &Volume5,
    entries: &[OffsetEntry],
    dims: &ConvDims,
) -> Result<Volume5> {
    let [od, oh, ow] = dims.out_sp;
    let [id, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let mut gx = Volume5::zeros([dims.batch, dims.in_c, id, ih, iw])?;
    let plane = id * ih * iw;
    let k3 = dims.k * dims.k * dims.k;
    gx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, gx_plane)| {
            let n = pi / dims.in_c;
            let ic = pi % dims.in_c;
            for oc in 0..dims.out_c {
                let go_plane = go.plane(n, oc);
                let w_base = (oc * dims.in_c + ic) * k3;
                for &([dz, dy, dx], kidx) in entries {
                    let coeff = w.data()[w_base + kidx];
                    if coeff == 0.0 {
                        continue;
                    }
                    let (zl, zh) = valid_out_range(id, dz, sz, od);
                    let (yl, yh) = valid_out_range(ih, dy, sy, oh);
                    let (xl, xh) = valid_out_range(iw, dx, sx, ow);
                    if zl > zh || yl > yh || xl > xh {
                        continue;
                    }
                    for oz in zl..=zh {
                        let izb = (oz * sz) as i64 + dz;
                        for oy in yl..=yh {
                            let iyb = (oy * sy) as i64 + dy;
                            let in_row = ((izb as usize) * ih + iyb as usize) * iw;
                            let out_row = (oz * oh + oy) * ow;
                            for ox in xl..=xh {
                                let ixb = (ox * sx) as i64 + dx;
                                gx_plane[in_row + ixb as usize] +=
                                    coeff * go_plane[out_row + ox];
                            }
                        }
                    }
                }
            }
        });
    Ok(gx)
}

/// Gradient with respect to the weights at the listed offsets. Parallel
/// over output channels; each `oc` row of the kernel bank is private to one
/// task.
pub(crate) fn offset_conv_backward_weights(
    go: &Volume5,
    x: &Volume5,
    entries: &[OffsetEntry],
    dims: &ConvDims,
) -> Result<Volume5> {
    let [od, oh, ow] = dims.out_sp;
    let [id, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let mut gw = Volume5::zeros([dims.out_c, dims.in_c, dims.k, dims.k, dims.k])?;
    let k3 = dims.k * dims.k * dims.k;
    let row = dims.in_c * k3;
    gw.data_mut()
        .par_chunks_mut(row)
        .enumerate()
        .for_each(|(oc, gw_row)| {
            for n in 0..dims.batch {
                let go_plane = go.plane(n, oc);
                for ic in 0..dims.in_c {
                    let x_plane = x.plane(n, ic);
                    for &([dz, dy, dx], kidx) in entries {
                        let (zl, zh) = valid_out_range(id, dz, sz, od);
                        let (yl, yh) = valid_out_range(ih, dy, sy, oh);
                        let (xl, xh) = valid_out_range(iw, dx, sx, ow);
                        if zl > zh || yl > yh || xl > xh {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oz in zl..=zh {
                            let izb = (oz * sz) as i64 + dz;
                            for oy in yl..=yh {
                                let iyb = (oy * sy) as i64 + dy;
                                let in_row = ((izb as usize) * ih + iyb as usize) * iw;
                                let out_row = (oz * oh + oy) * ow;
                                for ox in xl..=xh {
                                    let ixb = (ox * sx) as i64 + dx;
                                    acc += go_plane[out_row + ox] * x_plane[in_row + ixb as usize];
                                }
                            }
                        }
                        gw_row[ic * k3 + kidx] += acc;
                    }
                }
            }
        });
    Ok(gw)
}

fn cube_entries(k: usize) -> Vec<OffsetEntry> {
    let m = (k / 2) as i64;
    let mut offsets = Vec::with_capacity(k * k * k);
    for dz in -m..=m {
        for dy in -m..=m {
            for dx in -m..=m {
                offsets.push([dz, dy, dx]);
            }
        }
    }
    offset_entries(&offsets, k)
}

/// Same-padding dense convolution. `bias`, when given, must be shaped
/// `(1, out_c, 1, 1, 1)`.
pub fn conv3d_forward(
    x: &Volume5,
    w: &Volume5,
    bias: Option<&Volume5>,
    stride: [usize; 3],
) -> Result<Volume5> {
    let dims = conv_dims(x, w, stride)?;
    if let Some(b) = bias {
        if b.shape() != [1, dims.out_c, 1, 1, 1] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {} output channels",
                b.shape(),
                dims.out_c
            )));
        }
    }
    let entries = cube_entries(dims.k);
    let mut out = offset_conv_forward(x, w, &entries, &dims)?;
    if let Some(b) = bias {
        for n in 0..dims.batch {
            for oc in 0..dims.out_c {
                let bv = b.data()[oc];
                for v in out.plane_mut(n, oc) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct Conv3dGrads {
    pub input: Volume5,
    pub weights: Volume5,
    pub bias: Option<Volume5>,
}

pub fn conv3d_backward(
    go: &Volume5,
    x: &Volume5,
    w: &Volume5,
    has_bias: bool,
    stride: [usize; 3],
) -> Result<Conv3dGrads> {
    let dims = conv_dims(x, w, stride)?;
    let expect = [dims.batch, dims.out_c, dims.out_sp[0], dims.out_sp[1], dims.out_sp[2]];
    if go.shape() != expect {
        return Err(Error::usage(format!(
            "upstream gradient shape {:?} does not match forward output {:?}",
            go.shape(),
            expect
        )));
    }
    let entries = cube_entries(dims.k);
    let input = offset_conv_backward_input(go, w, &entries, &dims)?;
    let weights = offset_conv_backward_weights(go, x, &entries, &dims)?;
    let bias = if has_bias {
        let mut gb = Volume5::zeros([1, dims.out_c, 1, 1, 1])?;
        for n in 0..dims.batch {
            for oc in 0..dims.out_c {
                gb.data_mut()[oc] += go.plane(n, oc).iter().sum::<f64>();
            }
        }
        Some(gb)
    } else {
        None
    };
    Ok(Conv3dGrads {
        input,
        weights,
        bias,
    })
}

/// Input gradient only, for paths where the kernel is a fixed stencil.
pub fn conv3d_backward_input(
    go: &Volume5,
    w: &Volume5,
    in_shape: [usize; 5],
    stride: [usize; 3],
) -> Result<Volume5> {
    let x_probe = Volume5::zeros(in_shape)?;
    let dims = conv_dims(&x_probe, w, stride)?;
    let entries = cube_entries(dims.k);
    offset_conv_backward_input(go, w, &entries, &dims)
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

    /// Naive triple-loop reference convolution, independent of the
    /// shift-accumulate implementation above.
    pub(crate) fn naive_conv3d(
        x: &Volume5,
        w: &Volume5,
        bias: Option<&Volume5>,
        stride: [usize; 3],
    ) -> Volume5 {
        let [n, in_c, d, h, wd] = x.shape();
        let [oc, _, k, _, _] = w.shape();
        let m = (k / 2) as i64;
        let od = out_extent(d, stride[0]);
        let oh = out_extent(h, stride[1]);
        let ow = out_extent(wd, stride[2]);
        let mut out = Volume5::zeros([n, oc, od, oh, ow]).unwrap();
        for ni in 0..n {
            for o in 0..oc {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                            for ic in 0..in_c {
                                for dz in -m..=m {
                                    for dy in -m..=m {
                                        for dx in -m..=m {
                                            let iz = (oz * stride[0]) as i64 + dz;
                                            let iy = (oy * stride[1]) as i64 + dy;
                                            let ix = (ox * stride[2]) as i64 + dx;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as i64
                                                || iy >= h as i64
                                                || ix >= wd as i64
                                            {
                                                continue;
                                            }
                                            let wv = w.at(
                                                o,
                                                ic,
                                                (dz + m) as usize,
                                                (dy + m) as usize,
                                                (dx + m) as usize,
                                            );
                                            acc += wv
                                                * x.at(
                                                    ni,
                                                    ic,
                                                    iz as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                );
                                        }
                                    }
                                }
                            }
                            *out.at_mut(ni, o, oz, oy, ox) = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        for seed in 0..3 {
            let x = random_volume([1, 2, 5, 6, 7], seed);
            let w = random_volume([3, 2, 3, 3, 3], seed + 100);
            let b = random_volume([1, 3, 1, 1, 1], seed + 200);
            for stride in [[1, 1, 1], [2, 2, 2], [1, 2, 2]] {
                let fast = conv3d_forward(&x, &w, Some(&b), stride).unwrap();
                let slow = naive_conv3d(&x, &w, Some(&b), stride);
                assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "stride {stride:?}");
            }
        }
    }

    #[test]
    fn k1_is_channel_mixing() {
        let x = random_volume([2, 3, 2, 2, 2], 5);
        let w = random_volume([4, 3, 1, 1, 1], 6);
        let out = conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap();
        let mut expect = 0.0;
        for ic in 0..3 {
            expect += w.at(1, ic, 0, 0, 0) * x.at(1, ic, 1, 0, 1);
        }
        assert!((out.at(1, 1, 1, 0, 1) - expect).abs() < 1e-14);
    }

    #[test]
    fn weight_gradient_is_cross_correlation() {
        // For out = conv(x, w), d sum(out*go)/dw[o,i,off] = sum_v go*x(v+off).
        let x = random_volume([1, 1, 4, 4, 4], 9);
        let w = random_volume([1, 1, 3, 3, 3], 10);
        let go = random_volume([1, 1, 4, 4, 4], 11);
        let grads = conv3d_backward(&go, &x, &w, false, [1, 1, 1]).unwrap();
        let mut expect = 0.0;
        // offset (dz,dy,dx) = (0,0,1)
        for z in 0..4usize {
            for y in 0..4usize {
                for xx in 0..3usize {
                    expect += go.at(0, 0, z, y, xx) * x.at(0, 0, z, y, xx + 1);
                }
            }
        }
        assert!((grads.weights.at(0, 0, 1, 1, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = random_volume([1, 1, 4, 4, 4], 1);
        let w = random_volume([1, 1, 2, 2, 2], 2);
        assert!(conv3d_forward(&x, &w, None, [1, 1, 1]).is_err());
    }

    #[test]
    fn stride_three_rejected() {
        let x = random_volume([1, 1, 4, 4, 4], 1);
        let w = random_volume([1, 1, 3, 3, 3], 2);
        assert!(conv3d_forward(&x, &w, None, [3, 1, 1]).is_err());
    }
}
