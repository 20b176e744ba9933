//! Kernel offset sets and derivative kernels.
//!
//! For an odd kernel size `K` with half-width `m = K/2`, the full cube `C`
//! contains every offset with `|dz|,|dy|,|dx| <= m`. The pyramid subset
//! keeps an offset when `|dx|,|dy| <= m - |dz|`, so the in-plane extent
//! contracts by one voxel per step away from the central slice. This is the
//! receptive-field shape used by the difference term of the adaptive
//! convolution on thick-slice volumes.

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Precomputed offset sets for one kernel size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidFootprint {
    k: usize,
    cube: Vec<[i64; 3]>,
    pyramid: Vec<[i64; 3]>,
    /// Index of `(0,0,0)` within `cube`.
    center_index: usize,
    /// For each cube offset, whether it belongs to the pyramid subset.
    in_pyramid: Vec<bool>,
}

impl PyramidFootprint {
    /// Enumerates both offset sets for odd `K >= 1`, ordered
    /// lexicographically on `(dz, dy, dx)`.
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::argument(format!(
                "kernel size must be odd and positive, got {k}"
            )));
        }
        let m = (k / 2) as i64;
        let mut cube = Vec::with_capacity(k * k * k);
        let mut pyramid = Vec::new();
        let mut in_pyramid = Vec::with_capacity(k * k * k);
        for dz in -m..=m {
            for dy in -m..=m {
                for dx in -m..=m {
                    let keep = dx.abs() <= m - dz.abs() && dy.abs() <= m - dz.abs();
                    cube.push([dz, dy, dx]);
                    in_pyramid.push(keep);
                    if keep {
                        pyramid.push([dz, dy, dx]);
                    }
                }
            }
        }
        let center_index = cube
            .iter()
            .position(|&o| o == [0, 0, 0])
            .expect("cube always contains the origin");
        Ok(Self {
            k,
            cube,
            pyramid,
            center_index,
            in_pyramid,
        })
    }

    /// Footprint whose "pyramid" subset is the full cube. This is the
    /// configuration that turns the difference term into plain central
    /// difference convolution.
    pub fn full_cube(k: usize) -> Result<Self> {
        let mut fp = Self::new(k)?;
        fp.pyramid = fp.cube.clone();
        fp.in_pyramid = vec![true; fp.cube.len()];
        Ok(fp)
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    pub fn cube(&self) -> &[[i64; 3]] {
        &self.cube
    }

    pub fn pyramid(&self) -> &[[i64; 3]] {
        &self.pyramid
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    /// Pyramid membership aligned with `cube()` order.
    pub fn pyramid_mask(&self) -> &[bool] {
        &self.in_pyramid
    }

    /// Closed-form pyramid size: sum over slices of `(2(m - |dz|) + 1)^2`.
    pub fn pyramid_size_closed_form(k: usize) -> usize {
        let m = (k / 2) as i64;
        (-m..=m)
            .map(|dz| {
                let side = 2 * (m - dz.abs()) + 1;
                (side * side) as usize
            })
            .sum()
    }
}

/// The three 3x3x3 derivative kernels `(x, y, z)`, each a `(1,1,3,3,3)`
/// volume. Kernel `a` is the derivative stencil `(-1,0,1)` along axis `a`
/// smoothed by `(1,2,1) x (1,2,1)` across the other two axes, divided by 32
/// so a unit-slope ramp along `a` responds with exactly 1.
pub fn gradient_kernels_3d() -> [Volume5; 3] {
    let smooth = [1.0, 2.0, 1.0];
    let deriv = [-1.0, 0.0, 1.0];
    let build = |axis: usize| {
        let mut data = Vec::with_capacity(27);
        for iz in 0..3 {
            for iy in 0..3 {
                for ix in 0..3 {
                    let f = |i: usize, a: usize| if a == axis { deriv[i] } else { smooth[i] };
                    // axis index: 0 = x, 1 = y, 2 = z, matching the storage
                    // order's fastest-to-slowest progression.
                    data.push(f(ix, 0) * f(iy, 1) * f(iz, 2) / 32.0);
                }
            }
        }
        Volume5::from_vec([1, 1, 3, 3, 3], data).expect("static kernel data")
    };
    [build(0), build(1), build(2)]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute-force enumeration of the pyramid predicate.
    fn brute_force_pyramid(k: usize) -> Vec<[i64; 3]> {
        let m = (k / 2) as i64;
        let mut out = Vec::new();
        for dz in -m..=m {
            for dy in -m..=m {
                for dx in -m..=m {
                    if dz.abs() <= m && dx.abs() <= m - dz.abs() && dy.abs() <= m - dz.abs() {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn degenerate_kernel() {
        let fp = PyramidFootprint::new(1).unwrap();
        assert_eq!(fp.cube(), &[[0, 0, 0]]);
        assert_eq!(fp.pyramid(), &[[0, 0, 0]]);
        assert_eq!(fp.center_index(), 0);
    }

    #[test]
    fn k3_sizes() {
        let fp = PyramidFootprint::new(3).unwrap();
        assert_eq!(fp.cube().len(), 27);
        assert_eq!(fp.pyramid().len(), 11);
    }

    #[test]
    fn k5_sizes() {
        let fp = PyramidFootprint::new(5).unwrap();
        assert_eq!(fp.cube().len(), 125);
        assert_eq!(fp.pyramid().len(), 45); // 25 + 2*9 + 2*1
    }

    #[test]
    fn matches_brute_force_for_small_k() {
        for k in [1usize, 3, 5, 7] {
            let fp = PyramidFootprint::new(k).unwrap();
            assert_eq!(fp.pyramid(), brute_force_pyramid(k).as_slice(), "K={k}");
            assert_eq!(fp.cube().len(), k * k * k);
            assert_eq!(
                fp.pyramid().len(),
                PyramidFootprint::pyramid_size_closed_form(k)
            );
        }
    }

    #[test]
    fn sets_symmetric_under_axis_negation() {
        let fp = PyramidFootprint::new(5).unwrap();
        for set in [fp.cube(), fp.pyramid()] {
            for &[dz, dy, dx] in set {
                for flipped in [[-dz, dy, dx], [dz, -dy, dx], [dz, dy, -dx]] {
                    assert!(set.contains(&flipped), "{flipped:?} missing");
                }
            }
        }
    }

    #[test]
    fn even_or_zero_k_rejected() {
        assert!(PyramidFootprint::new(0).is_err());
        assert!(PyramidFootprint::new(4).is_err());
    }

    #[test]
    fn derivative_kernels_sum_to_zero() {
        for k in gradient_kernels_3d() {
            assert!(k.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn x_kernel_ramp_response_is_one() {
        // Direct convolution of the ramp T(x) = x at an interior voxel.
        let [kx, _, _] = gradient_kernels_3d();
        let mut resp = 0.0;
        for iz in 0..3 {
            for iy in 0..3 {
                for ix in 0..3 {
                    let ramp = ix as f64 - 1.0; // value at offset dx
                    resp += kx.at(0, 0, iz, iy, ix) * ramp;
                }
            }
        }
        assert!((resp - 1.0).abs() < 1e-15, "resp = {resp}");
    }

    #[test]
    fn kernels_antisymmetric_on_their_axis() {
        let [kx, ky, kz] = gradient_kernels_3d();
        for iz in 0..3 {
            for iy in 0..3 {
                for ix in 0..3 {
                    assert_eq!(kx.at(0, 0, iz, iy, ix), -kx.at(0, 0, iz, iy, 2 - ix));
                    assert_eq!(ky.at(0, 0, iz, iy, ix), -ky.at(0, 0, iz, 2 - iy, ix));
                    assert_eq!(kz.at(0, 0, iz, iy, ix), -kz.at(0, 0, 2 - iz, iy, ix));
                    // symmetric across the other axes
                    assert_eq!(kx.at(0, 0, iz, iy, ix), kx.at(0, 0, 2 - iz, iy, ix));
                    assert_eq!(kx.at(0, 0, iz, iy, ix), kx.at(0, 0, iz, 2 - iy, ix));
                }
            }
        }
    }
}
