//! Adaptive bidirectional pyramid difference convolution.
//!
//! The operator blends a standard convolution over the full kernel cube
//! with a central-difference convolution over the pyramid-shrunk offset
//! subset, gated per output voxel:
//!
//! ```text
//! out(v) = (1 - theta(v)) * sum_C w * T(v+off)
//!        +      theta(v)  * sum_S w * (T(v+off) - T(v))
//! ```
//!
//! `theta` can be a constant (the fixed-coefficient baseline), or derived
//! from the local texture strength of the input: smooth regions push
//! `theta` toward 1 (difference term dominates), strongly textured regions
//! toward 0 (plain convolution dominates). The backward pass is fully
//! analytic, including the gate's dependence on the input through the
//! texture map.

use crate::conv::{
    conv3d_backward_input, conv3d_forward, conv_dims, offset_conv_backward_input,
    offset_conv_backward_weights, offset_conv_forward, offset_entries, ConvDims,
};
use crate::error::{Error, Result};
use crate::footprint::{gradient_kernels_3d, PyramidFootprint};
use crate::volume::Volume5;

/// Smoothing constant inside the texture-magnitude square root; keeps the
/// gradient finite where all three derivative responses vanish.
pub const TEXTURE_EPS: f64 = 1e-12;

/// Gate behaviour of the operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AbpdcMode {
    /// Plain convolution over the full cube (`theta = 0`).
    Standard,
    /// Constant gate in `[0, 1]`.
    Fixed(f64),
    /// Per-voxel gate from the texture strength of the input.
    Adaptive,
}

/// Learnable state of one convolution block.
#[derive(Clone, Debug)]
pub struct AbpdcParams {
    /// Kernel bank `(out_c, in_c, K, K, K)`, shared by both sums.
    pub weights: Volume5,
    /// Scale of the 1x1x1 gate convolution (adaptive mode).
    pub gate_scale: f64,
    /// Bias of the gate convolution (adaptive mode).
    pub gate_bias: f64,
    pub mode: AbpdcMode,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Per-voxel gradient-magnitude map from the channel-averaged input:
/// `G = sqrt(Gx^2 + Gy^2 + Gz^2 + eps)` with zero-padded derivative
/// stencils. Output has a single channel.
pub fn texture_strength(t: &Volume5) -> Result<Volume5> {
    let [_, _, d, h, w] = t.shape();
    if d < 3 || h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "texture strength needs spatial dims >= 3, got ({d},{h},{w})"
        )));
    }
    Ok(texture_strength_with_ctx(t)?.0)
}

pub(crate) struct TextureCtx {
    pub responses: [Volume5; 3],
    pub g: Volume5,
}

/// Inner texture map without the minimum-extent check: the zero-padded
/// stencils are well defined on any extent, which deep stages with tiny
/// maps rely on.
pub(crate) fn texture_strength_with_ctx(t: &Volume5) -> Result<(Volume5, TextureCtx)> {
    let [n, c, d, h, w] = t.shape();
    let mean = channel_mean(t)?;
    let kernels = gradient_kernels_3d();
    let gx = conv3d_forward(&mean, &kernels[0], None, [1, 1, 1])?;
    let gy = conv3d_forward(&mean, &kernels[1], None, [1, 1, 1])?;
    let gz = conv3d_forward(&mean, &kernels[2], None, [1, 1, 1])?;
    let _ = c;
    let mut g = Volume5::zeros([n, 1, d, h, w])?;
    {
        let gd = g.data_mut();
        let (xd, yd, zd) = (gx.data(), gy.data(), gz.data());
        for i in 0..gd.len() {
            gd[i] = (xd[i] * xd[i] + yd[i] * yd[i] + zd[i] * zd[i] + TEXTURE_EPS).sqrt();
        }
    }
    Ok((
        g.clone(),
        TextureCtx {
            responses: [gx, gy, gz],
            g,
        },
    ))
}

fn channel_mean(t: &Volume5) -> Result<Volume5> {
    let [n, c, d, h, w] = t.shape();
    let mut mean = Volume5::zeros([n, 1, d, h, w])?;
    let inv = 1.0 / c as f64;
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = mean.plane_mut(ni, 0);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * inv;
            }
        }
    }
    Ok(mean)
}

/// Spatial average pooling with zero padding; the divisor is always
/// `window^3` regardless of how much of the window is in range.
pub fn avgpool3(x: &Volume5, window: usize) -> Result<Volume5> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::argument(format!(
            "pool window must be odd and positive, got {window}"
        )));
    }
    let [n, c, d, h, w] = x.shape();
    let r = (window / 2) as i64;
    let inv = 1.0 / (window * window * window) as f64;
    let mut out = Volume5::zeros(x.shape())?;
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for z in 0..d as i64 {
                for y in 0..h as i64 {
                    for xx in 0..w as i64 {
                        let mut acc = 0.0;
                        for dz in -r..=r {
                            let iz = z + dz;
                            if iz < 0 || iz >= d as i64 {
                                continue;
                            }
                            for dy in -r..=r {
                                let iy = y + dy;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                let row = (iz as usize * h + iy as usize) * w;
                                for dx in -r..=r {
                                    let ix = xx + dx;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    acc += src[row + ix as usize];
                                }
                            }
                        }
                        dst[(z as usize * h + y as usize) * w + xx as usize] = acc * inv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`avgpool3`]: scatters each pooled gradient uniformly back
/// over its window.
fn avgpool3_backward(go: &Volume5, window: usize) -> Result<Volume5> {
    // Average pooling with a constant divisor is self-adjoint.
    avgpool3(go, window)
}

/// Per-voxel gate `theta = 1 - sigmoid(scale * avgpool(G) + bias)`, defined
/// on the same grid as `g`. All values lie strictly inside `(0, 1)`.
pub fn adaptive_theta(
    g: &Volume5,
    gate_scale: f64,
    gate_bias: f64,
    pool_window: usize,
) -> Result<Volume5> {
    Ok(adaptive_theta_with_ctx(g, gate_scale, gate_bias, pool_window)?.0)
}

pub(crate) struct ThetaCtx {
    pub pooled: Volume5,
    /// sigmoid(u) per voxel; theta = 1 - sigma.
    pub sigma: Volume5,
}

pub(crate) fn adaptive_theta_with_ctx(
    g: &Volume5,
    gate_scale: f64,
    gate_bias: f64,
    pool_window: usize,
) -> Result<(Volume5, ThetaCtx)> {
    let pooled = avgpool3(g, pool_window)?;
    let sigma = pooled.map(|p| sigmoid(gate_scale * p + gate_bias));
    let theta = sigma.map(|s| 1.0 - s);
    Ok((theta, ThetaCtx { pooled, sigma }))
}

/// Saved state for the backward pass. Produced by [`abpdc_forward`]; a
/// mismatched upstream gradient is rejected as a usage error.
pub struct AbpdcCtx {
    input: Volume5,
    weights: Volume5,
    mode: AbpdcMode,
    stride: [usize; 3],
    pool_window: usize,
    gate_scale: f64,
    detach_gate: bool,
    entries_cube: Vec<([i64; 3], usize)>,
    entries_pyr: Vec<([i64; 3], usize)>,
    /// Full-cube convolution on the output grid.
    full: Volume5,
    /// Difference-term value on the output grid.
    diff: Volume5,
    /// Gate on the output grid.
    theta_out: Volume5,
    /// Adaptive-mode intermediates on the input grid.
    texture: Option<TextureCtx>,
    theta: Option<ThetaCtx>,
    out_shape: [usize; 5],
}

pub struct AbpdcGrads {
    pub input: Volume5,
    pub weights: Volume5,
    pub gate_scale: f64,
    pub gate_bias: f64,
}

/// Forward pass. `stride` is per-axis `(z, y, x)` in `{1, 2}`; padding is
/// `K/2`. Returns the output and the context consumed by
/// [`abpdc_backward`].
pub fn abpdc_forward(
    t: &Volume5,
    p: &AbpdcParams,
    fp: &PyramidFootprint,
    stride: [usize; 3],
    pool_window: usize,
) -> Result<(Volume5, AbpdcCtx)> {
    abpdc_forward_opts(t, p, fp, stride, pool_window, false)
}

/// Forward pass with the option to detach the gate from the input, which
/// stops `grad_input` from flowing through the texture map.
pub fn abpdc_forward_opts(
    t: &Volume5,
    p: &AbpdcParams,
    fp: &PyramidFootprint,
    stride: [usize; 3],
    pool_window: usize,
    detach_gate: bool,
) -> Result<(Volume5, AbpdcCtx)> {
    let dims = conv_dims(t, &p.weights, stride)?;
    if dims.k != fp.kernel_size() {
        return Err(Error::config(format!(
            "kernel size {} does not match footprint size {}",
            dims.k,
            fp.kernel_size()
        )));
    }
    if let AbpdcMode::Fixed(theta) = p.mode {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::config(format!(
                "fixed gate must lie in [0, 1], got {theta}"
            )));
        }
    }
    let entries_cube = offset_entries(fp.cube(), dims.k);
    let entries_pyr = offset_entries(fp.pyramid(), dims.k);

    let full = offset_conv_forward(t, &p.weights, &entries_cube, &dims)?;
    let out_shape = full.shape();

    if p.mode == AbpdcMode::Standard {
        let zero_out = Volume5::zeros(out_shape)?;
        let ctx = AbpdcCtx {
            input: t.clone(),
            weights: p.weights.clone(),
            mode: p.mode,
            stride,
            pool_window,
            gate_scale: p.gate_scale,
            detach_gate,
            entries_cube,
            entries_pyr,
            full: full.clone(),
            diff: zero_out.clone(),
            theta_out: zero_out,
            texture: None,
            theta: None,
            out_shape,
        };
        return Ok((full, ctx));
    }

    // Difference term: sum_S w*T(v+off) minus the center sample weighted by
    // the per-(oc,ic) pyramid weight totals.
    let pyr = offset_conv_forward(t, &p.weights, &entries_pyr, &dims)?;
    let center_w = pyramid_weight_totals(&p.weights, fp);
    let mut diff = pyr;
    subtract_center_term(&mut diff, t, &center_w, &dims);

    let (texture, theta_ctx, theta_out) = match p.mode {
        AbpdcMode::Fixed(theta) => {
            (None, None, Volume5::new(out_shape, theta)?)
        }
        AbpdcMode::Adaptive => {
            let (_, tex) = texture_strength_with_ctx(t)?;
            let (theta_in, tctx) =
                adaptive_theta_with_ctx(&tex.g, p.gate_scale, p.gate_bias, pool_window)?;
            let theta_out = gather_centers(&theta_in, &dims)?;
            (Some(tex), Some(tctx), theta_out)
        }
        AbpdcMode::Standard => unreachable!(),
    };

    let mut out = Volume5::zeros(out_shape)?;
    {
        let od = out.data_mut();
        let fd = full.data();
        let dd = diff.data();
        let plane = out_shape[2] * out_shape[3] * out_shape[4];
        let td = theta_out.data();
        for n in 0..out_shape[0] {
            for oc in 0..out_shape[1] {
                let base = (n * out_shape[1] + oc) * plane;
                let tbase = n * plane; // theta has one channel
                for i in 0..plane {
                    let th = td[tbase + i];
                    od[base + i] = (1.0 - th) * fd[base + i] + th * dd[base + i];
                }
            }
        }
    }

    let ctx = AbpdcCtx {
        input: t.clone(),
        weights: p.weights.clone(),
        mode: p.mode,
        stride,
        pool_window,
        gate_scale: p.gate_scale,
        detach_gate,
        entries_cube,
        entries_pyr,
        full,
        diff,
        theta_out,
        texture,
        theta: theta_ctx,
        out_shape,
    };
    Ok((out, ctx))
}

/// Analytic gradients for input, weights and the two gate parameters.
pub fn abpdc_backward(grad_out: &Volume5, ctx: &AbpdcCtx) -> Result<AbpdcGrads> {
    if grad_out.shape() != ctx.out_shape {
        return Err(Error::usage(format!(
            "upstream gradient shape {:?} does not match saved forward output {:?}",
            grad_out.shape(),
            ctx.out_shape
        )));
    }
    let dims = conv_dims(&ctx.input, &ctx.weights, ctx.stride)?;

    if ctx.mode == AbpdcMode::Standard {
        let input = offset_conv_backward_input(grad_out, &ctx.weights, &ctx.entries_cube, &dims)?;
        let weights =
            offset_conv_backward_weights(grad_out, &ctx.input, &ctx.entries_cube, &dims)?;
        return Ok(AbpdcGrads {
            input,
            weights,
            gate_scale: 0.0,
            gate_bias: 0.0,
        });
    }

    // Split the upstream gradient into the plain-convolution branch
    // go_a = go*(1-theta) and the difference branch go_b = go*theta.
    let (go_a, go_b) = split_by_gate(grad_out, &ctx.theta_out);

    let mut grad_input =
        offset_conv_backward_input(&go_a, &ctx.weights, &ctx.entries_cube, &dims)?;
    grad_input.add_scaled(
        &offset_conv_backward_input(&go_b, &ctx.weights, &ctx.entries_pyr, &dims)?,
        1.0,
    )?;
    let center_w = pyramid_weight_totals_entries(&ctx.weights, &ctx.entries_pyr, dims.k);
    scatter_center_term(&mut grad_input, &go_b, &center_w, &dims);

    let mut grad_weights =
        offset_conv_backward_weights(&go_a, &ctx.input, &ctx.entries_cube, &dims)?;
    grad_weights.add_scaled(
        &offset_conv_backward_weights(&go_b, &ctx.input, &ctx.entries_pyr, &dims)?,
        1.0,
    )?;
    subtract_center_weight_grad(&mut grad_weights, &go_b, &ctx.input, &ctx.entries_pyr, &dims);

    let mut gs_grad = 0.0;
    let mut gb_grad = 0.0;
    if ctx.mode == AbpdcMode::Adaptive {
        // d out / d theta(v) = diff(v) - full(v), summed over out channels.
        let plane = ctx.out_shape[2] * ctx.out_shape[3] * ctx.out_shape[4];
        let mut grad_theta_out = Volume5::zeros([dims.batch, 1, ctx.out_shape[2], ctx.out_shape[3], ctx.out_shape[4]])?;
        {
            let gt = grad_theta_out.data_mut();
            let god = grad_out.data();
            let fd = ctx.full.data();
            let dd = ctx.diff.data();
            for n in 0..dims.batch {
                for oc in 0..dims.out_c {
                    let base = (n * dims.out_c + oc) * plane;
                    for i in 0..plane {
                        gt[n * plane + i] += god[base + i] * (dd[base + i] - fd[base + i]);
                    }
                }
            }
        }
        // Through theta = 1 - sigmoid(scale*pool(G) + bias).
        let tctx = ctx.theta.as_ref().expect("adaptive ctx saved");
        let tex = ctx.texture.as_ref().expect("adaptive ctx saved");
        let grad_theta_in = scatter_centers(&grad_theta_out, &dims)?;
        let mut grad_u = Volume5::zeros_like(&grad_theta_in);
        {
            let gu = grad_u.data_mut();
            let gt = grad_theta_in.data();
            let sd = tctx.sigma.data();
            for i in 0..gu.len() {
                gu[i] = -gt[i] * sd[i] * (1.0 - sd[i]);
            }
        }
        gb_grad = grad_u.sum();
        gs_grad = grad_u.dot(&tctx.pooled)?;
        if !ctx.detach_gate {
            let gate_scale = ctx.gate_scale;
            let grad_pooled = grad_u.map(|v| v * gate_scale);
            let grad_g = avgpool3_backward(&grad_pooled, ctx.pool_window)?;
            // Through G = sqrt(Gx^2+Gy^2+Gz^2+eps) and the derivative stencils.
            let kernels = gradient_kernels_3d();
            let mut grad_mean = Volume5::zeros_like(&grad_g);
            for (axis, resp) in tex.responses.iter().enumerate() {
                let mut grad_resp = Volume5::zeros_like(resp);
                {
                    let gr = grad_resp.data_mut();
                    let gg = grad_g.data();
                    let rd = resp.data();
                    let gmag = tex.g.data();
                    for i in 0..gr.len() {
                        gr[i] = gg[i] * rd[i] / gmag[i];
                    }
                }
                grad_mean.add_scaled(
                    &conv3d_backward_input(
                        &grad_resp,
                        &kernels[axis],
                        grad_g.shape(),
                        [1, 1, 1],
                    )?,
                    1.0,
                )?;
            }
            // Channel mean distributes the gradient evenly over channels.
            let inv = 1.0 / dims.in_c as f64;
            for n in 0..dims.batch {
                for ic in 0..dims.in_c {
                    let dst = grad_input.plane_mut(n, ic);
                    let src = grad_mean.plane(n, 0);
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s * inv;
                    }
                }
            }
        }
    }

    Ok(AbpdcGrads {
        input: grad_input,
        weights: grad_weights,
        gate_scale: gs_grad,
        gate_bias: gb_grad,
    })
}

fn pyramid_weight_totals(w: &Volume5, fp: &PyramidFootprint) -> Vec<f64> {
    let [oc, ic, k, _, _] = w.shape();
    let k3 = k * k * k;
    let entries = offset_entries(fp.pyramid(), k);
    let mut totals = vec![0.0; oc * ic];
    for o in 0..oc {
        for i in 0..ic {
            let base = (o * ic + i) * k3;
            totals[o * ic + i] = entries
                .iter()
                .map(|&(_, kidx)| w.data()[base + kidx])
                .sum();
        }
    }
    totals
}

fn pyramid_weight_totals_entries(
    w: &Volume5,
    entries: &[([i64; 3], usize)],
    k: usize,
) -> Vec<f64> {
    let [oc, ic, _, _, _] = w.shape();
    let k3 = k * k * k;
    let mut totals = vec![0.0; oc * ic];
    for o in 0..oc {
        for i in 0..ic {
            let base = (o * ic + i) * k3;
            totals[o * ic + i] = entries
                .iter()
                .map(|&(_, kidx)| w.data()[base + kidx])
                .sum();
        }
    }
    totals
}

/// diff -= sum_ic center_w[oc,ic] * T(center) at each output voxel.
fn subtract_center_term(diff: &mut Volume5, t: &Volume5, center_w: &[f64], dims: &ConvDims) {
    let [od, oh, ow] = dims.out_sp;
    let [_, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    for n in 0..dims.batch {
        for oc in 0..dims.out_c {
            for ic in 0..dims.in_c {
                let cw = center_w[oc * dims.in_c + ic];
                if cw == 0.0 {
                    continue;
                }
                let x_plane = t.plane(n, ic);
                let d_plane = diff.plane_mut(n, oc);
                for oz in 0..od {
                    for oy in 0..oh {
                        let in_row = (oz * sz * ih + oy * sy) * iw;
                        let out_row = (oz * oh + oy) * ow;
                        for ox in 0..ow {
                            d_plane[out_row + ox] -= cw * x_plane[in_row + ox * sx];
                        }
                    }
                }
            }
        }
    }
}

/// grad_input(center) -= center_w[oc,ic] * go_b at each output voxel.
fn scatter_center_term(grad_input: &mut Volume5, go_b: &Volume5, center_w: &[f64], dims: &ConvDims) {
    let [od, oh, ow] = dims.out_sp;
    let [_, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    for n in 0..dims.batch {
        for ic in 0..dims.in_c {
            let g_plane = grad_input.plane_mut(n, ic);
            for oc in 0..dims.out_c {
                let cw = center_w[oc * dims.in_c + ic];
                if cw == 0.0 {
                    continue;
                }
                let go_plane = go_b.plane(n, oc);
                for oz in 0..od {
                    for oy in 0..oh {
                        let in_row = (oz * sz * ih + oy * sy) * iw;
                        let out_row = (oz * oh + oy) * ow;
                        for ox in 0..ow {
                            g_plane[in_row + ox * sx] -= cw * go_plane[out_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// grad_w[oc,ic,off in S] -= sum_v go_b(v,oc) * T(ic, center(v)).
fn subtract_center_weight_grad(
    grad_w: &mut Volume5,
    go_b: &Volume5,
    t: &Volume5,
    entries_pyr: &[([i64; 3], usize)],
    dims: &ConvDims,
) {
    let [od, oh, ow] = dims.out_sp;
    let [_, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let k3 = dims.k * dims.k * dims.k;
    for n in 0..dims.batch {
        for oc in 0..dims.out_c {
            let go_plane = go_b.plane(n, oc);
            for ic in 0..dims.in_c {
                let x_plane = t.plane(n, ic);
                let mut acc = 0.0;
                for oz in 0..od {
                    for oy in 0..oh {
                        let in_row = (oz * sz * ih + oy * sy) * iw;
                        let out_row = (oz * oh + oy) * ow;
                        for ox in 0..ow {
                            acc += go_plane[out_row + ox] * x_plane[in_row + ox * sx];
                        }
                    }
                }
                let base = (oc * dims.in_c + ic) * k3;
                for &(_, kidx) in entries_pyr {
                    grad_w.data_mut()[base + kidx] -= acc;
                }
            }
        }
    }
}

/// Samples a one-channel input-grid map at each output voxel's center.
fn gather_centers(map_in: &Volume5, dims: &ConvDims) -> Result<Volume5> {
    let [od, oh, ow] = dims.out_sp;
    let [_, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let mut out = Volume5::zeros([dims.batch, 1, od, oh, ow])?;
    for n in 0..dims.batch {
        let src = map_in.plane(n, 0);
        let dst = out.plane_mut(n, 0);
        for oz in 0..od {
            for oy in 0..oh {
                let in_row = (oz * sz * ih + oy * sy) * iw;
                let out_row = (oz * oh + oy) * ow;
                for ox in 0..ow {
                    dst[out_row + ox] = src[in_row + ox * sx];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gather_centers`].
fn scatter_centers(map_out: &Volume5, dims: &ConvDims) -> Result<Volume5> {
    let [od, oh, ow] = dims.out_sp;
    let [id, ih, iw] = dims.in_sp;
    let [sz, sy, sx] = dims.stride;
    let mut out = Volume5::zeros([dims.batch, 1, id, ih, iw])?;
    for n in 0..dims.batch {
        let src = map_out.plane(n, 0);
        let dst = out.plane_mut(n, 0);
        for oz in 0..od {
            for oy in 0..oh {
                let in_row = (oz * sz * ih + oy * sy) * iw;
                let out_row = (oz * oh + oy) * ow;
                for ox in 0..ow {
                    dst[in_row + ox * sx] += src[out_row + ox];
                }
            }
        }
    }
    Ok(out)
}

fn split_by_gate(go: &Volume5, theta_out: &Volume5) -> (Volume5, Volume5) {
    let [n, oc, d, h, w] = go.shape();
    let plane = d * h * w;
    let mut a = Volume5::zeros_like(go);
    let mut b = Volume5::zeros_like(go);
    let god = go.data();
    let td = theta_out.data();
    let ad = a.data_mut();
    let bd = b.data_mut();
    for ni in 0..n {
        for c in 0..oc {
            let base = (ni * oc + c) * plane;
            let tbase = ni * plane;
            for i in 0..plane {
                let th = td[tbase + i];
                ad[base + i] = god[base + i] * (1.0 - th);
                bd[base + i] = god[base + i] * th;
            }
        }
    }
    (a, b)
}
