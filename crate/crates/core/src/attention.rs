//! Single-head scaled dot-product cross-attention over voxel positions.
//!
//! Queries, keys and values are channel-major feature volumes on one grid.
//! With `window = None` every query attends to every position; with
//! `Some(w)` attention is restricted to the `w^3` cube around the query
//! voxel, clipped at the borders (the softmax runs over however many
//! positions remain, so weights always sum to 1). The score scale is
//! `1/sqrt(d_k)`.

use crate::error::{Error, Result};
use crate::volume::Volume5;

/// Per-query neighbor lists shared by forward and backward.
struct NeighborIndex {
    starts: Vec<usize>,
    idx: Vec<usize>,
}

fn build_neighbors(spatial: [usize; 3], window: Option<usize>) -> Result<NeighborIndex> {
    let [d, h, w] = spatial;
    let total = d * h * w;
    match window {
        None => {
            let mut starts = Vec::with_capacity(total + 1);
            let mut idx = Vec::with_capacity(total * total);
            for p in 0..total {
                starts.push(idx.len());
                idx.extend(0..total);
                let _ = p;
            }
            starts.push(idx.len());
            Ok(NeighborIndex { starts, idx })
        }
        Some(win) => {
            if win == 0 || win % 2 == 0 {
                return Err(Error::argument(format!(
                    "attention window must be odd and positive, got {win}"
                )));
            }
            let r = (win / 2) as i64;
            let mut starts = Vec::with_capacity(total + 1);
            let mut idx = Vec::new();
            for z in 0..d as i64 {
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        starts.push(idx.len());
                        for dz in -r..=r {
                            let zz = z + dz;
                            if zz < 0 || zz >= d as i64 {
                                continue;
                            }
                            for dy in -r..=r {
                                let yy = y + dy;
                                if yy < 0 || yy >= h as i64 {
                                    continue;
                                }
                                for dx in -r..=r {
                                    let xx = x + dx;
                                    if xx < 0 || xx >= w as i64 {
                                        continue;
                                    }
                                    idx.push(
                                        (zz as usize * h + yy as usize) * w + xx as usize,
                                    );
                                }
                            }
                        }
                    }
                }
            }
            starts.push(idx.len());
            Ok(NeighborIndex { starts, idx })
        }
    }
}

/// Saved softmax weights; consumed by [`cross_attention_backward`].
pub struct AttentionCtx {
    neighbors: NeighborIndex,
    /// Softmax weights, laid out as `batch` consecutive copies of the
    /// neighbor-index layout.
    weights: Vec<f64>,
    q_shape: [usize; 5],
    v_channels: usize,
}

impl AttentionCtx {
    /// Attention weights of one query position (for tests/inspection).
    pub fn weights_of(&self, batch: usize, position: usize) -> &[f64] {
        let per_batch = self.neighbors.idx.len();
        let (s, e) = (
            self.neighbors.starts[position],
            self.neighbors.starts[position + 1],
        );
        &self.weights[batch * per_batch + s..batch * per_batch + e]
    }
}

fn gather_feature(vol: &Volume5, n: usize, pos: usize, buf: &mut [f64]) {
    for (c, slot) in buf.iter_mut().enumerate() {
        *slot = vol.plane(n, c)[pos];
    }
}

/// Forward pass. `q` supplies queries, `k`/`v` keys and values; all three
/// share batch and spatial extents, `q` and `k` share channel count.
pub fn cross_attention_forward(
    q: &Volume5,
    k: &Volume5,
    v: &Volume5,
    window: Option<usize>,
) -> Result<(Volume5, AttentionCtx)> {
    let [n, dk, zd, yd, xd] = q.shape();
    if k.shape() != [n, dk, zd, yd, xd] {
        return Err(Error::shape(format!(
            "key shape {:?} does not match query shape {:?}",
            k.shape(),
            q.shape()
        )));
    }
    let [vn, dv, vz, vy, vx] = v.shape();
    if vn != n || [vz, vy, vx] != [zd, yd, xd] {
        return Err(Error::shape(format!(
            "value shape {:?} does not match query grid {:?}",
            v.shape(),
            q.shape()
        )));
    }
    let total = zd * yd * xd;
    let neighbors = build_neighbors([zd, yd, xd], window)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Volume5::zeros([n, dv, zd, yd, xd])?;
    let mut weights = vec![0.0; n * neighbors.idx.len()];
    let mut qbuf = vec![0.0; dk];
    let mut kbuf = vec![0.0; dk];
    let mut scores: Vec<f64> = Vec::new();
    for ni in 0..n {
        let wbase = ni * neighbors.idx.len();
        for p in 0..total {
            gather_feature(q, ni, p, &mut qbuf);
            let (s, e) = (neighbors.starts[p], neighbors.starts[p + 1]);
            scores.clear();
            let mut max_s = f64::NEG_INFINITY;
            for &j in &neighbors.idx[s..e] {
                gather_feature(k, ni, j, &mut kbuf);
                let dot: f64 = qbuf.iter().zip(&kbuf).map(|(a, b)| a * b).sum();
                let sc = scale * dot;
                max_s = max_s.max(sc);
                scores.push(sc);
            }
            let mut denom = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - max_s).exp();
                denom += *sc;
            }
            for (local, &j) in neighbors.idx[s..e].iter().enumerate() {
                let a = scores[local] / denom;
                weights[wbase + s + local] = a;
                for c in 0..dv {
                    out.plane_mut(ni, c)[p] += a * v.plane(ni, c)[j];
                }
            }
        }
    }
    let ctx = AttentionCtx {
        neighbors,
        weights,
        q_shape: q.shape(),
        v_channels: dv,
    };
    Ok((out, ctx))
}

pub struct AttentionGrads {
    pub q: Volume5,
    pub k: Volume5,
    pub v: Volume5,
}

/// Backward pass through the softmax attention.
pub fn cross_attention_backward(
    go: &Volume5,
    q: &Volume5,
    k: &Volume5,
    v: &Volume5,
    ctx: &AttentionCtx,
) -> Result<AttentionGrads> {
    if q.shape() != ctx.q_shape || v.channels() != ctx.v_channels {
        return Err(Error::usage(
            "attention context does not match the provided tensors",
        ));
    }
    let [n, dk, zd, yd, xd] = q.shape();
    let dv = v.channels();
    if go.shape() != [n, dv, zd, yd, xd] {
        return Err(Error::usage(format!(
            "upstream gradient shape {:?} does not match attention output",
            go.shape()
        )));
    }
    let total = zd * yd * xd;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut gq = Volume5::zeros_like(q);
    let mut gk = Volume5::zeros_like(k);
    let mut gv = Volume5::zeros_like(v);
    let mut qbuf = vec![0.0; dk];
    let mut gobuf = vec![0.0; dv];
    let mut grad_a: Vec<f64> = Vec::new();
    for ni in 0..n {
        let wbase = ni * ctx.neighbors.idx.len();
        for p in 0..total {
            let (s, e) = (ctx.neighbors.starts[p], ctx.neighbors.starts[p + 1]);
            gather_feature(go, ni, p, &mut gobuf);
            if gobuf.iter().all(|&g| g == 0.0) {
                continue;
            }
            gather_feature(q, ni, p, &mut qbuf);
            // grad wrt raw attention weights, plus value gradients
            grad_a.clear();
            for (local, &j) in ctx.neighbors.idx[s..e].iter().enumerate() {
                let a = ctx.weights[wbase + s + local];
                let mut dot = 0.0;
                for c in 0..dv {
                    let g = gobuf[c];
                    dot += g * v.plane(ni, c)[j];
                    gv.plane_mut(ni, c)[j] += a * g;
                }
                grad_a.push(dot);
            }
            // softmax backward: ds_j = a_j (da_j - sum_l a_l da_l)
            let inner: f64 = ctx.neighbors.idx[s..e]
                .iter()
                .enumerate()
                .map(|(local, _)| ctx.weights[wbase + s + local] * grad_a[local])
                .sum();
            for (local, &j) in ctx.neighbors.idx[s..e].iter().enumerate() {
                let a = ctx.weights[wbase + s + local];
                let ds = a * (grad_a[local] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dk {
                    gq.plane_mut(ni, c)[p] += ds * k.plane(ni, c)[j];
                    gk.plane_mut(ni, c)[j] += ds * qbuf[c];
                }
            }
        }
    }
    Ok(AttentionGrads { q: gq, k: gk, v: gv })
}
