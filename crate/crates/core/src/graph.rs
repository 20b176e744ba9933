//! Reverse-mode differentiation over [`Volume5`] values.
//!
//! A [`Graph`] records one forward pass as a flat list of values and the
//! operations that produced them. Each operation keeps whatever context its
//! hand-derived backward needs; `backward` walks the list in reverse,
//! accumulating gradients into per-value buffers, and parameter leaves can
//! then be flushed into a [`ParamStore`]. Values are created in topological
//! order by construction, so no explicit sorting is needed.

use std::collections::HashMap;

use crate::abpdc::{
    abpdc_backward, abpdc_forward_opts, AbpdcCtx, AbpdcMode, AbpdcParams,
};
use crate::attention::{cross_attention_backward, cross_attention_forward, AttentionCtx};
use crate::conv::{conv3d_backward, conv3d_forward};
use crate::error::{Error, Result};
use crate::footprint::PyramidFootprint;
use crate::loss::{
    cross_entropy_backward, cross_entropy_forward, ncc_loss_backward, ncc_loss_forward,
    smoothness_loss_backward, smoothness_loss_forward,
};
use crate::norm::{
    global_avg_pool_backward, global_avg_pool_forward, instance_norm_backward,
    instance_norm_forward, relu_backward, relu_forward, InstanceNormCtx,
};
use crate::params::ParamStore;
use crate::volume::Volume5;
use crate::warp::{
    affine_grid, affine_grid_backward, affine_to_displacement, compose_additive,
    compose_backward, compose, trilinear_sample, trilinear_sample_backward,
    upsample_displacement, upsample_displacement_backward, warp, warp_backward, AffineMatrix,
};

/// Handle to a value stored in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Vid(usize);

enum Node {
    /// External input; receives gradients but they go nowhere.
    Input,
    /// Named parameter leaf; gradients flush into the store.
    Param(String),
    Op(Box<dyn GraphOp>),
}

trait GraphOp {
    fn backward(&self, grad_out: &Volume5, graph: &Graph, sink: &mut GradSink) -> Result<()>;
}

/// Per-value gradient buffers populated during the reverse sweep.
pub struct GradSink {
    slots: Vec<Option<Volume5>>,
}

impl GradSink {
    fn add(&mut self, vid: Vid, delta: Volume5) -> Result<()> {
        match &mut self.slots[vid.0] {
            Some(existing) => existing.add_scaled(&delta, 1.0),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    pub fn get(&self, vid: Vid) -> Option<&Volume5> {
        self.slots[vid.0].as_ref()
    }
}

/// One recorded forward pass.
pub struct Graph {
    vals: Vec<Volume5>,
    nodes: Vec<Node>,
    /// Auxiliary scalar outputs (loss values) kept for reporting.
    scalars: HashMap<&'static str, f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            nodes: Vec::new(),
            scalars: HashMap::new(),
        }
    }

    fn push(&mut self, val: Volume5, node: Node) -> Vid {
        self.vals.push(val);
        self.nodes.push(node);
        Vid(self.vals.len() - 1)
    }

    pub fn value(&self, vid: Vid) -> &Volume5 {
        &self.vals[vid.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn note_scalar(&mut self, key: &'static str, value: f64) {
        self.scalars.insert(key, value);
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    /// Registers an external input value.
    pub fn input(&mut self, val: Volume5) -> Vid {
        self.push(val, Node::Input)
    }

    /// Loads a parameter by name; its gradient lands back in the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Vid> {
        let val = store.value(name)?.clone();
        Ok(self.push(val, Node::Param(name.to_string())))
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0)?;
        Ok(self.push(out, Node::Op(Box::new(AddOp { a, b }))))
    }

    pub fn scale(&mut self, x: Vid, factor: f64) -> Vid {
        let mut out = self.value(x).clone();
        out.scale_in_place(factor);
        self.push(out, Node::Op(Box::new(ScaleOp { x, factor })))
    }

    /// Weighted sum of same-shaped values (used for the loss combination).
    pub fn weighted_sum(&mut self, terms: &[(Vid, f64)]) -> Result<Vid> {
        let first = terms
            .first()
            .ok_or_else(|| Error::argument("weighted_sum needs at least one term"))?;
        let mut out = self.value(first.0).clone();
        out.scale_in_place(first.1);
        for &(vid, wgt) in &terms[1..] {
            out.add_scaled(self.value(vid), wgt)?;
        }
        Ok(self.push(
            out,
            Node::Op(Box::new(WeightedSumOp {
                terms: terms.to_vec(),
            })),
        ))
    }

    /// Scalar projection `sum(x * coeffs)`; handy for reducing any value to
    /// a scalar in gradient tests.
    pub fn weighted_reduce(&mut self, x: Vid, coeffs: &Volume5) -> Result<Vid> {
        let dot = self.value(x).dot(coeffs)?;
        let out = Volume5::scalar(dot)?;
        Ok(self.push(
            out,
            Node::Op(Box::new(WeightedReduceOp {
                x,
                coeffs: coeffs.clone(),
            })),
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Vid]) -> Result<Vid> {
        let vols: Vec<&Volume5> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Volume5::concat_channels(&vols)?;
        let channels: Vec<usize> = vols.iter().map(|v| v.channels()).collect();
        Ok(self.push(
            out,
            Node::Op(Box::new(ConcatChannelsOp {
                parts: parts.to_vec(),
                channels,
            })),
        ))
    }

    // ---- neural ops -----------------------------------------------------

    pub fn conv3d(&mut self, x: Vid, w: Vid, b: Option<Vid>, stride: [usize; 3]) -> Result<Vid> {
        let out = conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            stride,
        )?;
        Ok(self.push(out, Node::Op(Box::new(Conv3dOp { x, w, b, stride }))))
    }

    pub fn abpdc(
        &mut self,
        x: Vid,
        weights: Vid,
        gate_scale: Vid,
        gate_bias: Vid,
        mode: AbpdcMode,
        fp: &PyramidFootprint,
        stride: [usize; 3],
        pool_window: usize,
        detach_gate: bool,
    ) -> Result<Vid> {
        let params = AbpdcParams {
            weights: self.value(weights).clone(),
            gate_scale: self.value(gate_scale).scalar_value()?,
            gate_bias: self.value(gate_bias).scalar_value()?,
            mode,
        };
        let (out, ctx) =
            abpdc_forward_opts(self.value(x), &params, fp, stride, pool_window, detach_gate)?;
        Ok(self.push(
            out,
            Node::Op(Box::new(AbpdcOp {
                x,
                weights,
                gate_scale,
                gate_bias,
                ctx,
            })),
        ))
    }

    pub fn instance_norm(&mut self, x: Vid, gamma: Vid, beta: Vid) -> Result<Vid> {
        let (out, ctx) =
            instance_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Node::Op(Box::new(InstanceNormOp {
                x,
                gamma,
                beta,
                ctx,
            })),
        ))
    }

    pub fn relu(&mut self, x: Vid) -> Vid {
        let out = relu_forward(self.value(x));
        self.push(out, Node::Op(Box::new(ReluOp { x })))
    }

    pub fn global_avg_pool(&mut self, x: Vid) -> Result<Vid> {
        let out = global_avg_pool_forward(self.value(x))?;
        Ok(self.push(out, Node::Op(Box::new(GapOp { x }))))
    }

    pub fn cross_attention(
        &mut self,
        q: Vid,
        k: Vid,
        v: Vid,
        window: Option<usize>,
    ) -> Result<Vid> {
        let (out, ctx) =
            cross_attention_forward(self.value(q), self.value(k), self.value(v), window)?;
        Ok(self.push(out, Node::Op(Box::new(AttentionOp { q, k, v, ctx }))))
    }

    // ---- warping --------------------------------------------------------

    pub fn warp(&mut self, src: Vid, disp: Vid) -> Result<Vid> {
        let out = warp(self.value(src), self.value(disp))?;
        Ok(self.push(out, Node::Op(Box::new(WarpOp { src, disp }))))
    }

    pub fn trilinear_sample(&mut self, src: Vid, coords: Vid) -> Result<Vid> {
        let out = trilinear_sample(self.value(src), self.value(coords))?;
        Ok(self.push(out, Node::Op(Box::new(SampleOp { src, coords }))))
    }

    pub fn compose(&mut self, outer: Vid, inner: Vid, literal_add: bool) -> Result<Vid> {
        if literal_add {
            let out = compose_additive(self.value(outer), self.value(inner))?;
            return Ok(self.push(out, Node::Op(Box::new(AddOp { a: outer, b: inner }))));
        }
        let out = compose(self.value(outer), self.value(inner))?;
        Ok(self.push(out, Node::Op(Box::new(ComposeOp { outer, inner }))))
    }

    pub fn upsample_displacement(&mut self, disp: Vid, target: [usize; 3]) -> Result<Vid> {
        let out = upsample_displacement(self.value(disp), target)?;
        let src_shape = self.value(disp).shape();
        Ok(self.push(
            out,
            Node::Op(Box::new(UpsampleOp { disp, src_shape })),
        ))
    }

    /// Resamples `src` through per-batch affine grids. `a12` is a
    /// `(n, 12, 1, 1, 1)` value holding row-major 3x4 matrices.
    pub fn affine_resample(&mut self, src: Vid, a12: Vid) -> Result<Vid> {
        let mats = mats_from_value(self.value(a12))?;
        let spatial = self.value(src).spatial();
        let coords = affine_grid(&mats, self.value(src).batch(), spatial)?;
        let out = trilinear_sample(self.value(src), &coords)?;
        Ok(self.push(
            out,
            Node::Op(Box::new(AffineResampleOp { src, a12, spatial })),
        ))
    }

    /// Displacement-equivalent field of per-batch affines on `spatial`.
    pub fn affine_to_displacement(&mut self, a12: Vid, spatial: [usize; 3]) -> Result<Vid> {
        let mats = mats_from_value(self.value(a12))?;
        let batch = self.value(a12).batch();
        let out = affine_to_displacement(&mats, batch, spatial)?;
        Ok(self.push(
            out,
            Node::Op(Box::new(AffineDispOp { a12, spatial })),
        ))
    }

    /// Assembles full affines from a learnable 12-channel refinement:
    /// `A = base * (I + delta)`, flattened back to 12 channels.
    pub fn affine_from_refinement(&mut self, delta12: Vid, base: AffineMatrix) -> Result<Vid> {
        let deltas = mats_from_value(self.value(delta12))?;
        let n = self.value(delta12).batch();
        let mut out = Volume5::zeros([n, 12, 1, 1, 1])?;
        for (ni, delta) in deltas.iter().enumerate() {
            let mut refined = AffineMatrix::identity();
            for r in 0..3 {
                for c in 0..4 {
                    refined.0[r][c] += delta.0[r][c];
                }
            }
            let total = base.compose(&refined);
            for r in 0..3 {
                for c in 0..4 {
                    out.plane_mut(ni, r * 4 + c)[0] = total.0[r][c];
                }
            }
        }
        Ok(self.push(
            out,
            Node::Op(Box::new(AffineRefineOp { delta12, base })),
        ))
    }

    // ---- losses ---------------------------------------------------------

    pub fn cross_entropy(&mut self, logits: Vid, labels: &[usize]) -> Result<Vid> {
        let (loss, probs) = cross_entropy_forward(self.value(logits), labels)?;
        let out = Volume5::scalar(loss)?;
        Ok(self.push(
            out,
            Node::Op(Box::new(CrossEntropyOp {
                logits,
                labels: labels.to_vec(),
                probs,
            })),
        ))
    }

    pub fn ncc_loss(&mut self, a: Vid, b: Vid, window: usize, eps: f64) -> Result<Vid> {
        let loss = ncc_loss_forward(self.value(a), self.value(b), window, eps)?;
        let out = Volume5::scalar(loss)?;
        Ok(self.push(out, Node::Op(Box::new(NccOp { a, b, window, eps }))))
    }

    pub fn smoothness_loss(&mut self, disp: Vid) -> Result<Vid> {
        let loss = smoothness_loss_forward(self.value(disp))?;
        let out = Volume5::scalar(loss)?;
        Ok(self.push(out, Node::Op(Box::new(SmoothnessOp { disp }))))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Runs the reverse sweep from a scalar value, seeding its gradient
    /// with 1. Returns per-value gradient buffers.
    pub fn backward(&self, loss: Vid) -> Result<GradSink> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward starts from a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut sink = GradSink {
            slots: vec![None; self.vals.len()],
        };
        sink.add(loss, Volume5::scalar(1.0)?)?;
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = sink.slots[idx].take() else {
                continue;
            };
            if let Node::Op(op) = &self.nodes[idx] {
                op.backward(&grad_out, self, &mut sink)?;
            }
            sink.slots[idx] = Some(grad_out);
        }
        Ok(sink)
    }

    /// Adds every parameter-leaf gradient into the store.
    pub fn accumulate_param_grads(&self, sink: &GradSink, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Node::Param(name) = node {
                if let Some(grad) = sink.get(Vid(idx)) {
                    store.accumulate_grad(name, grad)?;
                }
            }
        }
        Ok(())
    }
}

/// Parses `(n, 12, 1, 1, 1)` into per-batch affine matrices.
pub fn mats_from_value(v: &Volume5) -> Result<Vec<AffineMatrix>> {
    let [n, c, d, h, w] = v.shape();
    if c != 12 || d != 1 || h != 1 || w != 1 {
        return Err(Error::shape(format!(
            "affine value must be (n, 12, 1, 1, 1), got {:?}",
            v.shape()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut m = [[0.0; 4]; 3];
        for r in 0..3 {
            for cc in 0..4 {
                m[r][cc] = v.plane(ni, r * 4 + cc)[0];
            }
        }
        out.push(AffineMatrix(m));
    }
    Ok(out)
}

fn mats_to_grad_value(grads: &[[[f64; 4]; 3]]) -> Result<Volume5> {
    let n = grads.len();
    let mut out = Volume5::zeros([n, 12, 1, 1, 1])?;
    for (ni, g) in grads.iter().enumerate() {
        for r in 0..3 {
            for c in 0..4 {
                out.plane_mut(ni, r * 4 + c)[0] = g[r][c];
            }
        }
    }
    Ok(out)
}

// ---- op implementations --------------------------------------------------

struct AddOp {
    a: Vid,
    b: Vid,
}

impl GraphOp for AddOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        sink.add(self.a, go.clone())?;
        sink.add(self.b, go.clone())
    }
}

struct ScaleOp {
    x: Vid,
    factor: f64,
}

impl GraphOp for ScaleOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        let mut d = go.clone();
        d.scale_in_place(self.factor);
        sink.add(self.x, d)
    }
}

struct WeightedSumOp {
    terms: Vec<(Vid, f64)>,
}

impl GraphOp for WeightedSumOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        for &(vid, wgt) in &self.terms {
            let mut d = go.clone();
            d.scale_in_place(wgt);
            sink.add(vid, d)?;
        }
        Ok(())
    }
}

struct WeightedReduceOp {
    x: Vid,
    coeffs: Volume5,
}

impl GraphOp for WeightedReduceOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        let mut d = self.coeffs.clone();
        d.scale_in_place(go.scalar_value()?);
        sink.add(self.x, d)
    }
}

struct ConcatChannelsOp {
    parts: Vec<Vid>,
    channels: Vec<usize>,
}

impl GraphOp for ConcatChannelsOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let [n, _, _, _, _] = go.shape();
        let mut c_off = 0;
        for (part, &pc) in self.parts.iter().zip(&self.channels) {
            let mut grad = Volume5::zeros_like(g.value(*part));
            for ni in 0..n {
                for ci in 0..pc {
                    grad.plane_mut(ni, ci)
                        .copy_from_slice(go.plane(ni, c_off + ci));
                }
            }
            sink.add(*part, grad)?;
            c_off += pc;
        }
        Ok(())
    }
}

struct Conv3dOp {
    x: Vid,
    w: Vid,
    b: Option<Vid>,
    stride: [usize; 3],
}

impl GraphOp for Conv3dOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = conv3d_backward(
            go,
            g.value(self.x),
            g.value(self.w),
            self.b.is_some(),
            self.stride,
        )?;
        sink.add(self.x, grads.input)?;
        sink.add(self.w, grads.weights)?;
        if let (Some(bv), Some(gb)) = (self.b, grads.bias) {
            sink.add(bv, gb)?;
        }
        Ok(())
    }
}

struct AbpdcOp {
    x: Vid,
    weights: Vid,
    gate_scale: Vid,
    gate_bias: Vid,
    ctx: AbpdcCtx,
}

impl GraphOp for AbpdcOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = abpdc_backward(go, &self.ctx)?;
        sink.add(self.x, grads.input)?;
        sink.add(self.weights, grads.weights)?;
        sink.add(self.gate_scale, Volume5::scalar(grads.gate_scale)?)?;
        sink.add(self.gate_bias, Volume5::scalar(grads.gate_bias)?)
    }
}

struct InstanceNormOp {
    x: Vid,
    gamma: Vid,
    beta: Vid,
    ctx: InstanceNormCtx,
}

impl GraphOp for InstanceNormOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = instance_norm_backward(go, g.value(self.x), g.value(self.gamma), &self.ctx)?;
        sink.add(self.x, grads.input)?;
        sink.add(self.gamma, grads.gamma)?;
        sink.add(self.beta, grads.beta)
    }
}

struct ReluOp {
    x: Vid,
}

impl GraphOp for ReluOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        sink.add(self.x, relu_backward(go, g.value(self.x))?)
    }
}

struct GapOp {
    x: Vid,
}

impl GraphOp for GapOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        sink.add(self.x, global_avg_pool_backward(go, g.value(self.x).shape())?)
    }
}

struct AttentionOp {
    q: Vid,
    k: Vid,
    v: Vid,
    ctx: AttentionCtx,
}

impl GraphOp for AttentionOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = cross_attention_backward(
            go,
            g.value(self.q),
            g.value(self.k),
            g.value(self.v),
            &self.ctx,
        )?;
        sink.add(self.q, grads.q)?;
        sink.add(self.k, grads.k)?;
        sink.add(self.v, grads.v)
    }
}

struct WarpOp {
    src: Vid,
    disp: Vid,
}

impl GraphOp for WarpOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = warp_backward(go, g.value(self.src), g.value(self.disp))?;
        sink.add(self.src, grads.src)?;
        sink.add(self.disp, grads.disp)
    }
}

struct SampleOp {
    src: Vid,
    coords: Vid,
}

impl GraphOp for SampleOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = trilinear_sample_backward(go, g.value(self.src), g.value(self.coords))?;
        sink.add(self.src, grads.src)?;
        sink.add(self.coords, grads.coords)
    }
}

struct ComposeOp {
    outer: Vid,
    inner: Vid,
}

impl GraphOp for ComposeOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = compose_backward(go, g.value(self.outer), g.value(self.inner))?;
        sink.add(self.outer, grads.outer)?;
        sink.add(self.inner, grads.inner)
    }
}

struct UpsampleOp {
    disp: Vid,
    src_shape: [usize; 5],
}

impl GraphOp for UpsampleOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        sink.add(self.disp, upsample_displacement_backward(go, self.src_shape)?)
    }
}

struct AffineResampleOp {
    src: Vid,
    a12: Vid,
    spatial: [usize; 3],
}

impl GraphOp for AffineResampleOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let mats = mats_from_value(g.value(self.a12))?;
        let src = g.value(self.src);
        let coords = affine_grid(&mats, src.batch(), self.spatial)?;
        let grads = trilinear_sample_backward(go, src, &coords)?;
        sink.add(self.src, grads.src)?;
        let mat_grads = affine_grid_backward(&grads.coords, self.spatial)?;
        sink.add(self.a12, mats_to_grad_value(&mat_grads)?)
    }
}

struct AffineDispOp {
    a12: Vid,
    spatial: [usize; 3],
}

impl GraphOp for AffineDispOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        // disp and the affine grid differ by the constant identity grid, so
        // the chain to the matrix entries is identical.
        let mat_grads = affine_grid_backward(go, self.spatial)?;
        sink.add(self.a12, mats_to_grad_value(&mat_grads)?)
    }
}

struct AffineRefineOp {
    delta12: Vid,
    base: AffineMatrix,
}

impl GraphOp for AffineRefineOp {
    fn backward(&self, go: &Volume5, _g: &Graph, sink: &mut GradSink) -> Result<()> {
        // A[r][c] = sum_i base[r][i] * (I + delta)[i][c]  (plus base
        // translation), so dA/d delta[i][c] = base[r][i].
        let [n, _, _, _, _] = go.shape();
        let mut grad = Volume5::zeros([n, 12, 1, 1, 1])?;
        for ni in 0..n {
            for i in 0..3 {
                for c in 0..4 {
                    let mut acc = 0.0;
                    for r in 0..3 {
                        acc += self.base.0[r][i] * go.plane(ni, r * 4 + c)[0];
                    }
                    grad.plane_mut(ni, i * 4 + c)[0] = acc;
                }
            }
        }
        sink.add(self.delta12, grad)
    }
}

struct CrossEntropyOp {
    logits: Vid,
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl GraphOp for CrossEntropyOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grad = cross_entropy_backward(
            go.scalar_value()?,
            g.value(self.logits),
            &self.labels,
            &self.probs,
        )?;
        sink.add(self.logits, grad)
    }
}

struct NccOp {
    a: Vid,
    b: Vid,
    window: usize,
    eps: f64,
}

impl GraphOp for NccOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grads = ncc_loss_backward(
            go.scalar_value()?,
            g.value(self.a),
            g.value(self.b),
            self.window,
            self.eps,
        )?;
        sink.add(self.a, grads.a)?;
        sink.add(self.b, grads.b)
    }
}

struct SmoothnessOp {
    disp: Vid,
}

impl GraphOp for SmoothnessOp {
    fn backward(&self, go: &Volume5, g: &Graph, sink: &mut GradSink) -> Result<()> {
        let grad = smoothness_loss_backward(go.scalar_value()?, g.value(self.disp))?;
        sink.add(self.disp, grad)
    }
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
    fn dag_accumulates_gradients_across_consumers() {
        // y = sum(x * c1) + sum(x * c2): grad x = c1 + c2
        let mut store = ParamStore::new();
        store
            .insert("x", random_volume([1, 1, 2, 2, 2], 1))
            .unwrap();
        let c1 = random_volume([1, 1, 2, 2, 2], 2);
        let c2 = random_volume([1, 1, 2, 2, 2], 3);
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let r1 = g.weighted_reduce(x, &c1).unwrap();
        let r2 = g.weighted_reduce(x, &c2).unwrap();
        let total = g.add(r1, r2).unwrap();
        let sink = g.backward(total).unwrap();
        g.accumulate_param_grads(&sink, &mut store).unwrap();
        let mut expect = c1.clone();
        expect.add_scaled(&c2, 1.0).unwrap();
        assert!(store.grad("x").unwrap().max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(random_volume([1, 1, 2, 2, 2], 1));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn unreached_values_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(random_volume([1, 1, 2, 2, 2], 1));
        let y = g.input(random_volume([1, 1, 2, 2, 2], 2));
        let r = g
            .weighted_reduce(x, &Volume5::new([1, 1, 2, 2, 2], 1.0).unwrap())
            .unwrap();
        let sink = g.backward(r).unwrap();
        assert!(sink.get(y).is_none());
        assert!(sink.get(x).is_some());
    }
}
