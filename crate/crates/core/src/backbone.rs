//! Four-stage encoder producing a feature pyramid per modality.
//!
//! Each stage is an adaptive-difference convolution followed by instance
//! normalization and a rectifier. Stage strides shrink the spatial extent;
//! the four post-activation maps form the pyramid, fine to coarse.

use crate::abpdc::AbpdcMode;
use crate::error::{Error, Result};
use crate::footprint::PyramidFootprint;
use crate::graph::{Graph, Vid};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::volume::Volume5;

/// Encoder layout and convolution mode.
#[derive(Clone, Copy, Debug)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    /// Per-stage `(z, y, x)` strides, entries in {1, 2}.
    pub stage_strides: [[usize; 3]; 4],
    pub kernel: usize,
    pub mode: AbpdcMode,
    pub pool_window: usize,
    /// Stop the gate's gradient path through the texture map.
    pub detach_gate: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64],
            stage_strides: [[2, 2, 2], [2, 2, 2], [1, 2, 2], [1, 2, 2]],
            kernel: 3,
            mode: AbpdcMode::Adaptive,
            pool_window: 3,
            detach_gate: false,
        }
    }
}

impl BackboneConfig {
    /// Spatial shape of every pyramid level for a given input extent.
    /// Errors when any stage stride does not divide its input extent.
    pub fn level_shapes(&self, input: [usize; 3]) -> Result<[[usize; 3]; 4]> {
        let mut cur = input;
        let mut out = [[0usize; 3]; 4];
        for (si, strides) in self.stage_strides.iter().enumerate() {
            for a in 0..3 {
                if cur[a] % strides[a] != 0 {
                    return Err(Error::shape(format!(
                        "stage {} stride {:?} does not divide spatial extent {:?}",
                        si + 1,
                        strides,
                        cur
                    )));
                }
                cur[a] /= strides[a];
            }
            out[si] = cur;
        }
        Ok(out)
    }

    pub fn footprint(&self) -> Result<PyramidFootprint> {
        PyramidFootprint::new(self.kernel)
    }

    /// Footprint honoring the configured mode; the full-cube variant turns
    /// the difference term into plain central difference convolution.
    pub fn footprint_for_mode(&self, full_cube: bool) -> Result<PyramidFootprint> {
        if full_cube {
            PyramidFootprint::full_cube(self.kernel)
        } else {
            PyramidFootprint::new(self.kernel)
        }
    }
}

/// Feature maps fine to coarse with validated monotone shapes.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: [Volume5; 4],
}

impl FeaturePyramid {
    pub fn from_levels(levels: [Volume5; 4]) -> Result<Self> {
        for i in 1..4 {
            let prev = levels[i - 1].spatial();
            let cur = levels[i].spatial();
            if (0..3).any(|a| cur[a] > prev[a]) {
                return Err(Error::shape(format!(
                    "pyramid level {} grows from {:?} to {:?}",
                    i + 1,
                    prev,
                    cur
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, i: usize) -> &Volume5 {
        &self.levels[i]
    }
}

fn stage_param(prefix: &str, stage: usize, what: &str) -> String {
    format!("{prefix}.stage{}.{what}", stage + 1)
}

/// Registers the encoder parameters for one modality prefix.
pub fn init_backbone_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    cfg: &BackboneConfig,
    prefix: &str,
    in_channels: usize,
) -> Result<()> {
    let mut c_in = in_channels;
    let k = cfg.kernel;
    for stage in 0..4 {
        let c_out = cfg.stage_channels[stage];
        let fan_in = (c_in * k * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let numel = c_out * c_in * k * k * k;
        let w = Volume5::from_vec(
            [c_out, c_in, k, k, k],
            (0..numel).map(|_| rng.normal_scaled(std)).collect(),
        )?;
        store.insert(stage_param(prefix, stage, "weight"), w)?;
        store.insert(stage_param(prefix, stage, "gate_scale"), Volume5::scalar(1.0)?)?;
        store.insert(stage_param(prefix, stage, "gate_bias"), Volume5::scalar(0.0)?)?;
        store.insert(
            stage_param(prefix, stage, "norm_gamma"),
            Volume5::new([1, c_out, 1, 1, 1], 1.0)?,
        )?;
        store.insert(
            stage_param(prefix, stage, "norm_beta"),
            Volume5::zeros([1, c_out, 1, 1, 1])?,
        )?;
        c_in = c_out;
    }
    Ok(())
}

/// Builds the four encoder stages onto the graph and returns the pyramid
/// value handles, fine to coarse.
pub fn backbone_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &BackboneConfig,
    fp: &PyramidFootprint,
    prefix: &str,
    x: Vid,
) -> Result<[Vid; 4]> {
    cfg.level_shapes(g.value(x).spatial())?;
    let mut cur = x;
    let mut levels = [cur; 4];
    for stage in 0..4 {
        let w = g.param(store, &stage_param(prefix, stage, "weight"))?;
        let gs = g.param(store, &stage_param(prefix, stage, "gate_scale"))?;
        let gb = g.param(store, &stage_param(prefix, stage, "gate_bias"))?;
        let gamma = g.param(store, &stage_param(prefix, stage, "norm_gamma"))?;
        let beta = g.param(store, &stage_param(prefix, stage, "norm_beta"))?;
        let conv = g.abpdc(
            cur,
            w,
            gs,
            gb,
            cfg.mode,
            fp,
            cfg.stage_strides[stage],
            cfg.pool_window,
            cfg.detach_gate,
        )?;
        let normed = g.instance_norm(conv, gamma, beta)?;
        cur = g.relu(normed);
        levels[stage] = cur;
    }
    Ok(levels)
}
