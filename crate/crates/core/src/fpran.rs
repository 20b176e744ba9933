//! Coarse-to-fine spatial alignment across two feature pyramids.
//!
//! Four alignment modules estimate a displacement field on the target
//! (second-modality) grid. The coarsest module re-orients the source
//! features through a base 90-degree rotation refined by a small learnable
//! affine, fuses them with the target features through full cross-attention,
//! and folds the affine into the returned field as an equivalent
//! displacement, so finer levels inherit the re-orientation through plain
//! warping. Finer modules warp the source features by the upsampled field,
//! estimate a windowed cross-attention residual, and compose it with the
//! propagated field.
//!
//! Every output projection starts at zero, so an untrained cascade with the
//! rotation disabled is exactly the identity.

use crate::error::{Error, Result};
use crate::graph::{Graph, Vid};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::volume::Volume5;
use crate::warp::AffineMatrix;

/// Alignment-stack configuration.
#[derive(Clone, Copy, Debug)]
pub struct FpranConfig {
    /// Channel width of the attention projections.
    pub attn_dim: usize,
    /// Odd window extent for fine-level attention.
    pub window: usize,
    /// Hidden width of the affine refinement head.
    pub refine_channels: usize,
    /// Apply the base 90-degree rotation at the coarsest level.
    pub base_rotation: bool,
    /// Propagate fields by literal addition instead of composition.
    pub literal_add: bool,
}

impl Default for FpranConfig {
    fn default() -> Self {
        Self {
            attn_dim: 16,
            window: 3,
            refine_channels: 16,
            base_rotation: true,
            literal_add: false,
        }
    }
}

fn level_param(level: usize, what: &str) -> String {
    format!("fpran.l{level}.{what}")
}

fn conv_init(rng: &mut Rng, out_c: usize, in_c: usize, k: usize) -> Result<Volume5> {
    let fan_in = (in_c * k * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let numel = out_c * in_c * k * k * k;
    Volume5::from_vec(
        [out_c, in_c, k, k, k],
        (0..numel).map(|_| rng.normal_scaled(std)).collect(),
    )
}

/// Registers all alignment parameters. `stage_channels` are the per-level
/// feature widths of the backbone, fine to coarse.
pub fn init_fpran_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    cfg: &FpranConfig,
    stage_channels: [usize; 4],
) -> Result<()> {
    for level in 1..=4 {
        let c = stage_channels[level - 1];
        for modality in ["enhance_ct", "enhance_mri"] {
            store.insert(
                level_param(level, &format!("{modality}.weight")),
                conv_init(rng, c, c, 3)?,
            )?;
            store.insert(
                level_param(level, &format!("{modality}.bias")),
                Volume5::zeros([1, c, 1, 1, 1])?,
            )?;
        }
        for proj in ["q", "k", "v"] {
            store.insert(
                level_param(level, &format!("{proj}.weight")),
                conv_init(rng, cfg.attn_dim, c, 1)?,
            )?;
        }
        // zero-initialized readout: the untrained module emits no residual
        store.insert(
            level_param(level, "out.weight"),
            Volume5::zeros([3, cfg.attn_dim, 1, 1, 1])?,
        )?;
        store.insert(level_param(level, "out.bias"), Volume5::zeros([1, 3, 1, 1, 1])?)?;
    }
    let c4 = stage_channels[3];
    let rc = cfg.refine_channels;
    store.insert("fpran.refine.c1.weight", conv_init(rng, rc, c4, 3)?)?;
    store.insert("fpran.refine.c1.bias", Volume5::zeros([1, rc, 1, 1, 1])?)?;
    store.insert("fpran.refine.c2.weight", conv_init(rng, rc, rc, 3)?)?;
    store.insert("fpran.refine.c2.bias", Volume5::zeros([1, rc, 1, 1, 1])?)?;
    // zero-initialized head: the untrained affine is exactly the base
    store.insert("fpran.refine.c3.weight", Volume5::zeros([12, rc, 3, 3, 3])?)?;
    store.insert("fpran.refine.c3.bias", Volume5::zeros([1, 12, 1, 1, 1])?)?;
    Ok(())
}

fn enhance(
    g: &mut Graph,
    store: &ParamStore,
    level: usize,
    modality: &str,
    x: Vid,
) -> Result<Vid> {
    let w = g.param(store, &level_param(level, &format!("{modality}.weight")))?;
    let b = g.param(store, &level_param(level, &format!("{modality}.bias")))?;
    let conv = g.conv3d(x, w, Some(b), [1, 1, 1])?;
    Ok(g.relu(conv))
}

fn project_residual(
    g: &mut Graph,
    store: &ParamStore,
    level: usize,
    query_feat: Vid,
    kv_feat: Vid,
    window: Option<usize>,
) -> Result<Vid> {
    let wq = g.param(store, &level_param(level, "q.weight"))?;
    let wk = g.param(store, &level_param(level, "k.weight"))?;
    let wv = g.param(store, &level_param(level, "v.weight"))?;
    let q = g.conv3d(query_feat, wq, None, [1, 1, 1])?;
    let k = g.conv3d(kv_feat, wk, None, [1, 1, 1])?;
    let v = g.conv3d(kv_feat, wv, None, [1, 1, 1])?;
    let attended = g.cross_attention(q, k, v, window)?;
    let wo = g.param(store, &level_param(level, "out.weight"))?;
    let bo = g.param(store, &level_param(level, "out.bias"))?;
    g.conv3d(attended, wo, Some(bo), [1, 1, 1])
}

/// Coarsest-level alignment: affine re-orientation plus full
/// cross-attention, returning the level-4 displacement field with the
/// affine folded in.
pub fn sam_coarse(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FpranConfig,
    f4_ct: Vid,
    f4_mri: Vid,
) -> Result<Vid> {
    let spatial = g.value(f4_ct).spatial();
    if g.value(f4_mri).spatial() != spatial || g.value(f4_mri).batch() != g.value(f4_ct).batch()
    {
        return Err(Error::shape(format!(
            "coarse feature shapes differ: {:?} vs {:?}",
            g.value(f4_ct).shape(),
            g.value(f4_mri).shape()
        )));
    }
    let base = if cfg.base_rotation {
        if spatial[0] != spatial[2] {
            return Err(Error::config(format!(
                "base rotation needs equal z and x extents at the coarsest \
                 level, got {spatial:?}"
            )));
        }
        AffineMatrix::rotation_90_y()
    } else {
        AffineMatrix::identity()
    };

    let enh_ct = enhance(g, store, 4, "enhance_ct", f4_ct)?;
    let enh_mri = enhance(g, store, 4, "enhance_mri", f4_mri)?;

    // learnable refinement head on the source features
    let w1 = g.param(store, "fpran.refine.c1.weight")?;
    let b1 = g.param(store, "fpran.refine.c1.bias")?;
    let w2 = g.param(store, "fpran.refine.c2.weight")?;
    let b2 = g.param(store, "fpran.refine.c2.bias")?;
    let w3 = g.param(store, "fpran.refine.c3.weight")?;
    let b3 = g.param(store, "fpran.refine.c3.bias")?;
    let r1 = g.conv3d(enh_ct, w1, Some(b1), [1, 1, 1])?;
    let r1 = g.relu(r1);
    let r2 = g.conv3d(r1, w2, Some(b2), [1, 1, 1])?;
    let r2 = g.relu(r2);
    let r3 = g.conv3d(r2, w3, Some(b3), [1, 1, 1])?;
    let delta12 = g.global_avg_pool(r3)?;
    let a12 = g.affine_from_refinement(delta12, base)?;

    let ct_oriented = g.affine_resample(enh_ct, a12)?;
    let residual = project_residual(g, store, 4, enh_mri, ct_oriented, None)?;
    let affine_disp = g.affine_to_displacement(a12, spatial)?;
    g.compose(residual, affine_disp, cfg.literal_add)
}

/// Fine-level alignment: windowed cross-attention residual between warped
/// source features and target features.
pub fn sam_fine(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FpranConfig,
    f_ct_warped: Vid,
    f_mri: Vid,
    level: usize,
) -> Result<Vid> {
    if g.value(f_ct_warped).shape() != g.value(f_mri).shape() {
        return Err(Error::shape(format!(
            "level-{level} feature shapes differ: {:?} vs {:?}",
            g.value(f_ct_warped).shape(),
            g.value(f_mri).shape()
        )));
    }
    let enh_ct = enhance(g, store, level, "enhance_ct", f_ct_warped)?;
    let enh_mri = enhance(g, store, level, "enhance_mri", f_mri)?;
    project_residual(g, store, level, enh_mri, enh_ct, Some(cfg.window))
}

/// Runs the full coarse-to-fine recurrence. Returns the finest-level field
/// plus all intermediates, coarse to fine (`[psi4, psi3, psi2, psi1]`).
pub fn cascade(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FpranConfig,
    f_ct: [Vid; 4],
    f_mri: [Vid; 4],
) -> Result<(Vid, [Vid; 4])> {
    for i in 0..4 {
        if g.value(f_ct[i]).shape() != g.value(f_mri[i]).shape() {
            return Err(Error::shape(format!(
                "pyramid level {} shapes differ: {:?} vs {:?}",
                i + 1,
                g.value(f_ct[i]).shape(),
                g.value(f_mri[i]).shape()
            )));
        }
    }
    let psi4 = sam_coarse(g, store, cfg, f_ct[3], f_mri[3])?;
    let mut fields = [psi4; 4];
    let mut current = psi4;
    for level in (1..=3).rev() {
        let idx = level - 1;
        let target = g.value(f_ct[idx]).spatial();
        let propagated = g.upsample_displacement(current, target)?;
        let warped = g.warp(f_ct[idx], propagated)?;
        let residual = sam_fine(g, store, cfg, warped, f_mri[idx], level)?;
        current = g.compose(residual, propagated, cfg.literal_add)?;
        fields[4 - level] = current;
    }
    Ok((current, fields))
}
