//! Joint model: two encoders, the alignment stack, the linear classifier,
//! and the combined loss with a single backward pass.

use crate::backbone::{backbone_forward, init_backbone_params, BackboneConfig};
use crate::error::{Error, Result};
use crate::fpran::{cascade, init_fpran_params, FpranConfig};
use crate::graph::{Graph, Vid};
use crate::loss::cross_entropy_forward;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::volume::Volume5;

/// Non-negative weights of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub class_w: f64,
    pub sim_w: f64,
    pub reg_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class_w: 1.0,
            sim_w: 1.0,
            reg_w: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.class_w < 0.0 || self.sim_w < 0.0 || self.reg_w < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Full model configuration.
#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` disables the alignment stack (classification only).
    pub fpran: Option<FpranConfig>,
    pub weights: LossWeights,
    pub ncc_window: usize,
    pub ncc_eps: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Replace the pyramid subset by the full cube (the plain
    /// central-difference baseline).
    pub full_cube_footprint: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fpran: Some(FpranConfig::default()),
            weights: LossWeights::default(),
            ncc_window: 9,
            ncc_eps: 1e-5,
            in_channels: 1,
            num_classes: 2,
            full_cube_footprint: false,
        }
    }
}

/// Registers every parameter of the configured model.
pub fn init_model_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.weights.validate()?;
    let mut store = ParamStore::new();
    init_backbone_params(&mut store, rng, &cfg.backbone, "ct", cfg.in_channels)?;
    init_backbone_params(&mut store, rng, &cfg.backbone, "mri", cfg.in_channels)?;
    if let Some(fcfg) = &cfg.fpran {
        init_fpran_params(&mut store, rng, fcfg, cfg.backbone.stage_channels)?;
    }
    let c4 = cfg.backbone.stage_channels[3];
    let feat = 2 * c4;
    let std = (1.0 / feat as f64).sqrt();
    let w = Volume5::from_vec(
        [cfg.num_classes, feat, 1, 1, 1],
        (0..cfg.num_classes * feat).map(|_| rng.normal_scaled(std)).collect(),
    )?;
    store.insert("classifier.weight", w)?;
    store.insert(
        "classifier.bias",
        Volume5::zeros([1, cfg.num_classes, 1, 1, 1])?,
    )?;
    Ok(store)
}

/// Handles into one recorded joint forward pass.
pub struct JointForward {
    pub total: Vid,
    pub logits: Option<Vid>,
    pub field: Option<Vid>,
    /// Finest field lifted onto the input grid (what actually warps the
    /// raw volume).
    pub field_full: Option<Vid>,
    pub fields: Option<[Vid; 4]>,
    pub warped_ct: Option<Vid>,
    pub loss_class: f64,
    pub loss_sim: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    /// Softmax rows `(n, num_classes)` when the classifier ran.
    pub probs: Option<Vec<f64>>,
}

/// Pooled-feature linear classifier over both coarse maps.
pub fn classify(
    g: &mut Graph,
    store: &ParamStore,
    f4_ct: Vid,
    f4_mri: Vid,
) -> Result<Vid> {
    let pooled_ct = g.global_avg_pool(f4_ct)?;
    let pooled_mri = g.global_avg_pool(f4_mri)?;
    let feats = g.concat_channels(&[pooled_ct, pooled_mri])?;
    let w = g.param(store, "classifier.weight")?;
    let b = g.param(store, "classifier.bias")?;
    if g.value(w).shape()[1] != g.value(feats).channels() {
        return Err(Error::shape(format!(
            "classifier expects {} channels, got {}",
            g.value(w).shape()[1],
            g.value(feats).channels()
        )));
    }
    g.conv3d(feats, w, Some(b), [1, 1, 1])
}

/// Records the joint forward pass. `labels` may be empty only when the
/// classification weight is zero. Loss terms with zero weight are skipped
/// entirely so their subgraphs do not run backward.
pub fn build_joint(
    g: &mut Graph,
    cfg: &ModelConfig,
    store: &ParamStore,
    x_ct: Volume5,
    x_mri: Volume5,
    labels: &[usize],
) -> Result<JointForward> {
    cfg.weights.validate()?;
    if x_ct.shape() != x_mri.shape() {
        return Err(Error::shape(format!(
            "modality shapes differ: {:?} vs {:?}",
            x_ct.shape(),
            x_mri.shape()
        )));
    }
    if cfg.weights.class_w > 0.0 && labels.len() != x_ct.batch() {
        return Err(Error::shape(format!(
            "{} labels for batch of {}",
            labels.len(),
            x_ct.batch()
        )));
    }
    let fp = cfg.backbone.footprint_for_mode(cfg.full_cube_footprint)?;
    let ct = g.input(x_ct);
    let mri = g.input(x_mri);
    let f_ct = backbone_forward(g, store, &cfg.backbone, &fp, "ct", ct)?;
    let f_mri = backbone_forward(g, store, &cfg.backbone, &fp, "mri", mri)?;

    let mut terms: Vec<(Vid, f64)> = Vec::new();
    let mut out = JointForward {
        total: ct, // replaced below
        logits: None,
        field: None,
        field_full: None,
        fields: None,
        warped_ct: None,
        loss_class: 0.0,
        loss_sim: 0.0,
        loss_reg: 0.0,
        loss_total: 0.0,
        probs: None,
    };

    if cfg.weights.class_w > 0.0 {
        let logits = classify(g, store, f_ct[3], f_mri[3])?;
        let ce = g.cross_entropy(logits, labels)?;
        out.loss_class = g.value(ce).scalar_value()?;
        let (_, probs) = cross_entropy_forward(g.value(logits), labels)?;
        out.probs = Some(probs);
        out.logits = Some(logits);
        terms.push((ce, cfg.weights.class_w));
    }

    if let Some(fcfg) = &cfg.fpran {
        let (field, fields) = cascade(g, store, fcfg, f_ct, f_mri)?;
        // the finest field lives on the level-1 feature grid; lift it to the
        // input grid before warping the raw volume
        let input_spatial = g.value(ct).spatial();
        let field_full = if g.value(field).spatial() == input_spatial {
            field
        } else {
            g.upsample_displacement(field, input_spatial)?
        };
        let warped = g.warp(ct, field_full)?;
        out.field = Some(field);
        out.field_full = Some(field_full);
        out.fields = Some(fields);
        out.warped_ct = Some(warped);
        if cfg.weights.sim_w > 0.0 {
            let sim = g.ncc_loss(mri, warped, cfg.ncc_window, cfg.ncc_eps)?;
            out.loss_sim = g.value(sim).scalar_value()?;
            terms.push((sim, cfg.weights.sim_w));
        }
        if cfg.weights.reg_w > 0.0 {
            let reg = g.smoothness_loss(field)?;
            out.loss_reg = g.value(reg).scalar_value()?;
            terms.push((reg, cfg.weights.reg_w));
        }
    }

    if terms.is_empty() {
        return Err(Error::config(
            "no active loss terms: all weights are zero or paths disabled",
        ));
    }
    let total = g.weighted_sum(&terms)?;
    out.total = total;
    out.loss_total = g.value(total).scalar_value()?;
    Ok(out)
}

/// Per-step summary returned by [`train_step`].
pub struct StepStats {
    pub loss_total: f64,
    pub loss_class: f64,
    pub loss_sim: f64,
    pub loss_reg: f64,
    /// Argmax predictions when the classifier ran.
    pub preds: Vec<usize>,
    /// Probability of class 1 per batch item when the classifier ran.
    pub scores: Vec<f64>,
}

/// One optimization step on a batch: forward, backward, AdamW update.
pub fn train_step(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    opt: &mut AdamW,
    x_ct: Volume5,
    x_mri: Volume5,
    labels: &[usize],
) -> Result<StepStats> {
    let mut g = Graph::new();
    let fwd = build_joint(&mut g, cfg, store, x_ct, x_mri, labels)?;
    let sink = g.backward(fwd.total)?;
    store.zero_grads();
    g.accumulate_param_grads(&sink, store)?;
    opt.step(store)?;
    let (preds, scores) = predictions_from_probs(fwd.probs.as_deref(), cfg.num_classes);
    Ok(StepStats {
        loss_total: fwd.loss_total,
        loss_class: fwd.loss_class,
        loss_sim: fwd.loss_sim,
        loss_reg: fwd.loss_reg,
        preds,
        scores,
    })
}

/// Argmax labels and class-1 scores from softmax rows.
pub fn predictions_from_probs(
    probs: Option<&[f64]>,
    num_classes: usize,
) -> (Vec<usize>, Vec<f64>) {
    let Some(probs) = probs else {
        return (Vec::new(), Vec::new());
    };
    let n = probs.len() / num_classes;
    let mut preds = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for ni in 0..n {
        let row = &probs[ni * num_classes..(ni + 1) * num_classes];
        let mut best = 0;
        for c in 1..num_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        preds.push(best);
        scores.push(row[1.min(num_classes - 1)]);
    }
    (preds, scores)
}

/// Evaluation forward pass (no gradients): logits, field and warped volume.
pub struct Inference {
    pub probs: Option<Vec<f64>>,
    pub preds: Vec<usize>,
    pub scores: Vec<f64>,
    pub field: Option<Volume5>,
    pub field_full: Option<Volume5>,
    pub warped_ct: Option<Volume5>,
    pub loss_sim: f64,
}

pub fn infer(
    cfg: &ModelConfig,
    store: &ParamStore,
    x_ct: Volume5,
    x_mri: Volume5,
    labels: &[usize],
) -> Result<Inference> {
    let mut g = Graph::new();
    let fwd = build_joint(&mut g, cfg, store, x_ct, x_mri, labels)?;
    let (preds, scores) = predictions_from_probs(fwd.probs.as_deref(), cfg.num_classes);
    Ok(Inference {
        probs: fwd.probs,
        preds,
        scores,
        field: fwd.field.map(|v| g.value(v).clone()),
        field_full: fwd.field_full.map(|v| g.value(v).clone()),
        warped_ct: fwd.warped_ct.map(|v| g.value(v).clone()),
        loss_sim: fwd.loss_sim,
    })
}
