//! Experiment drivers: dataset export, training, and pairwise registration.
//!
//! Every run is a pure function of its configuration: logs are JSON lines,
//! the final summary is a single JSON object, and repeated runs with one
//! seed produce byte-identical artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use voxreg_core::io::{write_checkpoint, write_volume};
use voxreg_core::loss::ncc_loss_forward;
use voxreg_core::model::{infer, init_model_params, train_step};
use voxreg_core::optim::{AdamConfig, AdamW, StepDecay};
use voxreg_core::{Error, Result, Rng, Volume5};

use crate::config::ExperimentConfig;
use crate::metrics::{compute_metrics, Metrics};
use crate::synthetic::{endpoint_error, generate_case, GenConfig, SyntheticCase};

fn gen_config(cfg: &ExperimentConfig) -> GenConfig {
    GenConfig {
        shape: cfg.shape,
        lesion_amplitude: cfg.lesion_amplitude,
        noise: cfg.noise,
        remap: cfg.remap,
        rotation: cfg.base_rotation,
        psi_max: cfg.psi_max,
        label_balance: cfg.label_balance,
        texture_amplitude: cfg.texture_amplitude,
        ..GenConfig::default()
    }
}

fn make_cases(cfg: &ExperimentConfig, split: &str, count: usize) -> Result<Vec<SyntheticCase>> {
    let root = Rng::new(cfg.seed);
    let gcfg = gen_config(cfg);
    (0..count)
        .map(|i| {
            let mut rng = root.derive(split, i as u64);
            generate_case(&mut rng, &gcfg)
        })
        .collect()
}

fn optimizer(cfg: &ExperimentConfig) -> Result<AdamW> {
    AdamW::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    })
}

fn batch_views<'a>(
    cases: &'a [SyntheticCase],
    order: &[usize],
) -> Result<(Volume5, Volume5, Vec<usize>)> {
    let cts: Vec<&Volume5> = order.iter().map(|&i| &cases[i].ct).collect();
    let mris: Vec<&Volume5> = order.iter().map(|&i| &cases[i].mri).collect();
    let labels: Vec<usize> = order.iter().map(|&i| cases[i].label).collect();
    Ok((
        Volume5::concat_batch(&cts)?,
        Volume5::concat_batch(&mris)?,
        labels,
    ))
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss_class: f64,
    loss_sim: f64,
    loss_reg: f64,
    train_acc: f64,
}

/// Final training summary. Registration metrics appear only when the
/// alignment stack is enabled.
#[derive(Serialize, Clone, Debug)]
pub struct TrainReport {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_endpoint_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ncc_after: Option<f64>,
    pub steps_run: usize,
    /// First optimization step index whose epoch ended at full training
    /// accuracy, when that happened.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_to_fit: Option<usize>,
}

/// Trains on generated cases and writes `log.jsonl`, `report.json` and
/// `model.ckpt` under `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.backbone.level_shapes(cfg.shape)?;
    if cfg.n_train == 0 {
        return Err(Error::config("n_train must be >= 1"));
    }
    fs::create_dir_all(out)?;
    let train_cases = make_cases(cfg, "train", cfg.n_train)?;
    let test_cases = make_cases(cfg, "test", cfg.n_test)?;

    let mut init_rng = Rng::new(cfg.seed).derive("init", 0);
    let mut store = init_model_params(&model_cfg, &mut init_rng)?;
    let mut opt = optimizer(cfg)?;
    let schedule = StepDecay::new(cfg.lr, cfg.decay_factor, cfg.decay_every);

    let mut log = fs::File::create(out.join("log.jsonl"))?;
    let shuffle_root = Rng::new(cfg.seed);
    let mut steps_run = 0usize;
    let mut steps_to_fit: Option<usize> = None;

    for epoch in 0..cfg.epochs {
        opt.set_lr(schedule.lr_at_epoch(epoch))?;
        let mut order: Vec<usize> = (0..cfg.n_train).collect();
        shuffle_root.derive("shuffle", epoch as u64).shuffle(&mut order);
        let mut sums = [0.0f64; 3];
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x_ct, x_mri, labels) = batch_views(&train_cases, chunk)?;
            let stats = train_step(&model_cfg, &mut store, &mut opt, x_ct, x_mri, &labels)?;
            steps_run += 1;
            let k = chunk.len() as f64;
            sums[0] += stats.loss_class * k;
            sums[1] += stats.loss_sim * k;
            sums[2] += stats.loss_reg * k;
            correct += stats
                .preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += chunk.len();
        }
        let train_acc = correct as f64 / seen as f64;
        let row = EpochRow {
            epoch,
            loss_class: sums[0] / seen as f64,
            loss_sim: sums[1] / seen as f64,
            loss_reg: sums[2] / seen as f64,
            train_acc,
        };
        writeln!(log, "{}", serde_json::to_string(&row).expect("serializable row"))?;
        if train_acc == 1.0 && steps_to_fit.is_none() {
            steps_to_fit = Some(steps_run);
        }
        if cfg.early_stop_train_acc && train_acc == 1.0 {
            break;
        }
    }

    // evaluation: held-out cases when available, otherwise the train set
    let eval_cases: &[SyntheticCase] = if cfg.n_test > 0 {
        &test_cases
    } else {
        &train_cases
    };
    let order: Vec<usize> = (0..eval_cases.len()).collect();
    let (x_ct, x_mri, labels) = batch_views(eval_cases, &order)?;
    let fwd = infer(&model_cfg, &store, x_ct, x_mri.clone(), &labels)?;
    let m: Metrics = compute_metrics(&fwd.preds, &labels, &fwd.scores)?;

    let (mean_epe, ncc_after) = match (&fwd.field_full, &fwd.warped_ct) {
        (Some(field), Some(warped)) => {
            let truths: Vec<&Volume5> = order.iter().map(|&i| &eval_cases[i].psi_total).collect();
            let truth = Volume5::concat_batch(&truths)?;
            let epe = endpoint_error(field, &truth)?;
            let ncc = -ncc_loss_forward(&x_mri, warped, cfg.ncc_window, cfg.ncc_eps)?;
            (Some(epe), Some(ncc))
        }
        _ => (None, None),
    };

    let report = TrainReport {
        accuracy: m.accuracy,
        f1: m.f1,
        auc: m.auc,
        mean_endpoint_error: mean_epe,
        ncc_after,
        steps_run,
        steps_to_fit,
    };
    write_json(out.join("report.json"), &report)?;
    write_checkpoint(out.join("model.ckpt"), &store, &opt)?;
    Ok(report)
}

#[derive(Serialize)]
struct RegisterRow {
    step: usize,
    loss_sim: f64,
    loss_reg: f64,
    ncc: f64,
    endpoint_error: f64,
}

#[derive(Serialize, Clone, Debug)]
pub struct RegisterReport {
    pub ncc_initial: f64,
    pub ncc_final: f64,
    pub endpoint_error_initial: f64,
    pub endpoint_error_final: f64,
    pub steps_run: usize,
}

/// Optimizes the alignment stack and both encoders on a single generated
/// pair under the similarity and smoothness terms, then writes the final
/// field (`psi1.vol5`), the warped source (`xct_warped.vol5`), a step log
/// and `report.json` under `out`.
pub fn run_register(cfg: &ExperimentConfig, out: &Path) -> Result<RegisterReport> {
    cfg.validate()?;
    if !cfg.fpran {
        return Err(Error::config("register requires fpran = true"));
    }
    let mut model_cfg = cfg.model_config();
    model_cfg.weights.class_w = 0.0;
    if model_cfg.weights.sim_w <= 0.0 {
        return Err(Error::config("register requires lambda_sim > 0"));
    }
    model_cfg.backbone.level_shapes(cfg.shape)?;
    fs::create_dir_all(out)?;

    let mut case_rng = Rng::new(cfg.seed).derive("register", 0);
    let case = generate_case(&mut case_rng, &gen_config(cfg))?;

    let mut init_rng = Rng::new(cfg.seed).derive("init", 0);
    let mut store = init_model_params(&model_cfg, &mut init_rng)?;
    let mut opt = optimizer(cfg)?;

    let evaluate = |store: &voxreg_core::ParamStore| -> Result<(f64, f64, Volume5, Volume5)> {
        let fwd = infer(
            &model_cfg,
            store,
            case.ct.clone(),
            case.mri.clone(),
            &[],
        )?;
        let field = fwd
            .field_full
            .ok_or_else(|| Error::usage("registration forward produced no field"))?;
        let warped = fwd
            .warped_ct
            .ok_or_else(|| Error::usage("registration forward produced no warp"))?;
        let ncc = -ncc_loss_forward(&case.mri, &warped, cfg.ncc_window, cfg.ncc_eps)?;
        let epe = endpoint_error(&field, &case.psi_total)?;
        Ok((ncc, epe, field, warped))
    };

    let (ncc_initial, epe_initial, _, _) = evaluate(&store)?;
    let mut log = fs::File::create(out.join("log.jsonl"))?;
    let mut steps_run = 0usize;
    for step in 0..cfg.register_steps {
        let stats = train_step(
            &model_cfg,
            &mut store,
            &mut opt,
            case.ct.clone(),
            case.mri.clone(),
            &[],
        )?;
        steps_run += 1;
        let check_now = (step + 1) % 10 == 0 || step + 1 == cfg.register_steps;
        if check_now {
            let (ncc, epe, _, _) = evaluate(&store)?;
            let row = RegisterRow {
                step: step + 1,
                loss_sim: stats.loss_sim,
                loss_reg: stats.loss_reg,
                ncc,
                endpoint_error: epe,
            };
            writeln!(log, "{}", serde_json::to_string(&row).expect("serializable row"))?;
            if epe <= 0.5 * epe_initial && ncc >= 0.9 {
                break;
            }
        }
    }
    let (ncc_final, epe_final, field, warped) = evaluate(&store)?;
    write_volume(out.join("psi1.vol5"), &field)?;
    write_volume(out.join("xct_warped.vol5"), &warped)?;
    let report = RegisterReport {
        ncc_initial,
        ncc_final,
        endpoint_error_initial: epe_initial,
        endpoint_error_final: epe_final,
        steps_run,
    };
    write_json(out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct CaseMeta {
    dir: String,
    split: &'static str,
    label: usize,
}

/// Exports the generated dataset (`n_train` + `n_test` cases) as VOL5
/// volumes plus a manifest.
pub fn run_gen(cfg: &ExperimentConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut manifest = Vec::new();
    let mut index = 0usize;
    for (split, count) in [("train", cfg.n_train), ("test", cfg.n_test)] {
        let cases = make_cases(cfg, split, count)?;
        for case in cases {
            let dir_name = format!("case_{index:04}");
            let dir = out.join(&dir_name);
            fs::create_dir_all(&dir)?;
            write_volume(dir.join("mri.vol5"), &case.mri)?;
            write_volume(dir.join("ct.vol5"), &case.ct)?;
            write_volume(dir.join("psi_star.vol5"), &case.psi_star)?;
            write_volume(dir.join("psi_total.vol5"), &case.psi_total)?;
            write_json(
                dir.join("meta.json"),
                &CaseMeta {
                    dir: dir_name,
                    split,
                    label: case.label,
                },
            )?;
            manifest.push(CaseMeta {
                dir: format!("case_{index:04}"),
                split,
                label: case.label,
            });
            index += 1;
        }
    }
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(index)
}

/// Reads `pred score` lines and `label` lines, and computes the metrics.
pub fn run_metrics(pred_path: &Path, labels_path: &Path) -> Result<Metrics> {
    let pred_text = fs::read_to_string(pred_path)?;
    let label_text = fs::read_to_string(labels_path)?;
    let mut preds = Vec::new();
    let mut scores = Vec::new();
    for (ln, line) in pred_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let p: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(format!("pred line {}: expected `pred score`", ln + 1)))?;
        let s: f64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(format!("pred line {}: expected `pred score`", ln + 1)))?;
        preds.push(p);
        scores.push(s);
    }
    let labels: Vec<usize> = label_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse()
                .map_err(|_| Error::format(format!("bad label line `{l}`")))
        })
        .collect::<Result<_>>()?;
    compute_metrics(&preds, &labels, &scores)
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
