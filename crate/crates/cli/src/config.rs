//! Flat `key = value` experiment configuration with a stable round-trip.

use std::fmt::Write as _;
use std::path::Path;

use voxreg_core::abpdc::AbpdcMode;
use voxreg_core::{BackboneConfig, Error, FpranConfig, LossWeights, ModelConfig, Result};

/// Convolution-mode selector, including the fixed-gate baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModeSpec {
    Standard,
    /// Fixed gate over the pyramid subset.
    Fixed(f64),
    /// Fixed gate over the full cube (plain central difference baseline).
    Cdc(f64),
    Adaptive,
}

impl ModeSpec {
    fn parse(s: &str) -> Result<Self> {
        if s == "standard" {
            return Ok(ModeSpec::Standard);
        }
        if s == "adaptive" {
            return Ok(ModeSpec::Adaptive);
        }
        for (prefix, wrap) in [
            ("fixed:", ModeSpec::Fixed as fn(f64) -> ModeSpec),
            ("cdc:", ModeSpec::Cdc as fn(f64) -> ModeSpec),
        ] {
            if let Some(rest) = s.strip_prefix(prefix) {
                let theta: f64 = rest
                    .parse()
                    .map_err(|_| Error::config(format!("bad gate value in mode `{s}`")))?;
                return Ok(wrap(theta));
            }
        }
        Err(Error::config(format!(
            "unknown abpdc_mode `{s}` (expected standard | fixed:<t> | cdc:<t> | adaptive)"
        )))
    }

    fn render(&self) -> String {
        match self {
            ModeSpec::Standard => "standard".into(),
            ModeSpec::Adaptive => "adaptive".into(),
            ModeSpec::Fixed(t) => format!("fixed:{t}"),
            ModeSpec::Cdc(t) => format!("cdc:{t}"),
        }
    }

    pub fn abpdc_mode(&self) -> AbpdcMode {
        match self {
            ModeSpec::Standard => AbpdcMode::Standard,
            ModeSpec::Adaptive => AbpdcMode::Adaptive,
            ModeSpec::Fixed(t) | ModeSpec::Cdc(t) => AbpdcMode::Fixed(*t),
        }
    }

    pub fn full_cube(&self) -> bool {
        matches!(self, ModeSpec::Cdc(_))
    }
}

/// Intensity remap applied when deriving the second modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RemapSpec {
    None,
    /// `b = 1 - a` (monotone decreasing).
    Invert,
    /// `b = clamp(a)^g` (monotone increasing).
    Gamma(f64),
}

impl RemapSpec {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RemapSpec::None),
            "invert" => Ok(RemapSpec::Invert),
            _ => {
                if let Some(rest) = s.strip_prefix("gamma:") {
                    let g: f64 = rest
                        .parse()
                        .map_err(|_| Error::config(format!("bad gamma in remap `{s}`")))?;
                    if g <= 0.0 {
                        return Err(Error::config("gamma must be positive"));
                    }
                    Ok(RemapSpec::Gamma(g))
                } else {
                    Err(Error::config(format!(
                        "unknown remap `{s}` (expected none | invert | gamma:<g>)"
                    )))
                }
            }
        }
    }

    fn render(&self) -> String {
        match self {
            RemapSpec::None => "none".into(),
            RemapSpec::Invert => "invert".into(),
            RemapSpec::Gamma(g) => format!("gamma:{g}"),
        }
    }
}

/// Everything a run needs; serializable to a flat text config.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Input spatial extent `(z, y, x)`.
    pub shape: [usize; 3],
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub abpdc_mode: ModeSpec,
    pub fpran: bool,
    pub base_rotation: bool,
    pub literal_add: bool,
    pub lambda_class: f64,
    pub lambda_sim: f64,
    pub lambda_reg: f64,
    pub kernel: usize,
    pub channels: [usize; 4],
    /// Per-stage `(z, y, x)` strides, rendered as digit triples.
    pub strides: [[usize; 3]; 4],
    pub attn_dim: usize,
    pub attn_window: usize,
    pub refine_channels: usize,
    pub pool_window: usize,
    pub ncc_window: usize,
    pub ncc_eps: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub remap: RemapSpec,
    pub psi_max: f64,
    pub texture_amplitude: f64,
    pub lesion_amplitude: f64,
    pub label_balance: f64,
    pub register_steps: usize,
    /// Stop training once an epoch ends at full training accuracy.
    pub early_stop_train_acc: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            shape: [16, 64, 64],
            batch_size: 16,
            epochs: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            decay_factor: 0.9,
            decay_every: 10,
            abpdc_mode: ModeSpec::Adaptive,
            fpran: true,
            base_rotation: true,
            literal_add: false,
            lambda_class: 1.0,
            lambda_sim: 1.0,
            lambda_reg: 1.0,
            kernel: 3,
            channels: [8, 16, 32, 64],
            strides: [[2, 2, 2], [2, 2, 2], [1, 2, 2], [1, 2, 2]],
            attn_dim: 16,
            attn_window: 3,
            refine_channels: 16,
            pool_window: 3,
            ncc_window: 9,
            ncc_eps: 1e-5,
            n_train: 16,
            n_test: 8,
            noise: 0.01,
            remap: RemapSpec::Invert,
            psi_max: 2.0,
            texture_amplitude: 0.12,
            lesion_amplitude: 0.25,
            label_balance: 0.5,
            register_steps: 300,
            early_stop_train_acc: false,
        }
    }
}

fn parse_triple(s: &str, what: &str) -> Result<[usize; 3]> {
    let digits: Vec<usize> = s
        .chars()
        .map(|c| c.to_digit(10).map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::config(format!("bad {what} `{s}`")))?;
    if digits.len() != 3 {
        return Err(Error::config(format!("{what} `{s}` must have 3 digits")));
    }
    Ok([digits[0], digits[1], digits[2]])
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<Vec<T>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(Error::config(format!("{what} needs {n} entries, got `{s}`")));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::config(format!("bad {what} entry `{p}`")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! num {
            () => {
                value
                    .parse()
                    .map_err(|_| Error::config(format!("bad value `{value}` for {key}")))?
            };
        }
        match key {
            "seed" => self.seed = num!(),
            "shape_z" => self.shape[0] = num!(),
            "shape_y" => self.shape[1] = num!(),
            "shape_x" => self.shape[2] = num!(),
            "batch_size" => self.batch_size = num!(),
            "epochs" => self.epochs = num!(),
            "lr" => self.lr = num!(),
            "beta1" => self.beta1 = num!(),
            "beta2" => self.beta2 = num!(),
            "adam_eps" => self.adam_eps = num!(),
            "weight_decay" => self.weight_decay = num!(),
            "decay_factor" => self.decay_factor = num!(),
            "decay_every" => self.decay_every = num!(),
            "abpdc_mode" => self.abpdc_mode = ModeSpec::parse(value)?,
            "fpran" => self.fpran = num!(),
            "base_rotation" => self.base_rotation = num!(),
            "literal_add" => self.literal_add = num!(),
            "lambda_class" => self.lambda_class = num!(),
            "lambda_sim" => self.lambda_sim = num!(),
            "lambda_reg" => self.lambda_reg = num!(),
            "kernel" => self.kernel = num!(),
            "channels" => {
                let v: Vec<usize> = parse_list(value, 4, "channels")?;
                self.channels = [v[0], v[1], v[2], v[3]];
            }
            "strides" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::config(format!("strides needs 4 triples, got `{value}`")));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.strides[i] = parse_triple(p, "stride triple")?;
                }
            }
            "attn_dim" => self.attn_dim = num!(),
            "attn_window" => self.attn_window = num!(),
            "refine_channels" => self.refine_channels = num!(),
            "pool_window" => self.pool_window = num!(),
            "ncc_window" => self.ncc_window = num!(),
            "ncc_eps" => self.ncc_eps = num!(),
            "n_train" => self.n_train = num!(),
            "n_test" => self.n_test = num!(),
            "noise" => self.noise = num!(),
            "remap" => self.remap = RemapSpec::parse(value)?,
            "psi_max" => self.psi_max = num!(),
            "texture_amplitude" => self.texture_amplitude = num!(),
            "lesion_amplitude" => self.lesion_amplitude = num!(),
            "label_balance" => self.label_balance = num!(),
            "register_steps" => self.register_steps = num!(),
            "early_stop_train_acc" => self.early_stop_train_acc = num!(),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("shape_z", self.shape[0].to_string());
        kv("shape_y", self.shape[1].to_string());
        kv("shape_x", self.shape[2].to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("decay_factor", self.decay_factor.to_string());
        kv("decay_every", self.decay_every.to_string());
        kv("abpdc_mode", self.abpdc_mode.render());
        kv("fpran", self.fpran.to_string());
        kv("base_rotation", self.base_rotation.to_string());
        kv("literal_add", self.literal_add.to_string());
        kv("lambda_class", self.lambda_class.to_string());
        kv("lambda_sim", self.lambda_sim.to_string());
        kv("lambda_reg", self.lambda_reg.to_string());
        kv("kernel", self.kernel.to_string());
        kv(
            "channels",
            format!(
                "{},{},{},{}",
                self.channels[0], self.channels[1], self.channels[2], self.channels[3]
            ),
        );
        kv(
            "strides",
            self.strides
                .iter()
                .map(|t| format!("{}{}{}", t[0], t[1], t[2]))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("attn_dim", self.attn_dim.to_string());
        kv("attn_window", self.attn_window.to_string());
        kv("refine_channels", self.refine_channels.to_string());
        kv("pool_window", self.pool_window.to_string());
        kv("ncc_window", self.ncc_window.to_string());
        kv("ncc_eps", self.ncc_eps.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("noise", self.noise.to_string());
        kv("remap", self.remap.render());
        kv("psi_max", self.psi_max.to_string());
        kv("texture_amplitude", self.texture_amplitude.to_string());
        kv("lesion_amplitude", self.lesion_amplitude.to_string());
        kv("label_balance", self.label_balance.to_string());
        kv("register_steps", self.register_steps.to_string());
        kv("early_stop_train_acc", self.early_stop_train_acc.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel must be odd"));
        }
        if !(0.0..=1.0).contains(&self.label_balance) {
            return Err(Error::config("label_balance must lie in [0, 1]"));
        }
        if self.lambda_class < 0.0 || self.lambda_sim < 0.0 || self.lambda_reg < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: self.channels,
                stage_strides: self.strides,
                kernel: self.kernel,
                mode: self.abpdc_mode.abpdc_mode(),
                pool_window: self.pool_window,
                detach_gate: false,
            },
            fpran: if self.fpran {
                Some(FpranConfig {
                    attn_dim: self.attn_dim,
                    window: self.attn_window,
                    refine_channels: self.refine_channels,
                    base_rotation: self.base_rotation,
                    literal_add: self.literal_add,
                })
            } else {
                None
            },
            weights: LossWeights {
                class_w: self.lambda_class,
                sim_w: self.lambda_sim,
                reg_w: self.lambda_reg,
            },
            ncc_window: self.ncc_window,
            ncc_eps: self.ncc_eps,
            in_channels: 1,
            num_classes: 2,
            full_cube_footprint: self.abpdc_mode.full_cube(),
        }
    }
}

/// Ablation presets toggling the two mechanisms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preset {
    /// Standard convolution, no alignment stack.
    Baseline,
    /// Alignment stack only.
    F,
    /// Adaptive convolution only.
    A,
    /// Both mechanisms.
    Af,
    /// Tiny-dataset classification sanity run.
    Overfit4,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Preset::Baseline),
            "f" => Ok(Preset::F),
            "a" => Ok(Preset::A),
            "af" => Ok(Preset::Af),
            "overfit4" => Ok(Preset::Overfit4),
            _ => Err(Error::config(format!(
                "unknown preset `{s}` (expected baseline | f | a | af | overfit4)"
            ))),
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        match self {
            Preset::Baseline => {
                cfg.abpdc_mode = ModeSpec::Standard;
                cfg.fpran = false;
                cfg.lambda_sim = 0.0;
                cfg.lambda_reg = 0.0;
            }
            Preset::F => {
                cfg.abpdc_mode = ModeSpec::Standard;
                cfg.fpran = true;
            }
            Preset::A => {
                cfg.abpdc_mode = ModeSpec::Adaptive;
                cfg.fpran = false;
                cfg.lambda_sim = 0.0;
                cfg.lambda_reg = 0.0;
            }
            Preset::Af => {
                cfg.abpdc_mode = ModeSpec::Adaptive;
                cfg.fpran = true;
            }
            Preset::Overfit4 => {
                cfg.n_train = 4;
                cfg.n_test = 0;
                cfg.batch_size = 4;
                cfg.epochs = 200; // one step per epoch at batch 4
                cfg.lr = 1e-3;
                cfg.decay_every = 1000;
                cfg.early_stop_train_acc = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_default() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn round_trip_modified() {
        let mut cfg = ExperimentConfig::default();
        cfg.abpdc_mode = ModeSpec::Cdc(0.7);
        cfg.remap = RemapSpec::Gamma(0.65);
        cfg.shape = [8, 32, 32];
        cfg.strides = [[2, 2, 2], [1, 1, 1], [2, 2, 2], [1, 1, 1]];
        cfg.lr = 5e-3;
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# comment\n\nseed = 7\nlr = 0.01\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ExperimentConfig::from_text("bogus = 1\n").is_err());
    }

    #[test]
    fn bad_mode_rejected() {
        assert!(ExperimentConfig::from_text("abpdc_mode = sideways\n").is_err());
    }

    #[test]
    fn presets_toggle_mechanisms() {
        let mut c = ExperimentConfig::default();
        Preset::Baseline.apply(&mut c);
        assert_eq!(c.abpdc_mode, ModeSpec::Standard);
        assert!(!c.fpran);
        let mut c2 = ExperimentConfig::default();
        Preset::Af.apply(&mut c2);
        assert_eq!(c2.abpdc_mode, ModeSpec::Adaptive);
        assert!(c2.fpran);
    }
}
