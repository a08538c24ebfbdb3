//! Run configuration: every tunable of the pipeline, loaded from a
//! `key = value` file and overridden by `--set key=value` flags.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use osseon::evalmetrics::EvalConfig;
use osseon::neuralnet::TrainConfig;
use osseon::shadow::ShadowConfig;
use osseon::specfilter::{FilterConfig, LpeMode, LwpaMode};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub shadow: ShadowConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("config key `{key}`: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("config key `{key}`: expected true or false, got `{value}`"),
    }
}

fn lpe_name(m: LpeMode) -> &'static str {
    match m {
        LpeMode::Corrected => "corrected",
        LpeMode::Literal => "literal",
    }
}

fn lwpa_name(m: LwpaMode) -> &'static str {
    match m {
        LwpaMode::Corrected => "corrected",
        LwpaMode::Literal => "literal",
    }
}

/// Splits file text into `(key, value)` pairs, skipping blanks and `#`
/// comments. Line numbers appear in errors.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`, got `{raw}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Defaults, then the file, then the `--set` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_pairs(&text, &path.display().to_string())? {
                cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got `{item}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (f, s, t, e) = (&mut self.filter, &mut self.shadow, &mut self.train, &mut self.eval);
        match key {
            "filter.num_scales" => f.num_scales = parse(key, value)?,
            "filter.min_wavelength" => f.min_wavelength = parse(key, value)?,
            "filter.scale_multiplier" => f.scale_multiplier = parse(key, value)?,
            "filter.sigma_on_f" => f.sigma_on_f = parse(key, value)?,
            "filter.ramp_power" => f.ramp_power = parse(key, value)?,
            "filter.symmetric_extension" => f.symmetric_extension = parse_bool(key, value)?,
            "filter.lpe_mode" => {
                f.lpe_mode = match value {
                    "corrected" => LpeMode::Corrected,
                    "literal" => LpeMode::Literal,
                    _ => bail!("config key `{key}`: expected corrected or literal, got `{value}`"),
                }
            }
            "filter.lwpa_mode" => {
                f.lwpa_mode = match value {
                    "corrected" => LwpaMode::Corrected,
                    "literal" => LwpaMode::Literal,
                    _ => bail!("config key `{key}`: expected corrected or literal, got `{value}`"),
                }
            }
            "shadow.alpha" => s.alpha = parse(key, value)?,
            "shadow.beta" => s.beta = parse(key, value)?,
            "shadow.gamma" => s.gamma = parse(key, value)?,
            "shadow.lambda_blend" => s.lambda_blend = parse(key, value)?,
            "shadow.delta" => s.delta = parse(key, value)?,
            "shadow.rho" => s.rho = parse(key, value)?,
            "shadow.epsilon" => s.epsilon = parse(key, value)?,
            "shadow.usa_window" => s.usa_window = parse(key, value)?,
            "shadow.cg_tol" => s.cg_tol = parse(key, value)?,
            "shadow.cg_max_iter" => {
                s.cg_max_iter = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "shadow.weight_floor" => s.weight_floor = parse(key, value)?,
            "train.total_iters" => t.total_iters = parse(key, value)?,
            "train.phase1_iters" => t.phase1_iters = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.lambda_cls" => t.lambda_cls = parse(key, value)?,
            "train.lambda_pe" => t.lambda_pe = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.base_features" => t.arch.base_features = parse(key, value)?,
            "train.depth" => t.arch.depth = parse(key, value)?,
            "train.head_channel_fraction" => t.arch.head_fraction = parse(key, value)?,
            "eval.prob_threshold" => e.prob_threshold = parse(key, value)?,
            "eval.tp_tolerance_mm" => e.tp_tolerance_mm = parse(key, value)?,
            "eval.gt_dilation_mm" => e.gt_dilation_mm = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.shadow.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Enhancement settings in canonical text form.
    pub fn enhancement_text(&self) -> String {
        let f = &self.filter;
        let s = &self.shadow;
        let mut out = String::new();
        let _ = writeln!(out, "filter.num_scales = {}", f.num_scales);
        let _ = writeln!(out, "filter.min_wavelength = {}", f.min_wavelength);
        let _ = writeln!(out, "filter.scale_multiplier = {}", f.scale_multiplier);
        let _ = writeln!(out, "filter.sigma_on_f = {}", f.sigma_on_f);
        let _ = writeln!(out, "filter.ramp_power = {}", f.ramp_power);
        let _ = writeln!(out, "filter.symmetric_extension = {}", f.symmetric_extension);
        let _ = writeln!(out, "filter.lpe_mode = {}", lpe_name(f.lpe_mode));
        let _ = writeln!(out, "filter.lwpa_mode = {}", lwpa_name(f.lwpa_mode));
        let _ = writeln!(out, "shadow.alpha = {}", s.alpha);
        let _ = writeln!(out, "shadow.beta = {}", s.beta);
        let _ = writeln!(out, "shadow.gamma = {}", s.gamma);
        let _ = writeln!(out, "shadow.lambda_blend = {}", s.lambda_blend);
        let _ = writeln!(out, "shadow.delta = {}", s.delta);
        let _ = writeln!(out, "shadow.rho = {}", s.rho);
        let _ = writeln!(out, "shadow.epsilon = {}", s.epsilon);
        let _ = writeln!(out, "shadow.usa_window = {}", s.usa_window);
        let _ = writeln!(out, "shadow.cg_tol = {}", s.cg_tol);
        let max_iter = s.cg_max_iter.map_or("none".to_string(), |v| v.to_string());
        let _ = writeln!(out, "shadow.cg_max_iter = {max_iter}");
        let _ = writeln!(out, "shadow.weight_floor = {}", s.weight_floor);
        out
    }

    /// The full configuration in the file format; parsing it back yields an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let e = &self.eval;
        let mut out = self.enhancement_text();
        let _ = writeln!(out, "train.total_iters = {}", t.total_iters);
        let _ = writeln!(out, "train.phase1_iters = {}", t.phase1_iters);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.lr = {}", t.lr);
        let _ = writeln!(out, "train.adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(out, "train.adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(out, "train.adam_eps = {}", t.adam_eps);
        let _ = writeln!(out, "train.lambda_cls = {}", t.lambda_cls);
        let _ = writeln!(out, "train.lambda_pe = {}", t.lambda_pe);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.base_features = {}", t.arch.base_features);
        let _ = writeln!(out, "train.depth = {}", t.arch.depth);
        let _ = writeln!(out, "train.head_channel_fraction = {}", t.arch.head_fraction);
        let _ = writeln!(out, "eval.prob_threshold = {}", e.prob_threshold);
        let _ = writeln!(out, "eval.tp_tolerance_mm = {}", e.tp_tolerance_mm);
        let _ = writeln!(out, "eval.gt_dilation_mm = {}", e.gt_dilation_mm);
        out
    }
}

pub fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
