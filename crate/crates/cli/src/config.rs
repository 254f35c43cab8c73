//! Run configuration: defaults, then a flat `key = value` file, then
//! command-line flags, each layer overriding the previous one.

use std::fmt::Write as _;
use std::str::FromStr;

use cyclecorr::features::AugmentConfig;
use cyclecorr::matching::{HoughConfig, MatchConfig, OtConfig, SinkhornConfig};
use cyclecorr::objectives::{
    AttentionSource, CycleConfig, LossWeights, PixelLossScale, SgdConfig, TrainConfig,
};
use cyclecorr::search::{BeamConfig, PckBasis};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Hyperpixel layers; empty selects every layer.
    pub layers: Vec<usize>,
    /// Affinity temperature t.
    pub temperature: f64,
    /// InfoNCE temperature τ.
    pub tau: f64,
    /// Sinkhorn entropic regularization.
    pub eps: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub hough_bins: usize,
    pub lambda_p: f64,
    pub lambda_q: f64,
    pub lambda_r: f64,
    /// Key-encoder momentum m.
    pub momentum: f64,
    pub ot: bool,
    pub rhm: bool,
    pub entropy: bool,
    /// Attention-guided crops during training and layer search.
    pub attention: bool,
    /// Least mean rescaled attention an augmentation crop must reach.
    pub min_attention: f64,
    pub pixel_loss: Option<PixelLossScale>,
    pub seed: u64,
    /// Worker threads; `None` defers to `THREADS`, then to the core count.
    pub threads: Option<usize>,
    pub alphas: Vec<f64>,
    pub basis: PckBasis,
    pub queue: usize,
    pub lr: f64,
    pub steps: usize,
    pub beam_width: usize,
    pub max_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = SinkhornConfig::default();
        let beam = BeamConfig::default();
        Self {
            layers: Vec::new(),
            temperature: w.temperature,
            tau: w.tau,
            eps: s.eps,
            sinkhorn_iters: s.max_iters,
            sinkhorn_tol: s.tol,
            hough_bins: HoughConfig::default().bins.0,
            lambda_p: w.pixel,
            lambda_q: w.image,
            lambda_r: w.entropy,
            momentum: w.momentum,
            ot: true,
            rhm: true,
            entropy: true,
            attention: true,
            min_attention: AugmentConfig::default().min_attention,
            pixel_loss: Some(PixelLossScale::Total),
            seed: 0,
            threads: None,
            alphas: vec![0.05, 0.10, 0.15],
            basis: PckBasis::Img,
            queue: 1024,
            lr: SgdConfig::default().lr,
            steps: 200,
            beam_width: beam.beam_width,
            max_layers: beam.max_layers,
        }
    }
}

/// Every recognized key, in the order [`RunConfig::render`] writes them.
pub const KEYS: [&str; 26] = [
    "layers",
    "t",
    "tau",
    "eps",
    "sinkhorn_iters",
    "sinkhorn_tol",
    "hough_bins",
    "lambda_p",
    "lambda_q",
    "lambda_r",
    "m",
    "ot",
    "rhm",
    "entropy",
    "attention",
    "min_attention",
    "pixel_loss",
    "seed",
    "threads",
    "alpha",
    "basis",
    "queue",
    "lr",
    "steps",
    "beam_width",
    "max_layers",
];

fn number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| number(key, s))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}`: expected on/off, got {value:?}"))),
    }
}

pub fn parse_pixel_loss(value: &str) -> Result<Option<PixelLossScale>> {
    match value {
        "off" => Ok(None),
        "total" => Ok(Some(PixelLossScale::Total)),
        "per-cell" | "per_cell" => Ok(Some(PixelLossScale::PerCell)),
        _ => Err(CliError::Config(format!(
            "`pixel_loss`: expected off, total or per-cell, got {value:?}"
        ))),
    }
}

pub fn parse_basis(value: &str) -> Result<PckBasis> {
    match value {
        "img" => Ok(PckBasis::Img),
        "bbox" => Ok(PckBasis::Bbox),
        _ => Err(CliError::Config(format!("`basis`: expected img or bbox, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "layers" => self.layers = list(key, v)?,
            "t" => self.temperature = number(key, v)?,
            "tau" => self.tau = number(key, v)?,
            "eps" => self.eps = number(key, v)?,
            "sinkhorn_iters" => self.sinkhorn_iters = number(key, v)?,
            "sinkhorn_tol" => self.sinkhorn_tol = number(key, v)?,
            "hough_bins" => self.hough_bins = number(key, v)?,
            "lambda_p" => self.lambda_p = number(key, v)?,
            "lambda_q" => self.lambda_q = number(key, v)?,
            "lambda_r" => self.lambda_r = number(key, v)?,
            "m" => self.momentum = number(key, v)?,
            "ot" => self.ot = flag(key, v)?,
            "rhm" => self.rhm = flag(key, v)?,
            "entropy" => self.entropy = flag(key, v)?,
            "attention" => self.attention = flag(key, v)?,
            "min_attention" => self.min_attention = number(key, v)?,
            "pixel_loss" => self.pixel_loss = parse_pixel_loss(v)?,
            "seed" => self.seed = number(key, v)?,
            "threads" => self.threads = Some(number(key, v)?),
            "alpha" => self.alphas = list(key, v)?,
            "basis" => self.basis = parse_basis(v)?,
            "queue" => self.queue = number(key, v)?,
            "lr" => self.lr = number(key, v)?,
            "steps" => self.steps = number(key, v)?,
            "beam_width" => self.beam_width = number(key, v)?,
            "max_layers" => self.max_layers = number(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let positive = [
            ("t", self.temperature),
            ("tau", self.tau),
            ("eps", self.eps),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{key}` must be positive, got {v}"));
            }
        }
        for (key, v) in [("lambda_p", self.lambda_p), ("lambda_q", self.lambda_q), ("lambda_r", self.lambda_r), ("lr", self.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{key}` must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_attention) {
            return bad(format!("`min_attention` must lie in [0, 1], got {}", self.min_attention));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("`m` must lie in [0, 1), got {}", self.momentum));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(format!("`alpha` needs positive values, got {:?}", self.alphas));
        }
        for (key, v) in [
            ("threads", self.threads.unwrap_or(1)),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("hough_bins", self.hough_bins),
            ("queue", self.queue),
            ("beam_width", self.beam_width),
            ("max_layers", self.max_layers),
        ] {
            if v == 0 {
                return bad(format!("`{key}` must be at least 1"));
            }
        }
        Ok(())
    }

    /// The configuration as a `key = value` file that [`Self::apply_text`] reads back.
    pub fn render(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let on = |b: bool| if b { "on" } else { "off" };
        let mut out = String::new();
        for key in KEYS {
            let value = match key {
                "layers" => join(self.layers.iter().map(|l| l.to_string()).collect()),
                "t" => self.temperature.to_string(),
                "tau" => self.tau.to_string(),
                "eps" => self.eps.to_string(),
                "sinkhorn_iters" => self.sinkhorn_iters.to_string(),
                "sinkhorn_tol" => self.sinkhorn_tol.to_string(),
                "hough_bins" => self.hough_bins.to_string(),
                "lambda_p" => self.lambda_p.to_string(),
                "lambda_q" => self.lambda_q.to_string(),
                "lambda_r" => self.lambda_r.to_string(),
                "m" => self.momentum.to_string(),
                "ot" => on(self.ot).into(),
                "rhm" => on(self.rhm).into(),
                "entropy" => on(self.entropy).into(),
                "attention" => on(self.attention).into(),
                "min_attention" => self.min_attention.to_string(),
                "pixel_loss" => match self.pixel_loss {
                    None => "off".into(),
                    Some(PixelLossScale::Total) => "total".into(),
                    Some(PixelLossScale::PerCell) => "per-cell".into(),
                },
                "seed" => self.seed.to_string(),
                "threads" => match self.threads {
                    Some(n) => n.to_string(),
                    None => continue,
                },
                "alpha" => join(self.alphas.iter().map(|a| a.to_string()).collect()),
                "basis" => match self.basis {
                    PckBasis::Img => "img".into(),
                    PckBasis::Bbox => "bbox".into(),
                },
                "queue" => self.queue.to_string(),
                "lr" => self.lr.to_string(),
                "steps" => self.steps.to_string(),
                "beam_width" => self.beam_width.to_string(),
                "max_layers" => self.max_layers.to_string(),
                _ => unreachable!("every key is rendered"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            pixel: if self.pixel_loss.is_some() { self.lambda_p } else { 0.0 },
            image: self.lambda_q,
            entropy: if self.entropy { self.lambda_r } else { 0.0 },
            tau: self.tau,
            temperature: self.temperature,
            momentum: self.momentum,
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            layers: self.layers.clone(),
            temperature: self.temperature,
            ot: self.ot.then(|| OtConfig {
                sinkhorn: SinkhornConfig {
                    eps: self.eps,
                    max_iters: self.sinkhorn_iters,
                    tol: self.sinkhorn_tol,
                },
                ..OtConfig::default()
            }),
            rhm: self.rhm.then(|| HoughConfig {
                bins: (self.hough_bins, self.hough_bins),
                ..HoughConfig::default()
            }),
        }
    }

    fn attention_source(&self, on: AttentionSource) -> AttentionSource {
        if self.attention {
            on
        } else {
            AttentionSource::Off
        }
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            min_attention: self.min_attention,
            ..AugmentConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment(),
            weights: self.weights(),
            pixel_loss: self.pixel_loss,
            layers: self.layers.clone(),
            attention: self.attention_source(AttentionSource::Head),
            optimizer: SgdConfig {
                lr: self.lr,
                total_steps: self.steps,
                ..SgdConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    /// Cycle-loss indicator used to score layer subsets.
    pub fn cycle_config(&self) -> CycleConfig {
        CycleConfig {
            temperature: self.temperature,
            attention: self.attention_source(AttentionSource::Raw),
            augment: self.augment(),
            ..CycleConfig::default()
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.beam_width,
            max_layers: self.max_layers,
        }
    }
}
