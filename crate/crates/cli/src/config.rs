//! Flat key=value run configuration with command-line overrides.
//!
//! Precedence: built-in defaults < config file < `--key value` flags. Every
//! emitted artifact carries the FNV-1a hash of the canonical key=value set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use handprint_core::loss::HyperParams;
use handprint_core::net::RecognizerMode;

use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    // bookkeeping
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,

    // the adversarial game
    pub hp: HyperParams,

    // network widths
    pub gen_channels: Vec<usize>,
    pub gen_noise_channels: usize,
    pub word_disc_channels: Vec<usize>,
    pub char_disc_channels: Vec<usize>,
    pub char_cell: usize,
    pub rec_channels: Vec<usize>,
    pub rec_hidden: usize,
    pub rec_mode: RecognizerMode,

    // data generation
    pub vocab_file: Option<PathBuf>,
    pub n_samples: usize,
    pub distortion: f64,
    pub split_ratio: f64,
    pub font_scale: usize,

    // training schedules
    pub gan_steps: usize,
    pub hwr_steps: usize,
    pub hwr_lr: f64,
    pub hwr_batch: usize,
    pub checkpoint_every: usize,

    // decoding / evaluation
    pub beam_width: usize,
    pub lexicon_decode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            hp: HyperParams::default(),
            gen_channels: vec![32, 64, 128, 256, 256],
            gen_noise_channels: 8,
            word_disc_channels: vec![32, 64, 128, 256],
            char_disc_channels: vec![32, 64, 128],
            char_cell: 32,
            rec_channels: vec![16, 32, 48, 64, 64],
            rec_hidden: 64,
            rec_mode: RecognizerMode::HandwrittenOnly,
            vocab_file: None,
            n_samples: 200,
            distortion: 1.0,
            split_ratio: 0.95,
            font_scale: 2,
            gan_steps: 2000,
            hwr_steps: 500,
            hwr_lr: 1e-3,
            hwr_batch: 16,
            checkpoint_every: 0,
            beam_width: 64,
            lexicon_decode: false,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key {key}: expected integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key {key}: expected integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| CliError::Config(format!("key {key}: expected number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!(
            "key {key}: expected bool, got {v:?}"
        ))),
    }
}

fn parse_channels(key: &str, v: &str) -> Result<Vec<usize>> {
    let out: std::result::Result<Vec<usize>, _> =
        v.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let out = out.map_err(|_| {
        CliError::Config(format!(
            "key {key}: expected comma-separated integers, got {v:?}"
        ))
    })?;
    if out.is_empty() {
        return Err(CliError::Config(format!(
            "key {key}: needs at least one entry"
        )));
    }
    Ok(out)
}

impl RunConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),

            "lambda_char" => self.hp.lambda_char = parse_f64(key, value)?,
            "lambda_recons" => self.hp.lambda_recons = parse_f64(key, value)?,
            "lambda1_c" => self.hp.lambda1_c = parse_f64(key, value)?,
            "lambda1_w" => self.hp.lambda1_w = parse_f64(key, value)?,
            "lambda2_c" => self.hp.lambda2_c = parse_f64(key, value)?,
            "lambda2_w" => self.hp.lambda2_w = parse_f64(key, value)?,
            "n_critic" => self.hp.n_critic = parse_usize(key, value)?,
            "lr" => self.hp.lr = parse_f64(key, value)?,
            "adam_beta1" => self.hp.adam_beta1 = parse_f64(key, value)?,
            "adam_beta2" => self.hp.adam_beta2 = parse_f64(key, value)?,
            "m_c" => self.hp.m_c = parse_usize(key, value)?,
            "m_w" => self.hp.m_w = parse_usize(key, value)?,
            "r_c" => self.hp.r_c = parse_usize(key, value)?,
            "r_w" => self.hp.r_w = parse_usize(key, value)?,
            "batch_size" => self.hp.batch_size = parse_usize(key, value)?,
            "leaky_slope" => self.hp.leaky_slope = parse_f64(key, value)?,

            "gen_channels" => self.gen_channels = parse_channels(key, value)?,
            "gen_noise_channels" => self.gen_noise_channels = parse_usize(key, value)?,
            "word_disc_channels" => self.word_disc_channels = parse_channels(key, value)?,
            "char_disc_channels" => self.char_disc_channels = parse_channels(key, value)?,
            "char_cell" => self.char_cell = parse_usize(key, value)?,
            "rec_channels" => self.rec_channels = parse_channels(key, value)?,
            "rec_hidden" => self.rec_hidden = parse_usize(key, value)?,
            "rec_mode" => {
                self.rec_mode = match value {
                    "handwritten" => RecognizerMode::HandwrittenOnly,
                    "generated" => RecognizerMode::GeneratedOnly,
                    "joint" => RecognizerMode::Joint,
                    _ => {
                        return Err(CliError::Config(format!(
                            "key rec_mode: expected handwritten|generated|joint, got {value:?}"
                        )))
                    }
                }
            }

            "vocab" => {
                self.vocab_file = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "n_samples" => self.n_samples = parse_usize(key, value)?,
            "distortion" => self.distortion = parse_f64(key, value)?,
            "split_ratio" => self.split_ratio = parse_f64(key, value)?,
            "font_scale" => self.font_scale = parse_usize(key, value)?,

            "gan_steps" => self.gan_steps = parse_usize(key, value)?,
            "hwr_steps" => self.hwr_steps = parse_usize(key, value)?,
            "hwr_lr" => self.hwr_lr = parse_f64(key, value)?,
            "hwr_batch" => self.hwr_batch = parse_usize(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_usize(key, value)?,

            "beam_width" => self.beam_width = parse_usize(key, value)?,
            "lexicon_decode" => self.lexicon_decode = parse_bool(key, value)?,

            _ => return Err(CliError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hp
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(CliError::Config(format!(
                "split_ratio must be in (0,1), got {}",
                self.split_ratio
            )));
        }
        if self.distortion < 0.0 {
            return Err(CliError::Config("distortion must be >= 0".into()));
        }
        if self.n_samples == 0 {
            return Err(CliError::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical sorted key=value view; the hash input and run.json content.
    pub fn canonical_pairs(&self) -> BTreeMap<String, String> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut m = BTreeMap::new();
        m.insert("seed".into(), self.seed.to_string());
        m.insert("out_dir".into(), self.out_dir.display().to_string());
        m.insert("data_dir".into(), self.data_dir.display().to_string());
        m.insert("lambda_char".into(), self.hp.lambda_char.to_string());
        m.insert("lambda_recons".into(), self.hp.lambda_recons.to_string());
        m.insert("lambda1_c".into(), self.hp.lambda1_c.to_string());
        m.insert("lambda1_w".into(), self.hp.lambda1_w.to_string());
        m.insert("lambda2_c".into(), self.hp.lambda2_c.to_string());
        m.insert("lambda2_w".into(), self.hp.lambda2_w.to_string());
        m.insert("n_critic".into(), self.hp.n_critic.to_string());
        m.insert("lr".into(), self.hp.lr.to_string());
        m.insert("adam_beta1".into(), self.hp.adam_beta1.to_string());
        m.insert("adam_beta2".into(), self.hp.adam_beta2.to_string());
        m.insert("m_c".into(), self.hp.m_c.to_string());
        m.insert("m_w".into(), self.hp.m_w.to_string());
        m.insert("r_c".into(), self.hp.r_c.to_string());
        m.insert("r_w".into(), self.hp.r_w.to_string());
        m.insert("batch_size".into(), self.hp.batch_size.to_string());
        m.insert("leaky_slope".into(), self.hp.leaky_slope.to_string());
        m.insert("gen_channels".into(), join(&self.gen_channels));
        m.insert(
            "gen_noise_channels".into(),
            self.gen_noise_channels.to_string(),
        );
        m.insert("word_disc_channels".into(), join(&self.word_disc_channels));
        m.insert("char_disc_channels".into(), join(&self.char_disc_channels));
        m.insert("char_cell".into(), self.char_cell.to_string());
        m.insert("rec_channels".into(), join(&self.rec_channels));
        m.insert("rec_hidden".into(), self.rec_hidden.to_string());
        m.insert(
            "rec_mode".into(),
            match self.rec_mode {
                RecognizerMode::HandwrittenOnly => "handwritten".into(),
                RecognizerMode::GeneratedOnly => "generated".into(),
                RecognizerMode::Joint => "joint".into(),
            },
        );
        m.insert(
            "vocab".into(),
            self.vocab_file
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        m.insert("n_samples".into(), self.n_samples.to_string());
        m.insert("distortion".into(), self.distortion.to_string());
        m.insert("split_ratio".into(), self.split_ratio.to_string());
        m.insert("font_scale".into(), self.font_scale.to_string());
        m.insert("gan_steps".into(), self.gan_steps.to_string());
        m.insert("hwr_steps".into(), self.hwr_steps.to_string());
        m.insert("hwr_lr".into(), self.hwr_lr.to_string());
        m.insert("hwr_batch".into(), self.hwr_batch.to_string());
        m.insert("checkpoint_every".into(), self.checkpoint_every.to_string());
        m.insert("beam_width".into(), self.beam_width.to_string());
        m.insert("lexicon_decode".into(), self.lexicon_decode.to_string());
        m
    }

    /// FNV-1a 64 over the canonical key=value lines, in hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.canonical_pairs() {
            for byte in k
                .bytes()
                .chain([b'='].into_iter())
                .chain(v.bytes())
                .chain([b'\n'])
            {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

/// Loads defaults, then the optional config file, then flag overrides of the
/// form `--key value` or `--key=value`.
pub fn parse_config(file: Option<&Path>, flags: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
    }

    let mut i = 0;
    while i < flags.len() {
        let flag = &flags[i];
        let Some(stripped) = flag.strip_prefix("--") else {
            return Err(CliError::Config(format!("expected --key, got {flag:?}")));
        };
        let (key, value) = if let Some((k, v)) = stripped.split_once('=') {
            (k.to_string(), v.to_string())
        } else {
            let v = flags
                .get(i + 1)
                .ok_or_else(|| CliError::Config(format!("flag --{stripped} needs a value")))?;
            i += 1;
            (stripped.to_string(), v.clone())
        };
        cfg.apply(&key, &value)?;
        i += 1;
    }

    cfg.validate()?;
    Ok(cfg)
}
