//! `key=value` run configuration with dotted section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. `seed` is required;
//! every other key has a default, and unknown keys are rejected. The
//! serialized form written into run directories lists every key.

use std::path::{Path, PathBuf};

use crate::contrast::ContrastConfig;
use crate::corpus::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrainer::PretrainConfig;
use crate::retrieval::{GalleryMode, RetrievalConfig};
use crate::tokenizer::{GridDims, CUBE_S, CUBE_T};

pub const CONFIG_COPY: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    pub clip_len: usize,
    pub corpus: GeneratorConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub contrast: ContrastConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    /// Defaults for everything, with `seed` as the master seed of every stage.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self {
            seed,
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("runs"),
            clip_len: 16,
            corpus: GeneratorConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            contrast: ContrastConfig::default(),
            retrieval: RetrievalConfig::default(),
        };
        c.corpus.seed = seed;
        c.sync();
        c
    }

    /// Propagates the shared seed, clip length and frame size.
    fn sync(&mut self) {
        self.pretrain.seed = self.seed;
        self.contrast.seed = self.seed;
        self.pretrain.clip_len = self.clip_len;
        self.contrast.clip_len = self.clip_len;
        self.retrieval.clip_len = self.clip_len;
        self.model.grid = GridDims::new(
            self.clip_len / CUBE_T,
            self.corpus.height / CUBE_S,
            self.corpus.width / CUBE_S,
        );
        self.contrast.augment.output_size = (self.corpus.height, self.corpus.width);
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::with_seed(0);
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
            seen.push(k.to_string());
        }
        if !seen.iter().any(|s| s == "seed") {
            return Err(Error::Config("missing required key seed".into()));
        }
        if !seen.iter().any(|s| s == "corpus.seed") {
            c.corpus.seed = c.seed;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative paths are anchored at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.corpus_dir, &mut c.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.contrast.validate()?;
        self.retrieval.validate()?;
        if self.clip_len == 0 || self.clip_len % CUBE_T != 0 {
            return Err(Error::Config(format!("clip_len must be a positive multiple of {CUBE_T}")));
        }
        if self.corpus.query_len != self.clip_len {
            return Err(Error::Config(format!(
                "corpus.query_len {} must equal clip_len {}",
                self.corpus.query_len, self.clip_len
            )));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        let a = &mut self.contrast.augment;
        match key {
            "seed" => self.seed = p(key, v)?,
            "clip_len" => self.clip_len = p(key, v)?,
            "paths.corpus" => self.corpus_dir = PathBuf::from(v),
            "paths.output" => self.output_dir = PathBuf::from(v),

            "corpus.seed" => self.corpus.seed = p(key, v)?,
            "corpus.n_pairs" => self.corpus.n_pairs = p(key, v)?,
            "corpus.frames_per_video" => self.corpus.frames_per_video = p(key, v)?,
            "corpus.height" => self.corpus.height = p(key, v)?,
            "corpus.width" => self.corpus.width = p(key, v)?,
            "corpus.n_polyps_per_video" => self.corpus.n_polyps_per_video = p(key, v)?,
            "corpus.landmark_noise" => self.corpus.landmark_noise = p(key, v)?,
            "corpus.query_len" => self.corpus.query_len = p(key, v)?,

            "model.d_enc" => self.model.d_enc = p(key, v)?,
            "model.heads" => self.model.heads = p(key, v)?,
            "model.depth_enc" => self.model.depth_enc = p(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = p(key, v)?,
            "model.d_dec" => self.model.d_dec = p(key, v)?,
            "model.dec_heads" => self.model.dec_heads = p(key, v)?,
            "model.depth_dec" => self.model.depth_dec = p(key, v)?,
            "model.d_emb" => self.model.d_emb = p(key, v)?,
            "model.ln_eps" => self.model.ln_eps = p(key, v)?,

            "pretrain.mask_ratio" => self.pretrain.mask_ratio = p(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = p(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = p(key, v)?,
            "pretrain.lr" => self.pretrain.lr = p(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = p(key, v)?,
            "pretrain.patience" => self.pretrain.patience = p(key, v)?,
            "pretrain.min_delta" => self.pretrain.min_delta = p(key, v)?,
            "pretrain.stride" => self.pretrain.stride = p(key, v)?,
            "pretrain.target_eps" => self.pretrain.target_eps = p(key, v)?,

            "contrast.temperature" => self.contrast.temperature = p(key, v)?,
            "contrast.momentum" => self.contrast.momentum = p(key, v)?,
            "contrast.queue_size" => self.contrast.queue_size = p(key, v)?,
            "contrast.epochs" => self.contrast.epochs = p(key, v)?,
            "contrast.batch_size" => self.contrast.batch_size = p(key, v)?,
            "contrast.lr" => self.contrast.lr = p(key, v)?,
            "contrast.weight_decay" => self.contrast.weight_decay = p(key, v)?,
            "contrast.patience" => self.contrast.patience = p(key, v)?,
            "contrast.min_delta" => self.contrast.min_delta = p(key, v)?,
            "contrast.stride" => self.contrast.stride = p(key, v)?,

            "augment.crop_scale_min" => a.crop_scale.0 = p(key, v)?,
            "augment.crop_scale_max" => a.crop_scale.1 = p(key, v)?,
            "augment.crop_aspect_min" => a.crop_aspect.0 = p(key, v)?,
            "augment.crop_aspect_max" => a.crop_aspect.1 = p(key, v)?,
            "augment.flip_prob" => a.flip_prob = p(key, v)?,
            "augment.blur_sigma_min" => a.blur_sigma.0 = p(key, v)?,
            "augment.blur_sigma_max" => a.blur_sigma.1 = p(key, v)?,
            "augment.brightness" => a.brightness = symmetric(p(key, v)?),
            "augment.contrast" => a.contrast = symmetric(p(key, v)?),
            "augment.saturation" => a.saturation = symmetric(p(key, v)?),

            "retrieval.stride" => self.retrieval.stride = p(key, v)?,
            "retrieval.mode" => self.retrieval.mode = v.parse::<GalleryMode>()?,
            "retrieval.iou_threshold" => self.retrieval.iou_threshold = p(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.contrast.augment;
        let path = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("paths.corpus", path(&self.corpus_dir)),
            ("paths.output", path(&self.output_dir)),
            ("corpus.seed", self.corpus.seed.to_string()),
            ("corpus.n_pairs", self.corpus.n_pairs.to_string()),
            ("corpus.frames_per_video", self.corpus.frames_per_video.to_string()),
            ("corpus.height", self.corpus.height.to_string()),
            ("corpus.width", self.corpus.width.to_string()),
            ("corpus.n_polyps_per_video", self.corpus.n_polyps_per_video.to_string()),
            ("corpus.landmark_noise", self.corpus.landmark_noise.to_string()),
            ("corpus.query_len", self.corpus.query_len.to_string()),
            ("model.d_enc", self.model.d_enc.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.depth_enc", self.model.depth_enc.to_string()),
            ("model.mlp_ratio", self.model.mlp_ratio.to_string()),
            ("model.d_dec", self.model.d_dec.to_string()),
            ("model.dec_heads", self.model.dec_heads.to_string()),
            ("model.depth_dec", self.model.depth_dec.to_string()),
            ("model.d_emb", self.model.d_emb.to_string()),
            ("model.ln_eps", self.model.ln_eps.to_string()),
            ("pretrain.mask_ratio", self.pretrain.mask_ratio.to_string()),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("pretrain.weight_decay", self.pretrain.weight_decay.to_string()),
            ("pretrain.patience", self.pretrain.patience.to_string()),
            ("pretrain.min_delta", self.pretrain.min_delta.to_string()),
            ("pretrain.stride", self.pretrain.stride.to_string()),
            ("pretrain.target_eps", self.pretrain.target_eps.to_string()),
            ("contrast.temperature", self.contrast.temperature.to_string()),
            ("contrast.momentum", self.contrast.momentum.to_string()),
            ("contrast.queue_size", self.contrast.queue_size.to_string()),
            ("contrast.epochs", self.contrast.epochs.to_string()),
            ("contrast.batch_size", self.contrast.batch_size.to_string()),
            ("contrast.lr", self.contrast.lr.to_string()),
            ("contrast.weight_decay", self.contrast.weight_decay.to_string()),
            ("contrast.patience", self.contrast.patience.to_string()),
            ("contrast.min_delta", self.contrast.min_delta.to_string()),
            ("contrast.stride", self.contrast.stride.to_string()),
            ("augment.crop_scale_min", a.crop_scale.0.to_string()),
            ("augment.crop_scale_max", a.crop_scale.1.to_string()),
            ("augment.crop_aspect_min", a.crop_aspect.0.to_string()),
            ("augment.crop_aspect_max", a.crop_aspect.1.to_string()),
            ("augment.flip_prob", a.flip_prob.to_string()),
            ("augment.blur_sigma_min", a.blur_sigma.0.to_string()),
            ("augment.blur_sigma_max", a.blur_sigma.1.to_string()),
            ("augment.brightness", a.brightness.1.to_string()),
            ("augment.contrast", a.contrast.1.to_string()),
            ("augment.saturation", a.saturation.1.to_string()),
            ("retrieval.stride", self.retrieval.stride.to_string()),
            ("retrieval.mode", self.retrieval.mode.to_string()),
            ("retrieval.iou_threshold", self.retrieval.iou_threshold.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let sec = k.split_once('.').map_or("", |(a, _)| a);
            if sec != section && !s.is_empty() {
                s.push('\n');
            }
            section = sec;
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Writes the serialized config into `dir`.
    pub fn write_copy(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_COPY), self.to_text())?;
        Ok(())
    }
}

fn symmetric(d: f64) -> (f64, f64) {
    (-d, d)
}

/// Worker cap from `SCRL_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("SCRL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SCRL_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let e = RunConfig::parse("pretrain.epochs=3\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("seed")));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let e = RunConfig::parse("seed=1\npretrain.epoch=3\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("pretrain.epoch") && m.contains("line 2")));
        assert!(RunConfig::parse("seed=1\nseed=2\n").is_err());
        assert!(RunConfig::parse("seed=1\njunk\n").is_err());
        assert!(RunConfig::parse("seed=x\n").is_err());
    }

    #[test]
    fn serialized_form_round_trips() {
        let mut c = RunConfig::parse("seed=5\n# comment\n\ncontrast.temperature = 0.2\nretrieval.mode=annotated\ncorpus.seed=7\n").unwrap();
        assert_eq!(c.contrast.temperature, 0.2);
        assert_eq!(c.corpus.seed, 7);
        assert_eq!(c.pretrain.seed, 5);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        c.pretrain.lr = 3.7e-4;
        c.contrast.augment.brightness = (-0.1, 0.1);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let mut c = RunConfig::with_seed(1);
        for (k, v) in c.clone().entries() {
            c.set(k, &v).unwrap();
        }
        let text = c.to_text();
        assert_eq!(text.lines().filter(|l| l.contains('=')).count(), c.entries().len());
    }

    #[test]
    fn corpus_seed_follows_master_seed_by_default() {
        let c = RunConfig::parse("seed=42\n").unwrap();
        assert_eq!(c.corpus.seed, 42);
        assert_eq!(c.model.grid, GridDims::new(8, 4, 4));
    }

    #[test]
    fn query_length_must_match_clip_length() {
        assert!(RunConfig::parse("seed=1\ncorpus.query_len=8\n").is_err());
        let c = RunConfig::parse("seed=1\ncorpus.query_len=8\nclip_len=8\n").unwrap();
        assert_eq!(c.model.grid.t, 4);
    }
}
