//! Flat key = value run configuration with command-line overrides.
//!
//! Every key has a default; files and `--key=value` flags may only touch
//! known keys. The fully resolved map is echoed to the output directory as
//! `config.resolved` before a command does any work, so a run can always be
//! reproduced from its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use svphw_core::data::{SpriteKinds, SpriteWorldConfig};
use svphw_core::error::{Error, Result};
use svphw_core::layers::Activation;
use svphw_core::model::ModelConfig;

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn defaults() -> BTreeMap<String, String> {
    let model = ModelConfig::desk_default();
    let world = SpriteWorldConfig::default_world(model.seed);
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    // model
    put("frame_h", model.frame_h.to_string());
    put("frame_w", model.frame_w.to_string());
    put("frame_channels", model.frame_channels.to_string());
    put("cond_frames", model.cond_frames.to_string());
    put("pred_frames", model.pred_frames.to_string());
    put("eval_pred_frames", "10".into());
    put("levels", model.levels.to_string());
    put("base_channels", model.base_channels.to_string());
    put("width_mult", model.width_mult.to_string());
    put("kernel_size", model.kernel_size.to_string());
    put("se_reduction", model.se_reduction.to_string());
    put("latent_dim", model.latent_dim.to_string());
    put("lstm_hidden", model.lstm_hidden.to_string());
    put("latent_lstm_hidden", model.latent_lstm_hidden.to_string());
    put("mask_widths", "16,16".into());
    put("hidden_activation", model.hidden_activation.to_string());
    put("beta", model.beta.to_string());
    put("learning_rate", model.learning_rate.to_string());
    put("train_steps", model.train_steps.to_string());
    put("batch_size", model.batch_size.to_string());
    put("splat_epsilon", model.splat_epsilon.to_string());
    put("include_warmup_loss", model.include_warmup_loss.to_string());
    put("seed", model.seed.to_string());
    // sprite world
    put("sprites_min", world.sprites_min.to_string());
    put("sprites_max", world.sprites_max.to_string());
    put("sprite_kinds", world.kinds.to_string());
    put("speed_min", world.speed_min.to_string());
    put("speed_max", world.speed_max.to_string());
    put("dir_switch_prob", world.dir_switch_prob.to_string());
    put("bounce", world.bounce.to_string());
    put("bimodal", world.bimodal.to_string());
    put("branch_step", world.branch_step.to_string());
    put("seq_len", world.seq_len.to_string());
    // dataset
    put("n_train", "8".into());
    put("n_val", "2".into());
    put("n_test", "4".into());
    // run bookkeeping
    put("n_samples", "5".into());
    put("n_predict_sequences", "2".into());
    put("n_eval_sequences", "4".into());
    put("ckpt_every", "500".into());
    // paths
    put("dataset_dir", "dataset".into());
    put("checkpoint", "checkpoint.ckpt".into());
    put("out_dir", "out".into());
    m
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig { values: defaults() }
    }

    /// Loads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {} is not 'key = value': '{raw}'", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::InvalidArgument(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).expect("known key")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("config key '{key}' has invalid value '{}'", self.get(key))))
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64_of(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    pub fn path_of(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mask_widths: Vec<usize> = {
            let raw = self.get("mask_widths");
            let mut v = Vec::new();
            for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                v.push(
                    part.parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad mask_widths entry '{part}'")))?,
                );
            }
            v
        };
        let cfg = ModelConfig {
            frame_channels: self.usize_of("frame_channels")?,
            frame_h: self.usize_of("frame_h")?,
            frame_w: self.usize_of("frame_w")?,
            cond_frames: self.usize_of("cond_frames")?,
            pred_frames: self.usize_of("pred_frames")?,
            levels: self.usize_of("levels")?,
            base_channels: self.usize_of("base_channels")?,
            width_mult: self.f64_of("width_mult")?,
            kernel_size: self.usize_of("kernel_size")?,
            se_reduction: self.usize_of("se_reduction")?,
            latent_dim: self.usize_of("latent_dim")?,
            lstm_hidden: self.usize_of("lstm_hidden")?,
            latent_lstm_hidden: self.usize_of("latent_lstm_hidden")?,
            mask_widths,
            hidden_activation: self.get("hidden_activation").parse::<Activation>()?,
            beta: self.f64_of("beta")?,
            learning_rate: self.f64_of("learning_rate")?,
            train_steps: self.usize_of("train_steps")?,
            batch_size: self.usize_of("batch_size")?,
            splat_epsilon: self.f64_of("splat_epsilon")?,
            include_warmup_loss: self.bool_of("include_warmup_loss")?,
            seed: self.u64_of("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn world_config(&self) -> Result<SpriteWorldConfig> {
        let cfg = SpriteWorldConfig {
            frame_h: self.usize_of("frame_h")?,
            frame_w: self.usize_of("frame_w")?,
            channels: self.usize_of("frame_channels")?,
            sprites_min: self.usize_of("sprites_min")?,
            sprites_max: self.usize_of("sprites_max")?,
            kinds: self.get("sprite_kinds").parse::<SpriteKinds>()?,
            speed_min: self.parse("speed_min")?,
            speed_max: self.parse("speed_max")?,
            dir_switch_prob: self.f64_of("dir_switch_prob")?,
            bounce: self.bool_of("bounce")?,
            bimodal: self.bool_of("bimodal")?,
            branch_step: self.usize_of("branch_step")?,
            seq_len: self.usize_of("seq_len")?,
            seed: self.u64_of("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the resolved map, with the derived network stacks echoed
    /// as comments.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Ok(model) = self.model_config() {
            if let (Ok(pe), Ok(me), Ok(pd), Ok(fd), Ok(md)) = (
                model.pixel_encoder_spec(),
                model.motion_encoder_spec(),
                model.pixel_decoder_spec(),
                model.flow_decoder_spec(),
                model.mask_decoder_spec(),
            ) {
                out.push_str(&format!("# pixel_encoder_stack: {pe}\n"));
                out.push_str(&format!("# motion_encoder_stack: {me}\n"));
                out.push_str(&format!("# pixel_decoder_stack: {pd}\n"));
                out.push_str(&format!("# flow_decoder_stack: {fd}\n"));
                out.push_str(&format!("# mask_decoder_stack: {md}\n"));
            }
        }
        out
    }

    /// Writes `config.resolved` into `dir`, creating the directory.
    pub fn echo_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved"), self.resolved_text())?;
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_valid_configs() {
        let cfg = RunConfig::new();
        cfg.model_config().unwrap();
        cfg.world_config().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::new();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("frame_h", "32").is_ok());
    }

    #[test]
    fn file_parsing_and_comments() {
        let dir = std::env::temp_dir().join("svphw_cli_cfg");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("run.cfg");
        std::fs::write(&p, "# comment\nframe_h = 32\nframe_w = 32  # trailing\n").unwrap();
        let mut cfg = RunConfig::new();
        cfg.apply_file(&p).unwrap();
        assert_eq!(cfg.get("frame_h"), "32");

        std::fs::write(&p, "not a key value line\n").unwrap();
        assert!(cfg.apply_file(&p).is_err());
    }

    #[test]
    fn resolved_text_is_deterministic_and_sorted() {
        let a = RunConfig::new().resolved_text();
        let b = RunConfig::new().resolved_text();
        assert_eq!(a, b);
        let keys: Vec<&str> = a.lines().filter(|l| !l.starts_with('#')).map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
