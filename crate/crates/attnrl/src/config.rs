//! Run configuration: defaults, key=value file parsing, flag overrides, and
//! validation. Every error names the offending key.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub arch: String, // mott | adaptive | sp-temp-seq | sp-temp-oneshot | divided | joint
    pub env: String,  // catch | minipong
    pub total_steps: usize,
    pub unroll_length: usize,
    pub chunk_size: usize,
    pub num_actors: usize,
    pub num_buffers: usize,
    pub batch_size: usize,
    pub mem_len: usize,
    pub emb_size: usize,
    pub patch_size: usize,
    pub n_layer: usize,
    pub heads: usize,
    pub gamma: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub baseline_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub rescale_images: bool,
    pub frame_stack: usize,
    pub seed: u64,
    // desk-scale knobs beyond the core set
    pub d_model: usize,
    pub frame_size: usize,
    pub hybrid: bool,
    pub lstm_hidden: usize,
    pub answer_hidden: usize,
    pub metrics_window: usize,
    pub stop_return: Option<f64>,
    pub spatial_freqs: usize, // U = V
}

pub const ARCHS: [&str; 6] = ["mott", "adaptive", "sp-temp-seq", "sp-temp-oneshot", "divided", "joint"];
pub const ENVS: [&str; 2] = ["catch", "minipong"];

impl Default for Config {
    fn default() -> Config {
        Config {
            arch: "adaptive".into(),
            env: "catch".into(),
            total_steps: 200_000,
            unroll_length: 240,
            chunk_size: 80,
            num_actors: 2,
            num_buffers: 40,
            batch_size: 4,
            mem_len: 100,
            emb_size: 16,
            patch_size: 7,
            n_layer: 1,
            heads: 4,
            gamma: 0.99,
            rho_bar: 1.0,
            c_bar: 1.0,
            baseline_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 1e-3,
            rescale_images: false,
            frame_stack: 4,
            seed: 0,
            d_model: 64,
            frame_size: 28,
            hybrid: true,
            lstm_hidden: 64,
            answer_hidden: 64,
            metrics_window: 100,
            stop_return: None,
            spatial_freqs: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}` as a number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(key, format!("cannot parse `{other}` as a boolean"))),
    }
}

impl Config {
    /// Apply one key=value setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "arch" => self.arch = value.trim().to_string(),
            "env" => self.env = value.trim().to_string(),
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "unroll_length" => self.unroll_length = parse_num(key, value)?,
            "chunk_size" => self.chunk_size = parse_num(key, value)?,
            "num_actors" => self.num_actors = parse_num(key, value)?,
            "num_buffers" => self.num_buffers = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "mem_len" => self.mem_len = parse_num(key, value)?,
            "emb_size" => self.emb_size = parse_num(key, value)?,
            "patch_size" => self.patch_size = parse_num(key, value)?,
            "n_layer" => self.n_layer = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "rho_bar" => self.rho_bar = parse_num(key, value)?,
            "c_bar" => self.c_bar = parse_num(key, value)?,
            "baseline_coef" => self.baseline_coef = parse_num(key, value)?,
            "entropy_coef" => self.entropy_coef = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "rescale_images" => self.rescale_images = parse_bool(key, value)?,
            "frame_stack" => self.frame_stack = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "frame_size" => self.frame_size = parse_num(key, value)?,
            "hybrid" => self.hybrid = parse_bool(key, value)?,
            "lstm_hidden" => self.lstm_hidden = parse_num(key, value)?,
            "answer_hidden" => self.answer_hidden = parse_num(key, value)?,
            "metrics_window" => self.metrics_window = parse_num(key, value)?,
            "stop_return" => self.stop_return = Some(parse_num(key, value)?),
            "spatial_freqs" => self.spatial_freqs = parse_num(key, value)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Defaults, then file settings, then flag overrides; validated.
    pub fn from_sources(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Config> {
        let mut cfg = Config::default();
        if let Some(text) = file_text {
            for (key, value) in parse_kv_lines(text)? {
                cfg.apply(&key, &value)?;
            }
        }
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !ARCHS.contains(&self.arch.as_str()) {
            return Err(Error::config("arch", format!("unknown architecture `{}`", self.arch)));
        }
        if !ENVS.contains(&self.env.as_str()) {
            return Err(Error::config("env", format!("unknown environment `{}`", self.env)));
        }
        for (key, value) in [
            ("total_steps", self.total_steps),
            ("unroll_length", self.unroll_length),
            ("chunk_size", self.chunk_size),
            ("num_actors", self.num_actors),
            ("num_buffers", self.num_buffers),
            ("batch_size", self.batch_size),
            ("emb_size", self.emb_size),
            ("patch_size", self.patch_size),
            ("n_layer", self.n_layer),
            ("heads", self.heads),
            ("frame_stack", self.frame_stack),
            ("d_model", self.d_model),
            ("frame_size", self.frame_size),
            ("lstm_hidden", self.lstm_hidden),
            ("answer_hidden", self.answer_hidden),
            ("metrics_window", self.metrics_window),
            ("spatial_freqs", self.spatial_freqs),
        ] {
            if value == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.unroll_length % self.chunk_size != 0 {
            return Err(Error::config(
                "chunk_size",
                format!(
                    "unroll_length {} is not divisible by chunk_size {}",
                    self.unroll_length, self.chunk_size
                ),
            ));
        }
        if self.num_buffers < self.batch_size + self.num_actors {
            return Err(Error::config(
                "num_buffers",
                format!(
                    "need at least batch_size + num_actors = {}",
                    self.batch_size + self.num_actors
                ),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        if self.emb_size % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("emb_size {} not divisible by heads {}", self.emb_size, self.heads),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return Err(Error::config("rho_bar", "must satisfy rho_bar >= c_bar > 0"));
        }
        Ok(())
    }
}

/// Parse UTF-8 key=value lines; blank lines and #-comments are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", idx + 1),
                format!("expected key=value, got `{line}`"),
            ));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_documented_defaults() {
        let cfg = Config::from_sources(None, &[]).unwrap();
        assert_eq!(cfg.unroll_length, 240);
        assert_eq!(cfg.chunk_size, 80);
        assert_eq!(cfg.mem_len, 100);
        assert_eq!(cfg.num_buffers, 40);
        assert_eq!(cfg.emb_size, 16);
        assert_eq!(cfg.patch_size, 7);
        assert_eq!(cfg.n_layer, 1);
        assert!(!cfg.rescale_images);
        assert_eq!(cfg.frame_stack, 4);
    }

    #[test]
    fn divisibility_violation_names_key() {
        let err = Config::from_sources(Some("unroll_length=10\nchunk_size=7"), &[])
            .map(|_| ())
            .unwrap_err()
            .to_string();
        assert!(err.contains("chunk_size") && err.contains("divisible"), "{err}");
    }

    #[test]
    fn flag_overrides_file() {
        let cfg = Config::from_sources(
            Some("num_actors=4"),
            &[("num_actors".to_string(), "2".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.num_actors, 2);
    }

    #[test]
    fn unknown_key_rejected() {
        let err =
            Config::from_sources(Some("warp_speed=9"), &[]).map(|_| ()).unwrap_err().to_string();
        assert!(err.contains("warp_speed"), "{err}");
    }

    #[test]
    fn non_numeric_value_names_key() {
        let err = Config::from_sources(Some("batch_size=lots"), &[])
            .map(|_| ())
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size") && err.contains("lots"), "{err}");
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let text = "# a comment\n\nseed=7\n  gamma = 0.5 \n";
        let cfg = Config::from_sources(Some(text), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gamma, 0.5);
    }

    #[test]
    fn truncation_ordering_enforced() {
        let err = Config::from_sources(Some("rho_bar=0.5\nc_bar=1.0"), &[])
            .map(|_| ())
            .unwrap_err()
            .to_string();
        assert!(err.contains("rho_bar"), "{err}");
    }
}
