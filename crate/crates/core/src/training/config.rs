//! Flat `key = value` training configuration.

use std::fmt;
use std::path::Path;

use crate::dwt::Wavelet;
use crate::error::{Error, Result};
use crate::nets::NetConfig;
use crate::pipeline::Mode;
use crate::weights::Lambda2Mode;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub wavelet: Wavelet,
    pub mode: Mode,
    pub levels: usize,
    pub min_extent: usize,
    pub net: NetConfig,
    /// Rate multiplier; `None` estimates it from the baseline slope.
    pub lambda1: Option<f64>,
    pub lambda2: Lambda2Mode,
    pub epochs: usize,
    /// Epochs between table refreshes.
    pub lut_period: usize,
    /// Smoothing width at the start and end of each period, as a fraction
    /// of the effective step `Δ/G_a`.
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay every `lr_decay_steps` steps.
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Average estimated bit rate the base step size is tuned to.
    pub target_bpp: f64,
    /// Fixed base step size; `None` bisects towards `target_bpp`.
    pub delta_base: Option<f64>,
    /// Epochs of aliasing-only H2L training before the joint phase.
    pub pretrain_epochs: usize,
    /// Abort when a period ends with `J` this many times its start.
    pub divergence_factor: f64,
    /// Patches used for table fitting and monotonicity checks; `0` means all.
    pub table_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            wavelet: Wavelet::LeGall53,
            mode: Mode::Hybrid,
            levels: 3,
            min_extent: 8,
            net: NetConfig::default(),
            lambda1: None,
            lambda2: Lambda2Mode::Zero,
            epochs: 60,
            lut_period: 20,
            sigma_start: 0.5,
            sigma_end: 0.1,
            learning_rate: 1e-4,
            lr_decay: 0.96,
            lr_decay_steps: 20,
            batch_size: 8,
            patch_size: 64,
            seed: 1,
            target_bpp: 1.0,
            delta_base: None,
            pretrain_epochs: 0,
            divergence_factor: 10.0,
            table_sample: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("bad value {v:?} for {key}")))
}

fn optional(key: &str, v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "wavelet" => self.wavelet = v.parse()?,
            "mode" => self.mode = v.parse()?,
            "levels" => self.levels = parse(key, v)?,
            "min_extent" => self.min_extent = parse(key, v)?,
            "proposals" => self.net.proposals = parse(key, v)?,
            "proposal_kernel" => self.net.proposal_kernel = parse(key, v)?,
            "opacity_width" => self.net.opacity_width = parse(key, v)?,
            "res_blocks" => self.net.res_blocks = parse(key, v)?,
            "lambda1" => self.lambda1 = optional(key, v)?,
            "lambda2" => self.lambda2 = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "lut_period" => self.lut_period = parse(key, v)?,
            "sigma_start" => self.sigma_start = parse(key, v)?,
            "sigma_end" => self.sigma_end = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "lr_decay_steps" => self.lr_decay_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "target_bpp" => self.target_bpp = parse(key, v)?,
            "delta_base" => self.delta_base = optional(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "divergence_factor" => self.divergence_factor = parse(key, v)?,
            "table_sample" => self.table_sample = parse(key, v)?,
            _ => return Err(Error::Parse(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.mode.uses_operators() {
            return bad(format!("mode {} has nothing to train", self.mode));
        }
        if self.levels == 0 || self.epochs == 0 || self.lut_period == 0 || self.batch_size == 0 {
            return bad("levels, epochs, lut_period and batch_size must be positive".into());
        }
        if !self.epochs.is_multiple_of(self.lut_period) {
            return bad(format!("lut_period {} does not divide epochs {}", self.lut_period, self.epochs));
        }
        if !(self.sigma_start > self.sigma_end && self.sigma_end > 0.0 && self.sigma_start.is_finite()) {
            return bad("need sigma_start > sigma_end > 0".into());
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0 && self.lr_decay_steps > 0) {
            return bad("learning rate must be positive with decay in (0, 1]".into());
        }
        if self.patch_size < 2 {
            return bad("patch_size must be at least 2".into());
        }
        crate::pipeline::level_extents(self.patch_size, self.patch_size, self.levels)?;
        if !(self.target_bpp > 0.0 && self.divergence_factor > 1.0) {
            return bad("target_bpp must be positive and divergence_factor above 1".into());
        }
        if let Some(l) = self.lambda1 {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda1 {l} must be finite and non-negative"));
            }
        }
        if let Some(d) = self.delta_base {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("delta_base {d} must be positive"));
            }
        }
        self.net.validate()
    }

    pub fn periods(&self) -> usize {
        self.epochs / self.lut_period
    }
}

fn auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// Round-trips through [`TrainConfig::parse`].
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wavelet = match self.wavelet {
            Wavelet::LeGall53 => "5/3",
            Wavelet::Cdf97 => "9/7",
        };
        let rows: [(&str, String); 25] = [
            ("wavelet", wavelet.into()),
            ("mode", self.mode.name().into()),
            ("levels", self.levels.to_string()),
            ("min_extent", self.min_extent.to_string()),
            ("proposals", self.net.proposals.to_string()),
            ("proposal_kernel", self.net.proposal_kernel.to_string()),
            ("opacity_width", self.net.opacity_width.to_string()),
            ("res_blocks", self.net.res_blocks.to_string()),
            ("lambda1", auto(self.lambda1)),
            ("lambda2", self.lambda2.name().into()),
            ("epochs", self.epochs.to_string()),
            ("lut_period", self.lut_period.to_string()),
            ("sigma_start", self.sigma_start.to_string()),
            ("sigma_end", self.sigma_end.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_steps", self.lr_decay_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("target_bpp", self.target_bpp.to_string()),
            ("delta_base", auto(self.delta_base)),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("divergence_factor", self.divergence_factor.to_string()),
            ("table_sample", self.table_sample.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let c = TrainConfig::parse("# desk run\nepochs = 40 # two periods\nlut_period=20\nlambda2 = anneal\nmode = h2l_plus_linear\nlambda1 = 0.25\n").unwrap();
        assert_eq!(c.epochs, 40);
        assert_eq!(c.lambda2, Lambda2Mode::Anneal);
        assert_eq!(c.mode, Mode::H2lPlusLinear);
        assert_eq!(c.lambda1, Some(0.25));
        assert_eq!(c.delta_base, None);
    }

    #[test]
    fn display_round_trips() {
        let mut c = TrainConfig { lambda1: Some(0.125), wavelet: Wavelet::Cdf97, ..Default::default() };
        c.set("delta_base", "3.5").unwrap();
        assert_eq!(TrainConfig::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn rejects_invalid() {
        assert!(TrainConfig::parse("epochs = 50\nlut_period = 20").is_err());
        assert!(TrainConfig::parse("sigma_start = 0.1\nsigma_end = 0.2").is_err());
        assert!(TrainConfig::parse("mode = baseline").is_err());
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("levels = 9").is_err());
    }
}
