//! `key = value` configuration files.
//!
//! Keys carry a section prefix (`roi.`, `net.`, `adam.`, `augment.`,
//! `pipeline.`). `#` starts a comment. Unknown keys are rejected. Keys that
//! are absent keep their built-in default.

use std::fmt::Write as _;
use std::path::Path;

use crate::aggregate::SlideRule;
use crate::augment::AugmentConfig;
use crate::densenet::DenseNetConfig;
use crate::nn::AdamConfig;
use crate::roi::RoiConfig;

use super::PipelineError;

pub const DEFAULT_CFG: &str = include_str!("../../configs/default.cfg");
pub const DESK_CFG: &str = include_str!("../../configs/desk.cfg");

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub roi: RoiConfig,
    pub net: DenseNetConfig,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub worker_threads: usize,
    /// Producer/consumer queue bound, in batches.
    pub queue_capacity: usize,
    pub deterministic: bool,
    pub global_seed: u64,
    pub slide_rule: SlideRule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train_fraction: 0.8,
            epochs: 6,
            batch_size: 10,
            roi: RoiConfig::default(),
            net: DenseNetConfig::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            worker_threads: 1,
            queue_capacity: 4,
            deterministic: true,
            global_seed: 0,
            slide_rule: SlideRule::Max,
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, PipelineError> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("line {line}: cannot parse {key} = {value:?}")))
}

impl PipelineConfig {
    /// The shipped `desk.cfg` preset.
    pub fn desk() -> PipelineConfig {
        PipelineConfig::parse(DESK_CFG).expect("shipped preset parses")
    }

    /// Apply the assignments in `text` on top of the built-in defaults.
    pub fn parse(text: &str) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        PipelineConfig::parse(&text)
    }

    /// Apply assignments without validating.
    pub fn apply(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(i + 1, key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set one key; `line` is used in error messages.
    pub fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), PipelineError> {
        let l = line;
        match key {
            "roi.green_red_ratio" => self.roi.green_red_ratio = parse(l, key, v)?,
            "roi.median_disk_px" => self.roi.median_disk_px = parse(l, key, v)?,
            "roi.work_factor" => self.roi.work_factor = parse(l, key, v)?,
            "roi.patch_px" => self.roi.patch_px = parse(l, key, v)?,
            "roi.num_patches" => self.roi.num_patches = parse(l, key, v)?,
            "roi.sampling_seed" => self.roi.sampling_seed = parse(l, key, v)?,
            "net.stem_maps" => self.net.stem_maps = parse(l, key, v)?,
            "net.extractors_per_block" => self.net.extractors_per_block = parse(l, key, v)?,
            "net.growth_rate" => self.net.growth_rate = parse(l, key, v)?,
            "net.block_pairs" => self.net.block_pairs = parse(l, key, v)?,
            "net.hidden_units" => self.net.hidden_units = parse(l, key, v)?,
            "net.num_classes" => self.net.num_classes = parse(l, key, v)?,
            "net.input_px" => self.net.input_px = parse(l, key, v)?,
            "adam.learning_rate" => self.adam.learning_rate = parse(l, key, v)?,
            "adam.beta1" => self.adam.beta1 = parse(l, key, v)?,
            "adam.beta2" => self.adam.beta2 = parse(l, key, v)?,
            "adam.epsilon" => self.adam.epsilon = parse(l, key, v)?,
            "augment.color_shift_max" => self.augment.color_shift_max = parse(l, key, v)?,
            "augment.elastic_alpha" => self.augment.elastic_alpha = parse(l, key, v)?,
            "augment.elastic_sigma" => self.augment.elastic_sigma = parse(l, key, v)?,
            "augment.seed" => self.augment.seed = parse(l, key, v)?,
            "pipeline.train_fraction" => self.train_fraction = parse(l, key, v)?,
            "pipeline.epochs" => self.epochs = parse(l, key, v)?,
            "pipeline.batch_size" => self.batch_size = parse(l, key, v)?,
            "pipeline.worker_threads" => self.worker_threads = parse(l, key, v)?,
            "pipeline.queue_capacity" => self.queue_capacity = parse(l, key, v)?,
            "pipeline.deterministic" => self.deterministic = parse(l, key, v)?,
            "pipeline.global_seed" => self.global_seed = parse(l, key, v)?,
            "pipeline.slide_rule" => self.slide_rule = v.parse().map_err(PipelineError::Config)?,
            _ => return Err(PipelineError::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("pipeline.train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.batch_size == 0 || self.queue_capacity == 0 {
            return bad("pipeline.batch_size and pipeline.queue_capacity must be at least 1".into());
        }
        self.roi.validate().map_err(PipelineError::Config)?;
        self.net.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.adam.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.augment.validate().map_err(PipelineError::Config)?;
        if self.net.num_classes != 4 {
            return bad(format!("net.num_classes must be 4, got {}", self.net.num_classes));
        }
        if self.roi.patch_px != self.net.input_px {
            return Err(PipelineError::ConfigMismatch(format!(
                "roi.patch_px = {} but net.input_px = {}",
                self.roi.patch_px, self.net.input_px
            )));
        }
        Ok(())
    }

    /// Serialize every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("roi.green_red_ratio", self.roi.green_red_ratio.to_string());
        kv("roi.median_disk_px", self.roi.median_disk_px.to_string());
        kv("roi.work_factor", self.roi.work_factor.to_string());
        kv("roi.patch_px", self.roi.patch_px.to_string());
        kv("roi.num_patches", self.roi.num_patches.to_string());
        kv("roi.sampling_seed", self.roi.sampling_seed.to_string());
        kv("net.stem_maps", self.net.stem_maps.to_string());
        kv("net.extractors_per_block", self.net.extractors_per_block.to_string());
        kv("net.growth_rate", self.net.growth_rate.to_string());
        kv("net.block_pairs", self.net.block_pairs.to_string());
        kv("net.hidden_units", self.net.hidden_units.to_string());
        kv("net.num_classes", self.net.num_classes.to_string());
        kv("net.input_px", self.net.input_px.to_string());
        kv("adam.learning_rate", self.adam.learning_rate.to_string());
        kv("adam.beta1", self.adam.beta1.to_string());
        kv("adam.beta2", self.adam.beta2.to_string());
        kv("adam.epsilon", self.adam.epsilon.to_string());
        kv("augment.color_shift_max", self.augment.color_shift_max.to_string());
        kv("augment.elastic_alpha", self.augment.elastic_alpha.to_string());
        kv("augment.elastic_sigma", self.augment.elastic_sigma.to_string());
        kv("augment.seed", self.augment.seed.to_string());
        kv("pipeline.train_fraction", self.train_fraction.to_string());
        kv("pipeline.epochs", self.epochs.to_string());
        kv("pipeline.batch_size", self.batch_size.to_string());
        kv("pipeline.worker_threads", self.worker_threads.to_string());
        kv("pipeline.queue_capacity", self.queue_capacity.to_string());
        kv("pipeline.deterministic", self.deterministic.to_string());
        kv("pipeline.global_seed", self.global_seed.to_string());
        let rule = match self.slide_rule {
            SlideRule::Max => "max",
            SlideRule::Ranked => "ranked",
        };
        kv("pipeline.slide_rule", rule.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_presets() {
        assert_eq!(PipelineConfig::parse(DEFAULT_CFG).unwrap(), PipelineConfig::default());
        let desk = PipelineConfig::desk();
        assert_eq!(desk.net, DenseNetConfig::desk());
        assert_eq!(desk.roi.patch_px, 64);
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::desk();
        c.adam.epsilon = 1e-7;
        c.slide_rule = SlideRule::Ranked;
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(PipelineConfig::parse("net.depth = 3"), Err(PipelineError::Config(_))));
        assert!(matches!(PipelineConfig::parse("roi.patch_px = abc"), Err(PipelineError::Config(_))));
        assert!(matches!(PipelineConfig::parse("just words"), Err(PipelineError::Config(_))));
        assert!(matches!(PipelineConfig::parse("roi.patch_px = 64"), Err(PipelineError::ConfigMismatch(_))));
        assert!(PipelineConfig::parse("pipeline.train_fraction = 1.0").is_err());
        assert_eq!(PipelineConfig::parse("# comment only\n\n").unwrap(), PipelineConfig::default());
    }
}
