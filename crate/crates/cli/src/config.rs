//! Training configuration resolution: command line over config file over defaults.

use im2grid::coordtrans::SearchWindow;
use im2grid::model::{parse_windows, Variant};
use im2grid_train::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Keys accepted in a `--config` TOML file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub variant: Option<String>,
    pub levels: Option<usize>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub iters: Option<usize>,
    pub window: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub weight_decay: Option<f64>,
    pub final_lr_fraction: Option<f64>,
    pub augment: Option<bool>,
    pub checkpoint_every: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))
    }

    /// Entries of `self` override those of `base`.
    pub fn over(self, base: FileConfig) -> FileConfig {
        FileConfig {
            seed: self.seed.or(base.seed),
            variant: self.variant.or(base.variant),
            levels: self.levels.or(base.levels),
            lambda: self.lambda.or(base.lambda),
            lr: self.lr.or(base.lr),
            iters: self.iters.or(base.iters),
            window: self.window.or(base.window),
            out_dir: self.out_dir.or(base.out_dir),
            weight_decay: self.weight_decay.or(base.weight_decay),
            final_lr_fraction: self.final_lr_fraction.or(base.final_lr_fraction),
            augment: self.augment.or(base.augment),
            checkpoint_every: self.checkpoint_every.or(base.checkpoint_every),
        }
    }

    /// Fill unset keys from [`TrainConfig::default`].
    pub fn resolve(self) -> Result<TrainConfig, String> {
        let d = TrainConfig::default();
        let variant = match self.variant {
            Some(v) => v.parse::<Variant>().map_err(|e| e.to_string())?,
            None => d.variant,
        };
        let levels = self.levels.unwrap_or(d.levels);
        let windows = self.window.map(|w| parse_windows(&w)).transpose().map_err(|e| e.to_string())?;
        if let Some(w) = &windows {
            if w.len() != levels {
                return Err(format!("--window lists {} levels but the model has {levels}", w.len()));
            }
        }
        let cfg = TrainConfig {
            iterations: self.iters.unwrap_or(d.iterations),
            lambda: self.lambda.unwrap_or(d.lambda),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed.unwrap_or(d.seed),
            variant,
            levels,
            windows,
            augment: self.augment.unwrap_or(d.augment),
            final_lr_fraction: self.final_lr_fraction.unwrap_or(d.final_lr_fraction),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            out_dir: Some(self.out_dir.unwrap_or_else(|| PathBuf::from("im2grid-run"))),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// `"1,1;1,1;1,1"`, the same syntax `--window` accepts.
pub fn format_windows(windows: &[SearchWindow]) -> String {
    windows
        .iter()
        .map(|w| w.half_widths().iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// Parse `64x64` or `16x16x16`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    let dims = s
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("bad extent `{d}` in shape `{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
        return Err(format!("shape `{s}` must have 2 or 3 positive extents"));
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_beats_file_beats_defaults() {
        let file: FileConfig = toml::from_str("lr = 0.01\nlambda = 0.5\nvariant = \"full\"").unwrap();
        let cli = FileConfig { lr: Some(0.002), ..Default::default() };
        let cfg = cli.over(file).resolve().unwrap();
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.variant, Variant::Full);
        assert_eq!(cfg.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("learning_rate = 1").is_err());
    }

    #[test]
    fn window_count_must_match_levels() {
        let cli = FileConfig { levels: Some(2), window: Some("1,1;1,1;1,1".into()), ..Default::default() };
        assert!(cli.resolve().is_err());
    }

    #[test]
    fn windows_round_trip_through_text() {
        let w = parse_windows("1,1,0;2,2,2").unwrap();
        assert_eq!(format_windows(&w), "1,1,0;2,2,2");
    }

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("64x32").unwrap(), vec![64, 32]);
        assert_eq!(parse_shape("8x8x4").unwrap(), vec![8, 8, 4]);
        assert!(parse_shape("64").is_err());
        assert!(parse_shape("0x4").is_err());
        assert!(parse_shape("ax4").is_err());
    }
}
