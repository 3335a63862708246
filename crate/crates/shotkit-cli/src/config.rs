//! Tool configuration: a TOML file whose fields mirror the library's
//! model, mask, and curation settings, validated at load time.

use crate::CliError;
use serde::Deserialize;
use shotkit::attention::BlockConfig;
use shotkit::camera::GridSampling;
use shotkit::conditioning::default_hidden;
use shotkit::curation::{CurationThresholds, StatsConfig};
use std::path::{Path, PathBuf};

/// Environment variable naming the default config file.
pub const CONFIG_ENV_VAR: &str = "SHOTKIT_CONFIG";

/// Everything the subcommands can be configured with. Command-line flags
/// override individual fields; absent fields take the documented defaults.
/// The seed has no default because every random draw must be traceable to
/// an explicit choice.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub seed: Option<u64>,
    pub d_model: usize,
    pub n_heads: usize,
    pub layers: usize,
    pub full_visibility_layers: usize,
    pub conv_kernel: usize,
    /// MLP branch hidden width; defaults to four times `d_model`.
    pub hidden: Option<usize>,
    pub use_mask: bool,
    pub use_extrinsic_branch: bool,
    pub use_plucker_branch: bool,
    pub use_residual_norm: bool,
    pub grid_sampling: GridSampling,
    pub thresholds: CurationThresholds,
    pub stats: StatsConfig,
}

impl Default for ToolConfig {
    fn default() -> Self {
        let block = BlockConfig::default();
        Self {
            seed: None,
            d_model: 64,
            n_heads: 4,
            layers: block.layers,
            full_visibility_layers: block.full_visibility_layers,
            conv_kernel: 2,
            hidden: None,
            use_mask: block.use_mask,
            use_extrinsic_branch: block.use_extrinsic_branch,
            use_plucker_branch: block.use_plucker_branch,
            use_residual_norm: block.use_residual_norm,
            grid_sampling: GridSampling::default(),
            thresholds: CurationThresholds::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("config {}: {e}", path.display())))?;
        let config: ToolConfig = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// `--config` flag, then the environment variable, then the defaults.
    pub fn resolve(cli_path: Option<&PathBuf>) -> Result<Self, CliError> {
        if let Some(path) = cli_path {
            return Self::load(path);
        }
        if let Ok(path) = std::env::var(CONFIG_ENV_VAR) {
            if !path.is_empty() {
                return Self::load(Path::new(&path));
            }
        }
        Ok(Self::default())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(format!("config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 {
            return invalid("d_model and n_heads must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return invalid(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.layers == 0 {
            return invalid("layers must be at least 1".into());
        }
        if self.conv_kernel == 0 {
            return invalid("conv_kernel must be at least 1".into());
        }
        if self.hidden == Some(0) {
            return invalid("hidden must be at least 1".into());
        }
        self.thresholds
            .validate()
            .map_err(|e| CliError::Validation(format!("config: {e}")))?;
        for (name, edges) in [
            ("stats.duration_edges", &self.stats.duration_edges),
            ("stats.aesthetic_edges", &self.stats.aesthetic_edges),
            ("stats.similarity_edges", &self.stats.similarity_edges),
        ] {
            if edges.len() < 2 {
                return invalid(format!("{name} needs at least 2 edges"));
            }
            if edges.windows(2).any(|w| !(w[0] < w[1])) {
                return invalid(format!("{name} must be strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or_else(|| default_hidden(self.d_model))
    }

    /// Block settings with the mask schedule taken from `full_visibility_layers`.
    pub fn block_config(&self, full_visibility_layers: usize) -> BlockConfig {
        BlockConfig {
            layers: self.layers,
            full_visibility_layers,
            use_mask: self.use_mask,
            use_extrinsic_branch: self.use_extrinsic_branch,
            use_plucker_branch: self.use_plucker_branch,
            use_residual_norm: self.use_residual_norm,
        }
    }

    /// The seed for model construction: the flag wins over the config file.
    pub fn require_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        flag.or(self.seed).ok_or_else(|| {
            CliError::Validation(
                "a seed is required: pass --seed or set seed in the config file".to_string(),
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_derive_hidden_width() {
        let config = ToolConfig::default();
        config.validate().unwrap();
        assert_eq!(config.hidden(), default_hidden(config.d_model));
    }

    #[test]
    fn toml_fields_override_defaults_and_unknown_keys_fail() {
        let config: ToolConfig =
            toml::from_str("seed = 9\nd_model = 32\nn_heads = 8\n").unwrap();
        assert_eq!(config.seed, Some(9));
        assert_eq!(config.d_model, 32);
        assert_eq!(config.n_heads, 8);
        assert_eq!(config.layers, ToolConfig::default().layers);
        assert!(toml::from_str::<ToolConfig>("dmodel = 32\n").is_err());
    }

    #[test]
    fn validation_rejects_inconsistent_model_shapes() {
        let mut config = ToolConfig::default();
        config.d_model = 30;
        config.n_heads = 4;
        assert!(config.validate().is_err());
        config = ToolConfig::default();
        config.layers = 0;
        assert!(config.validate().is_err());
        config = ToolConfig::default();
        config.hidden = Some(0);
        assert!(config.validate().is_err());
        config = ToolConfig::default();
        config.stats.duration_edges = vec![2.0, 2.0];
        assert!(config.validate().is_err());
    }

    #[test]
    fn seed_flag_wins_over_config_and_absence_is_an_error() {
        let mut config = ToolConfig::default();
        assert!(config.require_seed(None).is_err());
        assert_eq!(config.require_seed(Some(5)).unwrap(), 5);
        config.seed = Some(11);
        assert_eq!(config.require_seed(None).unwrap(), 11);
        assert_eq!(config.require_seed(Some(5)).unwrap(), 5);
    }
}
