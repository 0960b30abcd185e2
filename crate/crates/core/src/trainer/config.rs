use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deformnet::{DeformConfig, IdoConfig, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::retrieval::{RetrievalConfig, SamplingMode, DEFAULT_K, DEFAULT_SIGMA0};
use crate::tensornet::SgdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Upper bound on optimizer steps.
    pub steps: usize,
    /// Random (source, target) pairs per step.
    pub batch_size: usize,
    /// Stop when the means of the last two `window`-step blocks differ by
    /// less than `tol`.
    pub window: usize,
    pub tol: f64,
    /// Overrides the joint learning rate when set.
    pub lr: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            window: 100,
            tol: 1e-5,
            lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate of the retrieval module; `lr` when unset.
    pub retrieval_lr: Option<f64>,
    pub k: usize,
    pub sigma0: f64,
    pub alpha: f64,
    pub cache_refresh_epochs: usize,
    pub sampling: SamplingMode,
    pub use_projection: bool,
    pub symmetry_weight: f64,
    pub use_ido: bool,
    /// Iteration cap of the direct optimization run inside training.
    pub ido_budget: usize,
    pub ido_weight: f64,
    pub ido: IdoConfig,
    /// Skip the deformation update (frozen-deformation baseline).
    pub freeze_deformation: bool,
    /// Skip the retrieval update.
    pub freeze_retrieval: bool,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub pretrain: PretrainConfig,
    pub deform: DeformConfig,
    pub retrieval: RetrievalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 300,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            retrieval_lr: None,
            k: DEFAULT_K,
            sigma0: DEFAULT_SIGMA0,
            alpha: DEFAULT_ALPHA,
            cache_refresh_epochs: 5,
            sampling: SamplingMode::Biased,
            use_projection: true,
            symmetry_weight: 1.0,
            use_ido: false,
            ido_budget: 200,
            ido_weight: 1.0,
            ido: IdoConfig::default(),
            freeze_deformation: false,
            freeze_retrieval: false,
            checkpoint_every: 0,
            pretrain: PretrainConfig::default(),
            deform: DeformConfig::default(),
            retrieval: RetrievalConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Smaller networks and learning rates sized for a 20-source synthetic
    /// corpus on a single CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            retrieval_lr: Some(0.02),
            sigma0: 1.0,
            symmetry_weight: 0.0,
            pretrain: PretrainConfig {
                steps: 1000,
                window: 100,
                tol: 0.0,
                lr: Some(0.03),
                ..PretrainConfig::default()
            },
            deform: DeformConfig {
                point_widths: vec![32, 64],
                target_code_dim: 64,
                global_code_dim: 32,
                part_code_dim: 16,
                hidden: vec![128, 64],
                ..DeformConfig::default()
            },
            retrieval: RetrievalConfig {
                point_widths: vec![32, 64],
                code_dim: 32,
                sigma_k_init: 0.002,
                ..RetrievalConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn deform_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn retrieval_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.retrieval_lr.unwrap_or(self.lr),
            ..self.deform_sgd()
        }
    }

    pub fn pretrain_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.pretrain.lr.unwrap_or(self.lr),
            ..self.deform_sgd()
        }
    }

    /// Deformation network settings with the run's `alpha`.
    pub fn deform_config(&self) -> DeformConfig {
        DeformConfig {
            alpha: self.alpha,
            ..self.deform.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.k == 0 || self.cache_refresh_epochs == 0 {
            return bad("batch_size, k and cache_refresh_epochs must be positive");
        }
        if !(self.sigma0 > 0.0) || !(self.alpha > 0.0) {
            return bad("sigma0 and alpha must be positive");
        }
        if !(self.symmetry_weight >= 0.0) || !(self.ido_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.use_ido && self.ido_budget == 0 {
            return bad("ido_budget must be positive when use_ido is set");
        }
        if self.pretrain.batch_size == 0 || self.pretrain.window == 0 || !(self.pretrain.tol >= 0.0) {
            return bad("pretrain batch_size and window must be positive, tol >= 0");
        }
        self.deform_sgd().validate()?;
        self.retrieval_sgd().validate()?;
        self.pretrain_sgd().validate()?;
        self.ido.validate()?;
        self.deform_config().validate()?;
        self.retrieval.validate()
    }

    /// Checks settings that depend on the database size.
    pub fn validate_for(&self, sources: usize) -> Result<()> {
        self.validate()?;
        if self.k > sources {
            return Err(Error::DatabaseTooSmall {
                requested: self.k,
                available: sources,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_scale_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.k, c.cache_refresh_epochs), (300, 16, 10, 5));
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.001, 0.9, 0.0005));
        assert_eq!((c.sigma0, c.alpha), (100.0, 0.1));
        c.validate().unwrap();
        TrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig::desk();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("epochs = 3\nsampling = \"uniform\"\n[pretrain]\nsteps = 7\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.sampling, SamplingMode::Uniform);
        assert_eq!(partial.pretrain.steps, 7);
        assert_eq!(partial.lr, 0.001);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("k = 0").is_err());
        assert!(TrainConfig::from_toml_str("lr = -1.0").is_err());
        assert!(matches!(
            TrainConfig::default().validate_for(5),
            Err(Error::DatabaseTooSmall { requested: 10, available: 5 })
        ));
    }
}
