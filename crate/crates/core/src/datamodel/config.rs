use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the segmentation and adversarial objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Cross-entropy weight.
    pub lambda1: f64,
    /// Dice weight.
    pub lambda2: f64,
    /// Weight of the generator-side adversarial term in the overall objective.
    pub lambda_adv: f64,
    /// Weight of the entropy map in the target-side adversarial weighting.
    pub lambda_entr: f64,
    /// Floor added to the entropy weighting.
    pub entropy_epsilon: f64,
    /// Use the literal additive form `(λ F + ε) + log(1 − D)` instead of the
    /// multiplicative weighting.
    pub additive_entropy: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1.0,
            lambda_adv: 0.001,
            lambda_entr: 1.0,
            entropy_epsilon: 0.4,
            additive_entropy: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_adv", self.lambda_adv),
            ("lambda_entr", self.lambda_entr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.entropy_epsilon > 0.0 && self.entropy_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "entropy_epsilon must be > 0, got {}",
                self.entropy_epsilon
            )));
        }
        Ok(())
    }
}

/// Network shapes shared by both peers and discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first discriminator stage; later stages double it.
    pub disc_base_channels: usize,
    /// Zero the final segmenter layer so untrained peers predict uniformly.
    pub zero_init_head: bool,
    /// Standardize each input channel to zero mean and unit variance per
    /// image before the first convolution.
    pub standardize_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 3,
            disc_base_channels: 16,
            zero_init_head: false,
            standardize_input: false,
        }
    }
}

/// Which of the three method components are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Strategy {
    /// Two peers exchanging small-loss subsets.
    pub cross_denoising: bool,
    /// Class-wise pseudo-label exchange on the target domain.
    pub cicl: bool,
    /// Boundary-weighted loss on samples flagged noisy.
    pub noise_tolerant: bool,
}

impl Default for Strategy {
    fn default() -> Self {
        Self::full()
    }
}

impl Strategy {
    pub const fn none() -> Self {
        Self {
            cross_denoising: false,
            cicl: false,
            noise_tolerant: false,
        }
    }

    pub const fn cd() -> Self {
        Self {
            cross_denoising: true,
            cicl: false,
            noise_tolerant: false,
        }
    }

    pub const fn cd_cicl() -> Self {
        Self {
            cross_denoising: true,
            cicl: true,
            noise_tolerant: false,
        }
    }

    pub const fn full() -> Self {
        Self {
            cross_denoising: true,
            cicl: true,
            noise_tolerant: true,
        }
    }

    /// The four ablation rows in increasing order of components.
    pub const ABLATION: [Strategy; 4] = [
        Strategy::none(),
        Strategy::cd(),
        Strategy::cd_cicl(),
        Strategy::full(),
    ];

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.cross_denoising {
            parts.push("CD");
        }
        if self.cicl {
            parts.push("CICL");
        }
        if self.noise_tolerant {
            parts.push("NTL");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Strategy::none();
        if s.trim() == "none" {
            return Ok(out);
        }
        for part in s.split('+') {
            match part.trim().to_ascii_uppercase().as_str() {
                "CD" => out.cross_denoising = true,
                "CICL" => out.cicl = true,
                "NTL" => out.noise_tolerant = true,
                other => {
                    return Err(Error::Config(format!("unknown strategy component '{other}'")))
                }
            }
        }
        Ok(out)
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Expected fraction of corrupted source samples (β).
    pub noise_ratio: f64,
    /// Epochs (T).
    pub epochs: usize,
    /// Sampled subsets per epoch (K).
    pub outer_iterations: usize,
    /// Updates per subset (M).
    pub inner_iterations: usize,
    /// Size of each sampled source subset.
    pub batch_size: usize,
    pub learning_rate_seg: f64,
    pub learning_rate_disc: f64,
    pub momentum: f64,
    /// Segmenter gradients are rescaled to at most this global L2 norm.
    pub grad_clip_norm: Option<f64>,
    pub loss: LossConfig,
    /// Floor of the remember rate.
    pub gamma0: f64,
    /// Quantile of selected losses above which a sample is routed to the
    /// noise-tolerant loss.
    pub omega_quantile: f64,
    /// Per-class confidence quantiles for pseudo labels; a single value is
    /// broadcast to every class.
    pub pseudo_quantiles: Vec<f64>,
    /// Pseudo-label rounds per scheduled epoch (I).
    pub cicl_iterations: usize,
    /// Fine-tuning updates per peer per pseudo-label round.
    pub cicl_steps: usize,
    /// First epoch (1-based) after which pseudo-label rounds run; `None`
    /// means `max(1, T / 2)`.
    pub cicl_start_epoch: Option<usize>,
    /// When false, pseudo labels only gate the adversarial term.
    pub pseudo_supervise_segmenter: bool,
    /// Clean-label epochs run before noisy training (pretrain emulation).
    pub warm_start_epochs: usize,
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            noise_ratio: 0.5,
            epochs: 10,
            outer_iterations: 5,
            inner_iterations: 1,
            batch_size: 8,
            learning_rate_seg: 2.5e-4,
            learning_rate_disc: 1e-4,
            momentum: 0.9,
            grad_clip_norm: Some(100.0),
            loss: LossConfig::default(),
            gamma0: 0.1,
            omega_quantile: 0.7,
            pseudo_quantiles: vec![0.2],
            cicl_iterations: 1,
            cicl_steps: 2,
            cicl_start_epoch: None,
            pseudo_supervise_segmenter: true,
            warm_start_epochs: 0,
            strategy: Strategy::full(),
            model: ModelConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::Config(format!(
                "noise_ratio must be in [0, 1), got {}",
                self.noise_ratio
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("outer_iterations", self.outer_iterations),
            ("inner_iterations", self.inner_iterations),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("learning_rate_seg", self.learning_rate_seg),
            ("learning_rate_disc", self.learning_rate_disc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.omega_quantile > 0.0 && self.omega_quantile < 1.0) {
            return Err(Error::Config(format!(
                "omega_quantile must be in (0, 1), got {}",
                self.omega_quantile
            )));
        }
        if let Some(c) = self.grad_clip_norm.filter(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("grad_clip_norm must be > 0, got {c}")));
        }
        if !(0.0..=1.0).contains(&self.gamma0) {
            return Err(Error::Config(format!("gamma0 must be in [0, 1], got {}", self.gamma0)));
        }
        if self.pseudo_quantiles.is_empty()
            || (self.pseudo_quantiles.len() != 1
                && self.pseudo_quantiles.len() != self.model.num_classes)
        {
            return Err(Error::Config(format!(
                "pseudo_quantiles needs 1 or {} entries, got {}",
                self.model.num_classes,
                self.pseudo_quantiles.len()
            )));
        }
        if let Some(q) = self.pseudo_quantiles.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
            return Err(Error::Config(format!("pseudo quantile {q} not in (0, 1)")));
        }
        if self.model.num_classes < 2 || self.model.in_channels == 0 {
            return Err(Error::Config("model needs >= 2 classes and >= 1 input channel".into()));
        }
        if self.model.disc_base_channels == 0 {
            return Err(Error::Config("disc_base_channels must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Per-class pseudo-label quantiles, broadcasting a single value.
    pub fn class_quantiles(&self) -> Vec<f64> {
        if self.pseudo_quantiles.len() == 1 {
            vec![self.pseudo_quantiles[0]; self.model.num_classes]
        } else {
            self.pseudo_quantiles.clone()
        }
    }

    pub fn cicl_start(&self) -> usize {
        self.cicl_start_epoch.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
