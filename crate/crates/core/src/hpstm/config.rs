use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub joints: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub covariance_head: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Gelu
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 31,
            joints: 24,
            d_model: 128,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            ff_width: 256,
            dropout: 0.1,
            covariance_head: true,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_width: 64,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Width of the per-frame pose parameter vector: root (3), quaternions (4J), lengths (J).
    pub fn pose_width(&self) -> usize {
        3 + 5 * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.window < 3 {
            return fail(format!("window must be >= 3, got {}", self.window));
        }
        if self.joints < 2 {
            return fail(format!("need at least 2 joints, got {}", self.joints));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.ff_width == 0 {
            return fail("feed-forward width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
