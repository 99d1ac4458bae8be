use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a hierarchical VAE.
///
/// Layer 0 is the coarsest stochastic layer; `resolutions` and `z_channels`
/// list one entry per layer from top to bottom, so the stochastic depth `K`
/// is `resolutions.len() - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub width: usize,
    pub bottleneck_width: usize,
    pub resolutions: Vec<usize>,
    pub z_channels: Vec<usize>,
    pub encoder_blocks_per_resolution: usize,
    pub mixture_components: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy32()
    }
}

impl ModelConfig {
    /// Six stochastic layers on 32x32 images.
    pub fn toy32() -> Self {
        Self {
            image_size: 32,
            width: 24,
            bottleneck_width: 8,
            resolutions: vec![4, 4, 8, 8, 16, 32],
            z_channels: vec![4, 4, 4, 4, 4, 4],
            encoder_blocks_per_resolution: 1,
            mixture_components: 5,
        }
    }

    /// Seven stochastic layers on 64x64 images.
    pub fn toy64() -> Self {
        Self {
            image_size: 64,
            width: 24,
            bottleneck_width: 8,
            resolutions: vec![4, 8, 8, 16, 16, 32, 64],
            z_channels: vec![4, 4, 4, 4, 4, 4, 4],
            encoder_blocks_per_resolution: 1,
            mixture_components: 5,
        }
    }

    /// Four stochastic layers on 16x16 images, small enough for unit tests.
    pub fn tiny16() -> Self {
        Self {
            image_size: 16,
            width: 8,
            bottleneck_width: 4,
            resolutions: vec![2, 4, 8, 16],
            z_channels: vec![2, 2, 2, 2],
            encoder_blocks_per_resolution: 1,
            mixture_components: 2,
        }
    }

    /// Stochastic depth `K` (index of the bottom layer).
    pub fn depth(&self) -> usize {
        self.resolutions.len() - 1
    }

    pub fn num_layers(&self) -> usize {
        self.resolutions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.resolutions.len() < 2 {
            return fail("need at least two stochastic layers (K >= 1)".into());
        }
        if self.resolutions.len() != self.z_channels.len() {
            return fail(format!(
                "{} resolutions but {} latent channel counts",
                self.resolutions.len(),
                self.z_channels.len()
            ));
        }
        if self.image_size == 0 || self.width == 0 || self.bottleneck_width == 0 {
            return fail("image size and widths must be positive".into());
        }
        if self.mixture_components == 0 || self.encoder_blocks_per_resolution == 0 {
            return fail("mixture components and encoder blocks must be positive".into());
        }
        if self.z_channels.contains(&0) {
            return fail("latent channel counts must be positive".into());
        }
        for (j, &r) in self.resolutions.iter().enumerate() {
            if r == 0 || self.image_size % r != 0 {
                return fail(format!("layer {j} resolution {r} does not divide image size {}", self.image_size));
            }
            if j > 0 {
                let prev = self.resolutions[j - 1];
                if r < prev {
                    return fail(format!("resolutions must be non-decreasing (layer {j}: {prev} -> {r})"));
                }
                if r % prev != 0 {
                    return fail(format!("layer {j} resolution {r} is not a multiple of {prev}"));
                }
            }
        }
        Ok(())
    }

    /// Distinct resolutions visited by the bottom-up path, finest first.
    /// Always starts at the image size.
    pub fn encoder_resolutions(&self) -> Vec<usize> {
        let mut res: Vec<usize> = self.resolutions.clone();
        res.push(self.image_size);
        res.sort_unstable_by(|a, b| b.cmp(a));
        res.dedup();
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_are_valid() {
        ModelConfig::toy32().validate().unwrap();
        ModelConfig::toy64().validate().unwrap();
        ModelConfig::tiny16().validate().unwrap();
        assert_eq!(ModelConfig::toy32().depth(), 5);
        assert_eq!(ModelConfig::toy32().encoder_resolutions(), vec![32, 16, 8, 4]);
    }

    #[test]
    fn rejects_bad_schedules() {
        let mut c = ModelConfig::toy32();
        c.resolutions = vec![8, 4, 16, 16, 16, 32];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy32();
        c.resolutions = vec![4];
        c.z_channels = vec![4];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy32();
        c.resolutions[0] = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy32();
        c.z_channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let c = ModelConfig::toy64();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let bad = format!("{text}\nsurprise = 1\n");
        assert!(toml::from_str::<ModelConfig>(&bad).is_err());
    }
}
