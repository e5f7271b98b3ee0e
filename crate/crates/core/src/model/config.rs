use crate::error::{Error, Result};

/// Every size the network needs. Field order is also the on-disk order of
/// the config block in weight files.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_frames: usize,
    pub num_classes: usize,
    /// Pixel-unshuffle factor of the input downsampler.
    pub downsample_r: usize,
    pub shallow_channels: [usize; 3],
    pub stem_channels: usize,
    pub ge_stage_channels: [usize; 3],
    pub ge_expansion: usize,
    pub ge_layers: [usize; 3],
    pub fusion_channels: usize,
    pub head_channels: usize,
    /// Width of the hidden layer in each auxiliary head.
    pub aux_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetworkConfig {
    /// Full-size network (1,725,720 learnable parameters).
    pub fn reference() -> Self {
        NetworkConfig {
            in_frames: 3,
            num_classes: 3,
            downsample_r: 2,
            shallow_channels: [32, 48, 96],
            stem_channels: 16,
            ge_stage_channels: [16, 32, 64],
            ge_expansion: 6,
            ge_layers: [2, 3, 4],
            fusion_channels: 96,
            head_channels: 96,
            aux_channels: 16,
        }
    }

    /// Same topology with every width shrunk; used for gradient checks.
    pub fn tiny() -> Self {
        NetworkConfig {
            shallow_channels: [4, 4, 8],
            stem_channels: 4,
            ge_stage_channels: [4, 8, 8],
            ge_expansion: 2,
            fusion_channels: 8,
            head_channels: 8,
            aux_channels: 4,
            ..Self::reference()
        }
    }

    /// Mid-size network for CPU training runs.
    pub fn small() -> Self {
        NetworkConfig {
            shallow_channels: [16, 24, 32],
            stem_channels: 16,
            ge_stage_channels: [16, 32, 48],
            ge_expansion: 4,
            fusion_channels: 32,
            head_channels: 32,
            aux_channels: 8,
            ..Self::reference()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "small" => Some(Self::small()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Channels entering both streams after the input downsampler.
    pub fn downsampled_channels(&self) -> usize {
        self.in_frames * self.downsample_r * self.downsample_r
    }

    /// Input sizes must be multiples of this.
    pub const SIZE_MULTIPLE: usize = 64;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_frames", self.in_frames),
            ("downsample_r", self.downsample_r),
            ("stem_channels", self.stem_channels),
            ("ge_expansion", self.ge_expansion),
            ("fusion_channels", self.fusion_channels),
            ("head_channels", self.head_channels),
            ("aux_channels", self.aux_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{} must be positive", name)));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.num_classes > u8::MAX as usize {
            return Err(Error::invalid("num_classes must fit in a byte"));
        }
        if self.shallow_channels.contains(&0) || self.ge_stage_channels.contains(&0) {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.ge_layers.contains(&0) {
            return Err(Error::invalid("every GE stage needs at least one layer"));
        }
        if self.stem_channels < 2 || !self.stem_channels.is_multiple_of(2) {
            return Err(Error::invalid("stem_channels must be even"));
        }
        Ok(())
    }

    /// Checks an input height/width against the size contract.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = Self::SIZE_MULTIPLE;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(format!("input size {}x{} is not a positive multiple of {}", h, w, m)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["reference", "small", "tiny"] {
            NetworkConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(NetworkConfig::preset("huge").is_none());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetworkConfig::tiny();
        c.stem_channels = 3;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.ge_layers = [2, 0, 4];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_size_rule() {
        let c = NetworkConfig::tiny();
        assert!(c.check_input(64, 128).is_ok());
        assert!(c.check_input(100, 100).is_err());
        assert!(c.check_input(0, 64).is_err());
    }
}
