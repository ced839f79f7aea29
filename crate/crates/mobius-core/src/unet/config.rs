//! Model configuration and the derived block layout.

use crate::error::{MobiusError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WiringMode {
    Serial,
    Parallel,
}

impl WiringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WiringMode::Serial => "serial",
            WiringMode::Parallel => "parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(WiringMode::Serial),
            "parallel" => Ok(WiringMode::Parallel),
            _ => Err(MobiusError::InvalidConfig(format!(
                "mode must be serial or parallel, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub mode: WiringMode,
    pub in_channels: usize,
    pub base_width: usize,
    /// One multiplier per down block; topology is fixed at 4 down / 1 mid / 4 up.
    pub channel_multipliers: Vec<usize>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_timesteps: usize,
    pub cond_vocab: usize,
    pub seed: u64,
    /// Fusion conv kernel (3 by default; 1 supported for sensitivity checks).
    pub fusion_kernel: usize,
}

impl UNetConfig {
    /// The default desk-scale configuration: smallest shape that exercises
    /// all four resolutions and both bridges.
    pub fn toy(mode: WiringMode) -> Self {
        UNetConfig {
            mode,
            in_channels: 4,
            base_width: 16,
            channel_multipliers: vec![1, 2, 2, 4],
            frames: 8,
            height: 32,
            width: 32,
            num_timesteps: 100,
            cond_vocab: 4,
            seed: PRETRAIN_SEED,
            fusion_kernel: 3,
        }
    }

    /// A much smaller shape for fast unit tests.
    pub fn tiny(mode: WiringMode) -> Self {
        UNetConfig {
            mode,
            in_channels: 2,
            base_width: 8,
            channel_multipliers: vec![1, 2, 2, 2],
            frames: 3,
            height: 16,
            width: 16,
            num_timesteps: 20,
            cond_vocab: 3,
            seed: PRETRAIN_SEED,
            fusion_kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() != 4 {
            return Err(MobiusError::InvalidConfig(format!(
                "need exactly 4 channel multipliers, got {}",
                self.channel_multipliers.len()
            )));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(MobiusError::InvalidConfig(
                "channel multipliers must be positive".into(),
            ));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(MobiusError::InvalidConfig(
                "channel widths must be positive".into(),
            ));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(MobiusError::InvalidConfig(format!(
                "height/width must be divisible by 8 (three downsamples), got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(MobiusError::InvalidConfig("frames must be >= 1".into()));
        }
        if self.num_timesteps == 0 {
            return Err(MobiusError::InvalidConfig("num_timesteps must be >= 1".into()));
        }
        if self.cond_vocab == 0 {
            return Err(MobiusError::InvalidConfig("cond_vocab must be >= 1".into()));
        }
        if self.fusion_kernel != 1 && self.fusion_kernel != 3 {
            return Err(MobiusError::InvalidConfig(format!(
                "fusion_kernel must be 1 or 3, got {}",
                self.fusion_kernel
            )));
        }
        Ok(())
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.base_width
    }

    /// Level widths: base_width times each multiplier.
    pub fn widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    /// The nine block specs in forward order: down.0..3, mid.0, up.0..3.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let w = self.widths();
        let mut out = Vec::with_capacity(9);
        let mut cin = self.base_width;
        for (i, &c) in w.iter().enumerate() {
            out.push(BlockSpec {
                name: format!("down.{i}"),
                cin,
                c,
                bridge_in: None,
            });
            cin = c;
        }
        out.push(BlockSpec {
            name: "mid.0".into(),
            cin: w[3],
            c: w[3],
            bridge_in: None,
        });
        // Up block k consumes concat(previous output, skip from down block 3-k).
        let mut prev = w[3];
        for k in 0..4 {
            let skip = w[3 - k];
            let target = if k == 0 { w[3] } else { w[3 - k] };
            out.push(BlockSpec {
                name: format!("up.{k}"),
                cin: target,
                c: target,
                bridge_in: Some(prev + skip),
            });
            prev = target;
        }
        out
    }
}

/// Fixed seed for the deterministic "pretrained" spatial weights used by
/// delta-tuning runs.
pub const PRETRAIN_SEED: u64 = 0x4D4F_4249;

/// One block unit: a spatial conv stack, spatial attention, temporal conv
/// stack and temporal attention over channel width `c`.
#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub name: String,
    /// Incoming width before this block (pre-bridge for up blocks).
    pub cin: usize,
    pub c: usize,
    /// Concatenated width entering the bridge adapter (up blocks only).
    pub bridge_in: Option<usize>,
}

impl BlockSpec {
    /// Width entering the spatial conv stack: up blocks are adapted to `c`
    /// by their bridge before the stack runs.
    pub fn stack_in(&self) -> usize {
        if self.bridge_in.is_some() {
            self.c
        } else {
            self.cin
        }
    }

    /// Whether the parallel-mode temporal branch needs a width adapter at
    /// block entry (the depthwise temporal conv cannot change widths).
    pub fn needs_t_adapt(&self) -> bool {
        self.bridge_in.is_none() && self.cin != self.c
    }
}

/// Residual conv units per spatial stack.
pub const SC_UNITS: usize = 4;

/// Group count for group normalization at a given width.
pub fn gn_groups(c: usize) -> usize {
    // gcd(c, 8): 8 groups when divisible, graceful fallback for tiny widths
    let mut a = c;
    let mut b = 8usize;
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_block_layout() {
        let cfg = UNetConfig::toy(WiringMode::Parallel);
        cfg.validate().unwrap();
        let blocks = cfg.blocks();
        assert_eq!(blocks.len(), 9);
        let widths: Vec<(usize, usize)> = blocks.iter().map(|b| (b.cin, b.c)).collect();
        assert_eq!(
            widths,
            vec![
                (16, 16),
                (16, 32),
                (32, 32),
                (32, 64),
                (64, 64),
                (64, 64),
                (32, 32),
                (32, 32),
                (16, 16),
            ]
        );
        let bridge_ins: Vec<Option<usize>> = blocks.iter().map(|b| b.bridge_in).collect();
        assert_eq!(
            bridge_ins,
            vec![
                None,
                None,
                None,
                None,
                None,
                Some(128),
                Some(96),
                Some(64),
                Some(48),
            ]
        );
        let adapters: Vec<bool> = blocks.iter().map(|b| b.needs_t_adapt()).collect();
        assert_eq!(
            adapters,
            vec![false, true, false, true, false, false, false, false, false]
        );
    }

    #[test]
    fn validation_rejects_bad_multipliers() {
        let mut cfg = UNetConfig::toy(WiringMode::Serial);
        cfg.channel_multipliers = vec![1, 2];
        assert!(cfg.validate().is_err());
        cfg.channel_multipliers = vec![1, 2, 0, 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gn_groups_divides_width() {
        for c in [1, 2, 3, 4, 6, 8, 12, 16, 32, 64] {
            assert_eq!(c % gn_groups(c), 0, "c={c}");
        }
        assert_eq!(gn_groups(16), 8);
        assert_eq!(gn_groups(12), 4);
    }
}
