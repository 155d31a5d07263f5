//! U-shaped saliency network hosting AGCMs on its skip connections.
//!
//! Five encoder stages each halve the resolution. Every stage output passes a
//! 1×1 skip convolution; selected stages (4 and 5 by default) then run through
//! an AGCM, which appends `K` correlation channels. The deepest skip also
//! passes an ASPP block. The decoder upsamples from stage 5 to the input
//! resolution and ends in a sigmoid mask.

mod aspp;
mod model;

pub use aspp::Aspp;
pub use model::SaliencyNet;

use serde::{Deserialize, Serialize};

use crate::agcm::AgcmOptions;
use crate::error::{Error, Result};
use crate::nn::Conv2d;

pub const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// `[H₀, W₀]`.
    pub input_size: [usize; 2],
    /// Channel width of each encoder stage.
    pub widths: [usize; STAGES],
    /// 1-based stages whose skip connection carries an AGCM.
    pub agcm_stages: Vec<usize>,
    pub agcm: AgcmOptions,
    pub aspp_rates: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: [64, 64],
            widths: [8, 16, 24, 32, 40],
            agcm_stages: vec![4, 5],
            agcm: AgcmOptions::default(),
            aspp_rates: vec![1, 2, 4],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        let factor = 1 << STAGES;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input size {h}×{w} must be a positive multiple of {factor} for {STAGES} halvings"
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        let mut seen = [false; STAGES];
        for &s in &self.agcm_stages {
            if !(1..=STAGES).contains(&s) || std::mem::replace(&mut seen[s - 1], true) {
                return Err(Error::Config(format!(
                    "invalid or repeated AGCM stage {s} in {:?}",
                    self.agcm_stages
                )));
            }
            self.agcm.with_channels(self.widths[s - 1]).validate()?;
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::Config(format!("invalid ASPP rates {:?}", self.aspp_rates)));
        }
        Ok(())
    }

    pub fn has_agcm(&self, stage: usize) -> bool {
        self.agcm_stages.contains(&stage)
    }

    /// Spatial size of stage `s` (1-based).
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.input_size[0] >> stage, self.input_size[1] >> stage)
    }

    /// Channels of the skip tensor handed to the decoder at stage `s`.
    pub fn skip_width(&self, stage: usize) -> usize {
        let c = self.widths[stage - 1];
        if self.has_agcm(stage) {
            c + self.agcm.prototypes
        } else {
            c
        }
    }

    /// Closed-form scalar parameter count of the whole network.
    pub fn param_count(&self) -> usize {
        let conv = Conv2d::param_count;
        let mut total = 0;
        let mut prev = 3;
        for &c in &self.widths {
            total += conv(prev, c, 3) + conv(c, c, 3) + conv(c, c, 3) + conv(c, c, 1);
            prev = c;
        }
        for s in 1..=STAGES {
            if self.has_agcm(s) {
                total += self.agcm.with_channels(self.widths[s - 1]).param_count();
            }
        }
        let w5 = self.skip_width(STAGES);
        total += Aspp::param_count(w5, self.aspp_rates.len());
        let mut d = w5;
        for s in (1..STAGES).rev() {
            let c = self.widths[s - 1];
            total += conv(d + self.skip_width(s), c, 3);
            d = c;
        }
        total += conv(d + 3, self.widths[0], 3) + conv(self.widths[0], 1, 1);
        total
    }

    /// Change in parameter count from enabling an AGCM at `stage`, all else fixed.
    pub fn agcm_param_delta(&self, stage: usize) -> usize {
        let mut with = self.clone();
        let mut without = self.clone();
        without.agcm_stages.retain(|&s| s != stage);
        if !with.agcm_stages.contains(&stage) {
            with.agcm_stages.push(stage);
        }
        with.param_count() - without.param_count()
    }
}
