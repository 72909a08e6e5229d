//! Four-stage backbone with named variant presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{ConvGeom, ConvParams, Module, NormParams, Tape, TensorRole, Var};
use crate::strip::block::{BasicBlock, BlockCtx};
use crate::strip::module::{ModuleDesign, DEFAULT_STRIP_LEN};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const PRESET_NAMES: [&str; 2] = ["stripnet-t", "stripnet-s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    /// Strip length per stage.
    pub kernel_schedule: [usize; 4],
    /// FFN hidden width as a multiple of the stage width, per stage.
    pub ffn_expansion: [usize; 4],
    pub in_channels: usize,
    #[serde(default = "default_design")]
    pub design: ModuleDesign,
}

fn default_design() -> ModuleDesign {
    ModuleDesign::Sequential
}

impl VariantConfig {
    pub fn stripnet_t() -> Self {
        Self {
            name: "stripnet-t".into(),
            channels: [32, 64, 160, 256],
            depths: [3, 3, 5, 2],
            kernel_schedule: [DEFAULT_STRIP_LEN; 4],
            ffn_expansion: [8, 8, 4, 4],
            in_channels: 3,
            design: ModuleDesign::Sequential,
        }
    }

    pub fn stripnet_s() -> Self {
        Self {
            name: "stripnet-s".into(),
            channels: [64, 128, 320, 512],
            depths: [2, 2, 4, 2],
            kernel_schedule: [DEFAULT_STRIP_LEN; 4],
            ffn_expansion: [8, 8, 4, 4],
            in_channels: 3,
            design: ModuleDesign::Sequential,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "stripnet-t" | "t" => Ok(Self::stripnet_t()),
            "stripnet-s" | "s" => Ok(Self::stripnet_s()),
            _ => Err(Error::Config(format!(
                "unknown variant {name:?}; presets: {}",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    pub fn with_kernels(mut self, schedule: [usize; 4]) -> Self {
        self.kernel_schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.ffn_expansion.contains(&0) {
            return Err(Error::Config("FFN expansion must be positive".into()));
        }
        if self.design.uses_strips() {
            if let Some(k) = self.kernel_schedule.iter().find(|k| *k % 2 == 0) {
                return Err(Error::Config(format!("strip length {k} must be odd")));
            }
        }
        Ok(())
    }
}

/// Patch embedding of a stage: 7×7 stride 4 for the first stage, 3×3 stride 2 after.
pub(crate) fn embed_geometry(stage: usize) -> (usize, ConvGeom) {
    if stage == 0 {
        (7, ConvGeom::strided(4, 3, 1))
    } else {
        (3, ConvGeom::strided(2, 1, 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub embed: ConvParams,
    pub embed_norm: NormParams,
    pub blocks: Vec<BasicBlock>,
    pub out_norm: NormParams,
}

impl_module!(Stage { embed, embed_norm, blocks, out_norm });

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneState {
    pub config: VariantConfig,
    pub stages: Vec<Stage>,
}

impl Module for BackboneState {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.stages.visit(&crate::nn::join(prefix, "stages"), f)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.stages.visit_mut(&crate::nn::join(prefix, "stages"), f)
    }
}

impl BackboneState {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norms.
    pub fn new(config: VariantConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(4);
        let mut in_c = config.in_channels;
        for i in 0..4 {
            let c = config.channels[i];
            let (k, geom) = embed_geometry(i);
            let embed = ConvParams::init(in_c, c, k, k, geom, INIT_STD, &mut rng)?;
            let blocks = (0..config.depths[i])
                .map(|_| {
                    BasicBlock::new(
                        c,
                        config.kernel_schedule[i],
                        config.ffn_expansion[i],
                        config.design,
                        INIT_STD,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                embed,
                embed_norm: NormParams::new(c),
                blocks,
                out_norm: NormParams::new(c),
            });
            in_c = c;
        }
        Ok(Self { config, stages })
    }

    /// Feature pyramid vars, one per stage.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, image: Var, ctx: BlockCtx) -> Result<Vec<Var>> {
        let [_, c, h, w] = tape.value(image).dims();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 32"
            )));
        }
        let mut levels = Vec::with_capacity(4);
        let mut x = image;
        for stage in &self.stages {
            x = tape.conv(x, &stage.embed)?;
            x = tape.norm(x, &stage.embed_norm, ctx.norm)?;
            for block in &stage.blocks {
                x = block.forward(tape, x, ctx)?;
            }
            x = tape.norm(x, &stage.out_norm, ctx.norm)?;
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Four feature maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
pub fn stripnet_forward(image: &Tensor, state: &BackboneState, ctx: BlockCtx) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.input(image.clone());
    let levels = state.forward(&mut tape, x, ctx)?;
    Ok(levels.into_iter().map(|v| tape.value(v).clone()).collect())
}
