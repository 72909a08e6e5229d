//! Residual sub-blocks and the basic block of the backbone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{ConvParams, NormMode, NormParams, Tape, Var};
use crate::strip::module::{ModuleDesign, StripModuleParams, StripOrder};

/// Options shared by every block in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCtx {
    pub norm: NormMode,
    pub order: StripOrder,
}

impl Default for BlockCtx {
    fn default() -> Self {
        Self {
            norm: NormMode::BatchStats,
            order: StripOrder::HorizontalFirst,
        }
    }
}

/// `x + PW2(StripModule(GELU(PW1(norm(x)))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct StripSubBlock {
    pub norm: NormParams,
    pub proj_in: ConvParams,
    pub module: StripModuleParams,
    pub proj_out: ConvParams,
}

impl_module!(StripSubBlock { norm, proj_in, module, proj_out });

impl StripSubBlock {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        k: usize,
        design: ModuleDesign,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: NormParams::new(channels),
            proj_in: ConvParams::pointwise(channels, channels, std, rng),
            module: StripModuleParams::with_design(channels, k, design, std, rng)?,
            proj_out: ConvParams::pointwise(channels, channels, std, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.norm.channels()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, ctx: BlockCtx) -> Result<Var> {
        check_channels(tape, x, self.channels(), "strip sub-block")?;
        let h = tape.norm(x, &self.norm, ctx.norm)?;
        let h = tape.conv(h, &self.proj_in)?;
        let h = tape.gelu(h)?;
        let h = self.module.forward(tape, h, ctx.order)?;
        let h = tape.conv(h, &self.proj_out)?;
        tape.add(x, h)
    }
}

/// `x + PW_project(GELU(DW3×3(PW_expand(norm(x)))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnSubBlock {
    pub norm: NormParams,
    pub expand: ConvParams,
    pub depthwise: ConvParams,
    pub project: ConvParams,
}

impl_module!(FfnSubBlock { norm, expand, depthwise, project });

impl FfnSubBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, expansion: usize, std: f64, rng: &mut R) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("FFN expansion must be positive".into()));
        }
        let hidden = channels * expansion;
        Ok(Self {
            norm: NormParams::new(channels),
            expand: ConvParams::pointwise(channels, hidden, std, rng),
            depthwise: ConvParams::depthwise(hidden, 3, 3, std, rng),
            project: ConvParams::pointwise(hidden, channels, std, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.norm.channels()
    }

    pub fn hidden_width(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, ctx: BlockCtx) -> Result<Var> {
        check_channels(tape, x, self.channels(), "FFN sub-block")?;
        let h = tape.norm(x, &self.norm, ctx.norm)?;
        let h = tape.conv(h, &self.expand)?;
        let h = tape.conv(h, &self.depthwise)?;
        let h = tape.gelu(h)?;
        let h = tape.conv(h, &self.project)?;
        tape.add(x, h)
    }
}

/// Strip sub-block followed by FFN sub-block.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub strip: StripSubBlock,
    pub ffn: FfnSubBlock,
}

impl_module!(BasicBlock { strip, ffn });

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        k: usize,
        expansion: usize,
        design: ModuleDesign,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            strip: StripSubBlock::new(channels, k, design, std, rng)?,
            ffn: FfnSubBlock::new(channels, expansion, std, rng)?,
        })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, ctx: BlockCtx) -> Result<Var> {
        let h = self.strip.forward(tape, x, ctx)?;
        self.ffn.forward(tape, h, ctx)
    }
}

fn check_channels(tape: &Tape<'_>, x: Var, expect: usize, what: &str) -> Result<()> {
    let c = tape.value(x).dims()[1];
    if c != expect {
        return Err(Error::Shape(format!("{what} has {expect} channels, input has {c}")));
    }
    Ok(())
}
