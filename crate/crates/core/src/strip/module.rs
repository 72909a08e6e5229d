//! The strip module: a 5×5 depthwise conv, sequential 1×k and k×1 depthwise
//! strip convs, a pointwise conv, and an elementwise reweighting of the
//! input by the result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvGeom, ConvParams, Module, Tape, TensorRole, Var};
use crate::tensor::Tensor;

pub const SQUARE_KERNEL: usize = 5;
pub const DEFAULT_STRIP_LEN: usize = 19;

/// Which strip convolution runs first in the sequential design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StripOrder {
    #[default]
    HorizontalFirst,
    VerticalFirst,
}

/// How the context stage between the 5×5 conv and the pointwise conv is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModuleDesign {
    /// 1×k then k×1 (or the reverse), the default.
    Sequential,
    /// `DW1×k(Z) + DWk×1(Z)`.
    Parallel,
    /// One `side × side` depthwise conv after the 5×5.
    Square { side: usize },
    /// One dilated `side × side` depthwise conv after the 5×5.
    Dilated { side: usize, dilation: usize },
    /// Sequential strips without the 5×5 conv.
    NoSquare,
    /// A single `side × side` depthwise conv and nothing else before the pointwise conv.
    SingleSquare { side: usize },
}

impl ModuleDesign {
    pub const SQUARE19: ModuleDesign = ModuleDesign::Square { side: 19 };
    pub const DILATED7D3: ModuleDesign = ModuleDesign::Dilated {
        side: 7,
        dilation: 3,
    };

    pub fn has_local_square(self) -> bool {
        !matches!(self, ModuleDesign::NoSquare | ModuleDesign::SingleSquare { .. })
    }

    pub fn uses_strips(self) -> bool {
        matches!(
            self,
            ModuleDesign::Sequential | ModuleDesign::Parallel | ModuleDesign::NoSquare
        )
    }

    pub fn name(self) -> String {
        match self {
            ModuleDesign::Sequential => "sequential".into(),
            ModuleDesign::Parallel => "parallel".into(),
            ModuleDesign::Square { side } => format!("square{side}"),
            ModuleDesign::Dilated { side, dilation } => format!("dilated{side}d{dilation}"),
            ModuleDesign::NoSquare => "no-square".into(),
            ModuleDesign::SingleSquare { side } => format!("single-square{side}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown module design {s:?}"));
        Ok(match s {
            "sequential" => ModuleDesign::Sequential,
            "parallel" => ModuleDesign::Parallel,
            "no-square" => ModuleDesign::NoSquare,
            _ => {
                if let Some(rest) = s.strip_prefix("single-square") {
                    ModuleDesign::SingleSquare {
                        side: rest.parse().map_err(|_| bad())?,
                    }
                } else if let Some(rest) = s.strip_prefix("square") {
                    ModuleDesign::Square {
                        side: rest.parse().map_err(|_| bad())?,
                    }
                } else if let Some(rest) = s.strip_prefix("dilated") {
                    let (side, dil) = rest.split_once('d').ok_or_else(bad)?;
                    ModuleDesign::Dilated {
                        side: side.parse().map_err(|_| bad())?,
                        dilation: dil.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StripModuleParams {
    pub design: ModuleDesign,
    /// 5×5 depthwise.
    pub square: Option<ConvParams>,
    /// 1×k depthwise.
    pub h_strip: Option<ConvParams>,
    /// k×1 depthwise.
    pub v_strip: Option<ConvParams>,
    /// Square or dilated context conv for the non-strip designs.
    pub context: Option<ConvParams>,
    /// 1×1 dense.
    pub pointwise: ConvParams,
}

impl Module for StripModuleParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        let p = |n| crate::nn::join(prefix, n);
        self.square.visit(&p("square"), f);
        self.h_strip.visit(&p("h_strip"), f);
        self.v_strip.visit(&p("v_strip"), f);
        self.context.visit(&p("context"), f);
        self.pointwise.visit(&p("pointwise"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        let p = |n| crate::nn::join(prefix, n);
        self.square.visit_mut(&p("square"), f);
        self.h_strip.visit_mut(&p("h_strip"), f);
        self.v_strip.visit_mut(&p("v_strip"), f);
        self.context.visit_mut(&p("context"), f);
        self.pointwise.visit_mut(&p("pointwise"), f);
    }
}

impl StripModuleParams {
    /// Sequential strip module with strip length `k` (odd).
    pub fn new<R: Rng + ?Sized>(channels: usize, k: usize, std: f64, rng: &mut R) -> Result<Self> {
        Self::with_design(channels, k, ModuleDesign::Sequential, std, rng)
    }

    pub fn with_design<R: Rng + ?Sized>(
        channels: usize,
        k: usize,
        design: ModuleDesign,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("strip module needs at least one channel".into()));
        }
        let odd = |n: usize, what: &str| {
            if n % 2 == 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be odd, got {n}")))
            }
        };
        let square = design
            .has_local_square()
            .then(|| ConvParams::depthwise(channels, SQUARE_KERNEL, SQUARE_KERNEL, std, rng));
        let (h_strip, v_strip) = if design.uses_strips() {
            odd(k, "strip length")?;
            (
                Some(ConvParams::depthwise(channels, 1, k, std, rng)),
                Some(ConvParams::depthwise(channels, k, 1, std, rng)),
            )
        } else {
            (None, None)
        };
        let context = match design {
            ModuleDesign::Square { side } | ModuleDesign::SingleSquare { side } => {
                odd(side, "square side")?;
                Some(ConvParams::depthwise(channels, side, side, std, rng))
            }
            ModuleDesign::Dilated { side, dilation } => {
                odd(side, "dilated side")?;
                if dilation == 0 {
                    return Err(Error::Config("dilation must be positive".into()));
                }
                Some(ConvParams::init(
                    channels,
                    channels,
                    side,
                    side,
                    ConvGeom::same_dilated(side, side, dilation, channels),
                    std,
                    rng,
                )?)
            }
            _ => None,
        };
        Ok(Self {
            design,
            square,
            h_strip,
            v_strip,
            context,
            pointwise: ConvParams::pointwise(channels, channels, std, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.pointwise.out_channels()
    }

    /// Strip length, if the design has strips.
    pub fn strip_len(&self) -> Option<usize> {
        self.h_strip.as_ref().map(|p| p.kernel_size().1)
    }

    /// Sets every depthwise kernel to a centered delta and the pointwise conv
    /// to the identity matrix, all biases zero; the attention map then equals the input.
    pub fn set_identity(&mut self) {
        for conv in [&mut self.square, &mut self.h_strip, &mut self.v_strip, &mut self.context]
            .into_iter()
            .flatten()
        {
            conv.set_identity();
        }
        self.pointwise.set_identity();
    }

    /// Zero kernels and unit pointwise bias: the attention map is all ones and the module is the identity.
    pub fn set_neutral(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.data_mut().fill(0.0));
        self.pointwise.bias.data_mut().fill(1.0);
    }

    /// `(height, width)` of the bounding window the attention map depends on.
    pub fn receptive_field(&self) -> (usize, usize) {
        let ext = |p: &Option<ConvParams>| {
            p.as_ref().map_or((0, 0), |c| {
                let (kh, kw) = c.kernel_size();
                let d = c.geom.dilation;
                (d * (kh - 1), d * (kw - 1))
            })
        };
        let parts = [ext(&self.square), ext(&self.h_strip), ext(&self.v_strip), ext(&self.context)];
        let (h, w) = if self.design == ModuleDesign::Parallel {
            // Sum of branches: the union of the two strip windows after the 5×5.
            let (sh, sw) = parts[0];
            (sh + parts[2].0.max(parts[1].0), sw + parts[1].1.max(parts[2].1))
        } else {
            parts.iter().fold((0, 0), |(a, b), (c, d)| (a + c, b + d))
        };
        (h + 1, w + 1)
    }

    fn require<'a>(&self, conv: &'a Option<ConvParams>, what: &str) -> Result<&'a ConvParams> {
        conv.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "{} design needs a {what} conv",
                self.design.name()
            ))
        })
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var) -> Result<()> {
        let c = tape.value(x).dims()[1];
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "strip module has {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// The attention map `Y = PW(context(DW5×5(X)))`, before the reweighting.
    pub fn attention<'a>(&'a self, tape: &mut Tape<'a>, x: Var, order: StripOrder) -> Result<Var> {
        self.attention_with(tape, x, self.design, order)
    }

    /// Attention map under an explicit design; the parameters must carry the convs the design uses.
    pub fn attention_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        design: ModuleDesign,
        order: StripOrder,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let z = if design.has_local_square() {
            tape.conv(x, self.require(&self.square, "5x5")?)?
        } else {
            x
        };
        let z_hat = match design {
            ModuleDesign::Sequential | ModuleDesign::NoSquare => {
                let h = self.require(&self.h_strip, "1xk")?;
                let v = self.require(&self.v_strip, "kx1")?;
                let (first, second) = match order {
                    StripOrder::HorizontalFirst => (h, v),
                    StripOrder::VerticalFirst => (v, h),
                };
                let mid = tape.conv(z, first)?;
                tape.conv(mid, second)?
            }
            ModuleDesign::Parallel => {
                let h = tape.conv(z, self.require(&self.h_strip, "1xk")?)?;
                let v = tape.conv(z, self.require(&self.v_strip, "kx1")?)?;
                tape.add(h, v)?
            }
            ModuleDesign::Square { .. }
            | ModuleDesign::Dilated { .. }
            | ModuleDesign::SingleSquare { .. } => {
                tape.conv(z, self.require(&self.context, "context")?)?
            }
        };
        tape.conv(z_hat, &self.pointwise)
    }

    /// `X ⊙ Y`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, order: StripOrder) -> Result<Var> {
        let y = self.attention(tape, x, order)?;
        tape.mul(x, y)
    }

    pub fn forward_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        design: ModuleDesign,
        order: StripOrder,
    ) -> Result<Var> {
        let y = self.attention_with(tape, x, design, order)?;
        tape.mul(x, y)
    }
}

/// Strip module output for a plain tensor.
pub fn strip_module_forward(x: &Tensor, p: &StripModuleParams, order: StripOrder) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = p.forward(&mut tape, xv, order)?;
    Ok(tape.value(y).clone())
}

/// Strip module output with the context stage replaced per `design`.
pub fn strip_module_variant_forward(
    x: &Tensor,
    p: &StripModuleParams,
    design: ModuleDesign,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = p.forward_with(&mut tape, xv, design, StripOrder::HorizontalFirst)?;
    Ok(tape.value(y).clone())
}
