//! Named gradient-check suites over every differentiable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{HeadConfig, StripHeadParams, ALL_LAYOUTS};
use crate::nn::{
    gradcheck, ConvGeom, ConvParams, GradcheckReport, LinearParams, Module, NormMode, NormParams, Tape, Var,
};
use crate::strip::block::{BasicBlock, BlockCtx};
use crate::strip::module::{ModuleDesign, StripModuleParams, StripOrder};
use crate::synth::{generate_samples, ExperimentConfig, SceneConfig, ToyConfig, ToyNet};
use crate::tensor::Tensor;

pub const GRADCHECK_EPS: f64 = 1e-3;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradcheckScope {
    Layers,
    StripModule,
    Head,
    ToyNet,
}

impl GradcheckScope {
    pub const ALL: [GradcheckScope; 4] = [Self::Layers, Self::StripModule, Self::Head, Self::ToyNet];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Self::Layers),
            "strip-module" => Ok(Self::StripModule),
            "head" => Ok(Self::Head),
            "toy-net" => Ok(Self::ToyNet),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope {s:?}; expected layers, strip-module, head or toy-net"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub name: String,
    pub max_rel_error: Option<f64>,
    /// Tensor with the largest error.
    pub worst: Option<String>,
    pub checked: usize,
    /// Entries skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
    /// Set when the check could not run, for example on non-finite values.
    pub error: Option<String>,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        // A kink skip now and then is expected; many would hide a real failure.
        self.error.is_none()
            && self.max_rel_error.is_some_and(|e| e < GRADCHECK_TOL)
            && self.skipped * 20 <= self.checked + self.skipped
    }
}

struct Runner<'s> {
    inject_nan: Option<&'s str>,
    cases: Vec<GradcheckCase>,
}

impl Runner<'_> {
    fn run<M, F>(&mut self, name: &str, mut model: M, input: &Tensor, f: F)
    where
        M: Module,
        F: for<'a> Fn(&'a M, &mut Tape<'a>, Var) -> Result<Var>,
    {
        let mut input = input.clone();
        if self.inject_nan == Some(name) {
            let mut done = false;
            model.visit_mut("", &mut |_, t, _| {
                if !done && !t.is_empty() {
                    t.data_mut()[0] = f64::NAN;
                    done = true;
                }
            });
            if !done {
                input.data_mut()[0] = f64::NAN;
            }
        }
        let case = match gradcheck(&mut model, &input, GRADCHECK_EPS, 17, f) {
            Ok(r) => from_report(name, &r),
            Err(e) => GradcheckCase {
                name: name.to_string(),
                max_rel_error: None,
                worst: None,
                checked: 0,
                skipped: 0,
                error: Some(match e {
                    Error::NonFinite(what) => format!("non-finite value in {name}: {what}"),
                    other => other.to_string(),
                }),
            },
        };
        self.cases.push(case);
    }
}

fn from_report(name: &str, r: &GradcheckReport) -> GradcheckCase {
    GradcheckCase {
        name: name.to_string(),
        max_rel_error: Some(r.max_rel_error),
        worst: r.worst().map(|w| w.0.clone()),
        checked: r.checked,
        skipped: r.skipped,
        error: None,
    }
}

/// Gaussian input with every value at least `0.05` away from zero, so kinks are not straddled.
fn away_from_zero(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, 1.0, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn randomize(m: &mut impl Module, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, t, _| *t = Tensor::randn(t.dims(), std, rng));
}

/// Runs the suite for `scope`. `inject_nan` corrupts the first tensor of the named case.
pub fn run_gradcheck_suite(scope: GradcheckScope, inject_nan: Option<&str>) -> Result<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = Runner {
        inject_nan,
        cases: Vec::new(),
    };
    match scope {
        GradcheckScope::Layers => layers(&mut r, &mut rng)?,
        GradcheckScope::StripModule => strip_modules(&mut r, &mut rng)?,
        GradcheckScope::Head => {
            for layout in ALL_LAYOUTS {
                let cfg = HeadConfig {
                    in_channels: 2,
                    grid: 7,
                    num_classes: 2,
                    fc_dim: 6,
                    strip_len: 5,
                    layout,
                };
                let p = StripHeadParams::new(cfg, 0.3, rng.gen())?;
                let x = Tensor::randn([2, 2, 7, 7], 1.0, &mut rng);
                r.run(&format!("head-{}", layout.name()), p, &x, |m, t, x| {
                    Ok(m.forward(t, x, StripOrder::default())?.joined)
                });
            }
        }
        GradcheckScope::ToyNet => {
            let cfg = ExperimentConfig {
                scene: SceneConfig {
                    image_size: 16,
                    scale_range: (0.3, 0.6),
                    ..SceneConfig::default()
                },
                toy: ToyConfig {
                    channels: 4,
                    strip_len: 5,
                    ..ToyConfig::default()
                },
                ..ExperimentConfig::default()
            };
            let data = generate_samples(&cfg, 1, 0, 2)?;
            for (name, design) in [
                ("toy-strip", ModuleDesign::Sequential),
                ("toy-square", ModuleDesign::SingleSquare { side: 5 }),
            ] {
                let net = ToyNet::new(&cfg.toy, design, 7)?;
                let x = net.prepare(&[&data[0].image, &data[1].image])?;
                r.run(name, net, &x, |m, t, x| m.forward(t, x, NormMode::BatchStats));
            }
        }
    }
    Ok(r.cases)
}

fn layers(r: &mut Runner<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let convs = [
        ("conv3x3", 3, 4, (3, 3), ConvGeom::same(3, 3, 1)),
        ("conv4x4-stride2", 2, 3, (4, 4), ConvGeom::strided(2, 1, 1)),
        ("conv3x3-dilated", 2, 2, (3, 3), ConvGeom::same_dilated(3, 3, 2, 1)),
        ("conv-grouped", 4, 4, (3, 3), ConvGeom::same(3, 3, 2)),
        ("depthwise-1x7", 3, 3, (1, 7), ConvGeom::same(1, 7, 3)),
        ("depthwise-7x1", 3, 3, (7, 1), ConvGeom::same(7, 1, 3)),
        ("pointwise", 3, 5, (1, 1), ConvGeom::same(1, 1, 1)),
    ];
    for (name, ic, oc, (kh, kw), geom) in convs {
        let mut p = ConvParams::init(ic, oc, kh, kw, geom, 0.3, rng)?;
        randomize(&mut p.bias, 0.3, rng);
        let x = Tensor::randn([2, ic, 8, 8], 1.0, rng);
        r.run(name, p, &x, |m, t, x| t.conv(x, m));
    }
    let mut lin = LinearParams::init(12, 5, 0.3, rng);
    randomize(&mut lin.bias, 0.3, rng);
    r.run("linear", lin, &Tensor::randn([3, 3, 2, 2], 1.0, rng), |m, t, x| t.linear(x, m));
    for (name, mode) in [("norm-batch", NormMode::BatchStats), ("norm-frozen", NormMode::Frozen)] {
        let mut p = NormParams::new(3);
        p.scale = Tensor::uniform(p.scale.dims(), 0.5, 1.5, rng);
        p.shift = Tensor::randn(p.shift.dims(), 0.5, rng);
        p.running_mean = Tensor::randn(p.shift.dims(), 0.5, rng);
        p.running_var = Tensor::uniform(p.shift.dims(), 0.5, 2.0, rng);
        r.run(name, p, &Tensor::randn([2, 3, 4, 4], 1.0, rng), move |m, t, x| t.norm(x, m, mode));
    }
    let x = away_from_zero([2, 3, 4, 4], rng);
    r.run("relu", (), &x, |_, t, x| t.relu(x));
    r.run("gelu", (), &x, |_, t, x| t.gelu(x));
    r.run("global-avg-pool", (), &x, |_, t, x| t.global_avg_pool(x));
    let other = Tensor::randn([2, 3, 4, 4], 1.0, rng);
    r.run("mul", other.clone(), &x, |m, t, x| {
        let p = t.param(m);
        t.mul(x, p)
    });
    r.run("add", other.clone(), &x, |m, t, x| {
        let p = t.param(m);
        t.add(x, p)
    });
    r.run("concat", other, &x, |m, t, x| {
        let p = t.param(m);
        t.concat_channels(&[p, x])
    });
    let block = BasicBlock::new(4, 5, 2, ModuleDesign::Sequential, 0.3, rng)?;
    r.run("basic-block", block, &Tensor::randn([2, 4, 6, 6], 1.0, rng), |m, t, x| {
        m.forward(t, x, BlockCtx::default())
    });
    Ok(())
}

fn strip_modules(r: &mut Runner<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let designs = [
        ModuleDesign::Sequential,
        ModuleDesign::Parallel,
        ModuleDesign::Square { side: 5 },
        ModuleDesign::Dilated { side: 3, dilation: 2 },
        ModuleDesign::NoSquare,
        ModuleDesign::SingleSquare { side: 7 },
    ];
    for design in designs {
        let mut p = StripModuleParams::with_design(3, 7, design, 0.3, rng)?;
        p.visit_mut("", &mut |name, t, _| {
            if name.ends_with("bias") {
                *t = Tensor::randn(t.dims(), 0.5, rng);
            }
        });
        let x = Tensor::randn([1, 3, 9, 9], 1.0, rng);
        let orders: &[StripOrder] = if design == ModuleDesign::Sequential {
            &[StripOrder::HorizontalFirst, StripOrder::VerticalFirst]
        } else {
            &[StripOrder::HorizontalFirst]
        };
        for &order in orders {
            let name = match order {
                StripOrder::HorizontalFirst => format!("strip-module-{}", design.name()),
                StripOrder::VerticalFirst => format!("strip-module-{}-vertical-first", design.name()),
            };
            r.run(&name, p.clone(), &x, move |m, t, x| m.forward(t, x, order));
        }
    }
    Ok(())
}
