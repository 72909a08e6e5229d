use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::layout::{BranchKind, BranchTarget, HeadLayout};
use crate::nn::{join, ConvGeom, ConvParams, LinearParams, Module, Tape, TensorRole, Var};
use crate::strip::module::{StripModuleParams, StripOrder, DEFAULT_STRIP_LEN};
use crate::tensor::Tensor;

pub const ROI_GRID: usize = 7;
pub const ROI_CHANNELS: usize = 256;
pub const FC_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub grid: usize,
    /// Foreground classes; logits have one more entry for background.
    pub num_classes: usize,
    pub fc_dim: usize,
    pub strip_len: usize,
    pub layout: HeadLayout,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            in_channels: ROI_CHANNELS,
            grid: ROI_GRID,
            num_classes: 15,
            fc_dim: FC_DIM,
            strip_len: DEFAULT_STRIP_LEN,
            layout: HeadLayout::default(),
        }
    }
}

impl HeadConfig {
    pub fn flat_dim(&self) -> usize {
        self.in_channels * self.grid * self.grid
    }
}

/// One non-shared branch of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub target: BranchTarget,
    pub kind: BranchKind,
    pub conv1: Option<ConvParams>,
    pub conv2: Option<ConvParams>,
    pub strip: Option<StripModuleParams>,
    pub fc1: Option<LinearParams>,
    pub fc2: Option<LinearParams>,
    pub out: LinearParams,
}

impl Module for Branch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        let p = |n| join(prefix, n);
        self.conv1.visit(&p("conv1"), f);
        self.conv2.visit(&p("conv2"), f);
        self.strip.visit(&p("strip"), f);
        self.fc1.visit(&p("fc1"), f);
        self.fc2.visit(&p("fc2"), f);
        self.out.visit(&p("out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        let p = |n| join(prefix, n);
        self.conv1.visit_mut(&p("conv1"), f);
        self.conv2.visit_mut(&p("conv2"), f);
        self.strip.visit_mut(&p("strip"), f);
        self.fc1.visit_mut(&p("fc1"), f);
        self.fc2.visit_mut(&p("fc2"), f);
        self.out.visit_mut(&p("out"), f);
    }
}

impl Branch {
    fn new(target: BranchTarget, kind: BranchKind, cfg: &HeadConfig, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.in_channels;
        let conv = |rng: &mut ChaCha8Rng| ConvParams::init(c, c, 3, 3, ConvGeom::same(3, 3, 1), std, rng);
        let mut b = Branch {
            target,
            kind,
            conv1: None,
            conv2: None,
            strip: None,
            fc1: None,
            fc2: None,
            out: LinearParams::zeros(1, 1),
        };
        let feat = match kind {
            BranchKind::Conv => {
                b.conv1 = Some(conv(rng)?);
                b.conv2 = Some(conv(rng)?);
                cfg.flat_dim()
            }
            BranchKind::Strip => {
                b.conv1 = Some(conv(rng)?);
                b.strip = Some(StripModuleParams::new(c, cfg.strip_len, std, rng)?);
                cfg.flat_dim()
            }
            BranchKind::Fc => {
                b.fc1 = Some(LinearParams::init(cfg.flat_dim(), cfg.fc_dim, std, rng));
                b.fc2 = Some(LinearParams::init(cfg.fc_dim, cfg.fc_dim, std, rng));
                cfg.fc_dim
            }
        };
        b.out = LinearParams::init(feat, target.width(), std, rng);
        Ok(b)
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, roi: Var, order: StripOrder) -> Result<Var> {
        let missing = |what: &str| Error::Config(format!("{:?} branch lacks {what}", self.kind));
        let feat = match self.kind {
            BranchKind::Conv => {
                let a = tape.conv(roi, self.conv1.as_ref().ok_or_else(|| missing("conv1"))?)?;
                let a = tape.relu(a)?;
                let b = tape.conv(a, self.conv2.as_ref().ok_or_else(|| missing("conv2"))?)?;
                let b = tape.relu(b)?;
                tape.flatten(b)?
            }
            BranchKind::Strip => {
                let a = tape.conv(roi, self.conv1.as_ref().ok_or_else(|| missing("conv1"))?)?;
                let s = self
                    .strip
                    .as_ref()
                    .ok_or_else(|| missing("strip module"))?
                    .forward(tape, a, order)?;
                tape.flatten(s)?
            }
            BranchKind::Fc => {
                let flat = tape.flatten(roi)?;
                let a = tape.linear(flat, self.fc1.as_ref().ok_or_else(|| missing("fc1"))?)?;
                let a = tape.relu(a)?;
                let b = tape.linear(a, self.fc2.as_ref().ok_or_else(|| missing("fc2"))?)?;
                tape.relu(b)?
            }
        };
        tape.linear(feat, &self.out)
    }
}

/// Decoupled detection head: shared FCs for classification (and θ when the
/// layout shares it), plus the layout's own branches.
#[derive(Debug, Clone, PartialEq)]
pub struct StripHeadParams {
    pub config: HeadConfig,
    pub shared_fc1: LinearParams,
    pub shared_fc2: LinearParams,
    pub cls_fc: LinearParams,
    /// θ from the shared features.
    pub angle_fc: Option<LinearParams>,
    /// Box deltas from the shared features (joint layout only).
    pub loc_fc: Option<LinearParams>,
    pub branches: Vec<Branch>,
}

impl Module for StripHeadParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        let p = |n| join(prefix, n);
        self.shared_fc1.visit(&p("shared_fc1"), f);
        self.shared_fc2.visit(&p("shared_fc2"), f);
        self.cls_fc.visit(&p("cls_fc"), f);
        self.angle_fc.visit(&p("angle_fc"), f);
        self.loc_fc.visit(&p("loc_fc"), f);
        self.branches.visit(&p("branches"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        let p = |n| join(prefix, n);
        self.shared_fc1.visit_mut(&p("shared_fc1"), f);
        self.shared_fc2.visit_mut(&p("shared_fc2"), f);
        self.cls_fc.visit_mut(&p("cls_fc"), f);
        self.angle_fc.visit_mut(&p("angle_fc"), f);
        self.loc_fc.visit_mut(&p("loc_fc"), f);
        self.branches.visit_mut(&p("branches"), f);
    }
}

/// Output vars of one head pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `(N, K+1, 1, 1)`.
    pub cls: Var,
    /// `(N, 4, 1, 1)` as `(dx, dy, dw, dh)`.
    pub loc: Var,
    /// `(N, 1, 1, 1)`.
    pub theta: Var,
    /// The three outputs concatenated along channels.
    pub joined: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub cls: Tensor,
    pub loc: Tensor,
    pub theta: Tensor,
}

impl StripHeadParams {
    pub fn new(config: HeadConfig, std: f64, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.grid == 0 || config.fc_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout;
        let shared_fc1 = LinearParams::init(config.flat_dim(), config.fc_dim, std, &mut rng);
        let shared_fc2 = LinearParams::init(config.fc_dim, config.fc_dim, std, &mut rng);
        let cls_fc = LinearParams::init(config.fc_dim, config.num_classes + 1, std, &mut rng);
        let angle_fc = layout
            .theta_shared()
            .then(|| LinearParams::init(config.fc_dim, 1, std, &mut rng));
        let loc_fc = layout
            .loc_shared()
            .then(|| LinearParams::init(config.fc_dim, 4, std, &mut rng));
        let branches = layout
            .branches()
            .into_iter()
            .map(|(t, k)| Branch::new(t, k, &config, std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            shared_fc1,
            shared_fc2,
            cls_fc,
            angle_fc,
            loc_fc,
            branches,
        })
    }

    pub fn layout(&self) -> HeadLayout {
        self.config.layout
    }

    fn check_consistent(&self) -> Result<()> {
        let l = self.config.layout;
        let want = l.branches();
        let got: Vec<_> = self.branches.iter().map(|b| (b.target, b.kind)).collect();
        if want != got || l.theta_shared() != self.angle_fc.is_some() || l.loc_shared() != self.loc_fc.is_some() {
            return Err(Error::Config(format!(
                "head parameters do not match layout {}",
                l.name()
            )));
        }
        Ok(())
    }

    /// Shared trunk `ReLU(FC2(ReLU(FC1(flatten(roi)))))`.
    pub fn shared_features<'a>(&'a self, tape: &mut Tape<'a>, roi: Var) -> Result<Var> {
        let flat = tape.flatten(roi)?;
        let a = tape.linear(flat, &self.shared_fc1)?;
        let a = tape.relu(a)?;
        let b = tape.linear(a, &self.shared_fc2)?;
        tape.relu(b)
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, roi: Var, order: StripOrder) -> Result<HeadVars> {
        self.check_consistent()?;
        let [_, c, h, w] = tape.value(roi).dims();
        let g = self.config.grid;
        if c != self.config.in_channels || h != g || w != g {
            return Err(Error::Shape(format!(
                "RoI features ({c}, {h}, {w}), head expects ({}, {g}, {g})",
                self.config.in_channels
            )));
        }
        let shared = self.shared_features(tape, roi)?;
        let cls = tape.linear(shared, &self.cls_fc)?;
        let mut theta = match &self.angle_fc {
            Some(fc) => Some(tape.linear(shared, fc)?),
            None => None,
        };
        let mut loc_parts = Vec::new();
        if let Some(fc) = &self.loc_fc {
            loc_parts.push(tape.linear(shared, fc)?);
        }
        for b in &self.branches {
            let out = b.forward(tape, roi, order)?;
            match b.target {
                BranchTarget::Theta => theta = Some(out),
                _ => loc_parts.push(out),
            }
        }
        let loc = if loc_parts.len() == 1 {
            loc_parts[0]
        } else {
            tape.concat_channels(&loc_parts)?
        };
        let theta = theta.ok_or_else(|| Error::Config("no θ output".into()))?;
        let joined = tape.concat_channels(&[cls, loc, theta])?;
        Ok(HeadVars { cls, loc, theta, joined })
    }
}

/// Class logits `(N, K+1)`, deltas `(N, 4)` and θ `(N, 1)` for RoI features `(N, C, 7, 7)`.
pub fn strip_head_forward(roi: &Tensor, p: &StripHeadParams) -> Result<HeadOutputs> {
    let mut tape = Tape::new();
    let x = tape.input(roi.clone());
    let v = p.forward(&mut tape, x, StripOrder::default())?;
    Ok(HeadOutputs {
        cls: tape.value(v.cls).clone(),
        loc: tape.value(v.loc).clone(),
        theta: tape.value(v.theta).clone(),
    })
}

/// Parameter gradients for upstream gradients on the three outputs.
pub fn strip_head_backward(
    roi: &Tensor,
    p: &StripHeadParams,
    upstream: &HeadOutputs,
) -> Result<Vec<(String, Tensor)>> {
    let mut tape = Tape::new();
    let x = tape.input(roi.clone());
    let v = p.forward(&mut tape, x, StripOrder::default())?;
    let n = roi.dims()[0];
    let k1 = p.config.num_classes + 1;
    let expect = [[n, k1, 1, 1], [n, 4, 1, 1], [n, 1, 1, 1]];
    for (t, d) in [&upstream.cls, &upstream.loc, &upstream.theta].iter().zip(expect) {
        if t.dims() != d {
            return Err(Error::Shape(format!("upstream gradient {:?}, expected {d:?}", t.dims())));
        }
    }
    let seed = Tensor::concat_channels(&[&upstream.cls, &upstream.loc, &upstream.theta])?;
    let grads = tape.backward(v.joined, seed)?;
    Ok(p.param_grads(&grads))
}
