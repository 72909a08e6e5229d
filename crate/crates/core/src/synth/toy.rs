use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_module;
use crate::nn::{ConvParams, LinearParams, Module, NormMode, NormParams, Tape, TensorRole, Var};
use crate::strip::block::{BasicBlock, BlockCtx};
use crate::strip::module::{ModuleDesign, StripOrder};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Strip length of the strip designs.
    pub strip_len: usize,
    pub ffn_expansion: usize,
    /// Patch size and stride of the stem.
    pub stem_stride: usize,
    /// Append normalized x and y coordinate planes to the image.
    pub coord_channels: bool,
    /// Weight std of the output layer. Convolution kernels use `1/sqrt(fan_in)`.
    pub init_std: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 2,
            strip_len: 11,
            ffn_expansion: 2,
            stem_stride: 4,
            coord_channels: true,
            init_std: 0.1,
        }
    }
}

/// Stem, basic blocks of one module design, global average pool, linear head of 5 deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub design: ModuleDesign,
    pub coord_channels: bool,
    pub stem_stride: usize,
    pub stem: ConvParams,
    pub stem_norm: NormParams,
    pub blocks: Vec<BasicBlock>,
    pub head: LinearParams,
}

impl_module!(ToyNet { stem, stem_norm, blocks, head });

impl ToyNet {
    pub fn new(cfg: &ToyConfig, design: ModuleDesign, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.stem_stride == 0 {
            return Err(Error::Config("toy network sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let in_c = if cfg.coord_channels { 3 } else { 1 };
        let s = cfg.stem_stride;
        // A pointwise conv over space-to-depth patches, equivalent to an s×s stride-s conv.
        let stem = ConvParams::pointwise(in_c * s * s, cfg.channels, cfg.init_std, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| BasicBlock::new(cfg.channels, cfg.strip_len, cfg.ffn_expansion, design, cfg.init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = LinearParams::init(cfg.channels, 5, cfg.init_std, &mut rng);
        let mut net = Self {
            design,
            coord_channels: cfg.coord_channels,
            stem_stride: s,
            stem,
            stem_norm: NormParams::new(cfg.channels),
            blocks,
            head,
        };
        net.visit_mut("", &mut |name, t, _| {
            if name.ends_with("kernel") {
                let [_, icg, kh, kw] = t.dims();
                *t = Tensor::trunc_normal(t.dims(), 1.0 / ((icg * kh * kw) as f64).sqrt(), &mut rng);
            }
        });
        Ok(net)
    }

    fn norms_mut(&mut self) -> Vec<&mut NormParams> {
        let mut v = vec![&mut self.stem_norm];
        for b in &mut self.blocks {
            v.push(&mut b.strip.norm);
            v.push(&mut b.ffn.norm);
        }
        v
    }

    fn norms(&self) -> Vec<&NormParams> {
        let mut v = vec![&self.stem_norm];
        for b in &self.blocks {
            v.push(&b.strip.norm);
            v.push(&b.ffn.norm);
        }
        v
    }

    /// `(N, 5, 1, 1)` deltas for prepared input `(N, C_in, S, S)`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, norm: NormMode) -> Result<Var> {
        let ctx = BlockCtx {
            norm,
            order: StripOrder::default(),
        };
        let h = tape.conv(x, &self.stem)?;
        let mut h = tape.norm(h, &self.stem_norm, norm)?;
        for b in &self.blocks {
            h = b.forward(tape, h, ctx)?;
        }
        let p = tape.global_avg_pool(h)?;
        tape.linear(p, &self.head)
    }

    /// Stacks images `(1, 1, S, S)`, appends coordinate planes if configured and folds each
    /// stride × stride patch into channels, giving `(N, planes·stride², S/stride, S/stride)`.
    pub fn prepare(&self, images: &[&Tensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let [_, _, h, w] = first.dims();
        let s = self.stem_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("image {h}x{w} is not a multiple of the stem stride {s}")));
        }
        let planes = if self.coord_channels { 3 } else { 1 };
        let (gh, gw) = (h / s, w / s);
        let mut out = Tensor::zeros([images.len(), planes * s * s, gh, gw]);
        for (n, img) in images.iter().enumerate() {
            if img.dims() != [1, 1, h, w] {
                return Err(Error::Shape(format!("image {:?}, expected [1, 1, {h}, {w}]", img.dims())));
            }
            for y in 0..h {
                for x in 0..w {
                    let values = [
                        img.get(0, 0, y, x),
                        (y as f64 + 0.5) / h as f64 * 2.0 - 1.0,
                        (x as f64 + 0.5) / w as f64 * 2.0 - 1.0,
                    ];
                    for (p, v) in values.iter().take(planes).enumerate() {
                        out.set(n, (p * s + y % s) * s + x % s, y / s, x / s, *v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inference with running statistics.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, x, NormMode::Frozen)?;
        Ok(tape.value(y).clone())
    }
}

/// Loss value and parameter gradients of one batch, plus the batch statistics of every norm layer.
pub(crate) struct StepResult {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub stats: Vec<Option<crate::nn::NormStats>>,
}

pub(crate) fn loss_and_grads(
    net: &ToyNet,
    batch: &Tensor,
    targets: &[[f64; 5]],
    loss: impl Fn(&Tensor, &[[f64; 5]]) -> Result<(f64, Tensor)>,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let x = tape.input(batch.clone());
    let y = net.forward(&mut tape, x, NormMode::BatchStats)?;
    let (value, seed) = loss(tape.value(y), targets)?;
    let g = tape.backward(y, seed)?;
    let grads = net.param_grads(&g).into_iter().map(|(_, t)| t).collect();
    let stats = net.norms().iter().map(|n| tape.batch_stats(&n.scale).cloned()).collect();
    Ok(StepResult { loss: value, grads, stats })
}

/// Plain SGD with momentum over the learnable tensors in visit order.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Module>(&mut self, model: &mut M, grads: &[Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.dims())).collect();
        }
        if grads.len() != self.velocity.len() {
            return Err(Error::Shape("gradient count changed between steps".into()));
        }
        for (v, g) in self.velocity.iter_mut().zip(grads) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
        }
        let mut k = 0;
        let (lr, vel) = (self.lr, &self.velocity);
        model.visit_mut("", &mut |_, t, role| {
            if role == TensorRole::Learnable {
                for (p, v) in t.data_mut().iter_mut().zip(vel[k].data()) {
                    *p -= lr * v;
                }
                k += 1;
            }
        });
        Ok(())
    }
}

pub(crate) fn update_norms(net: &mut ToyNet, stats: &[Option<crate::nn::NormStats>], momentum: f64) {
    for (n, s) in net.norms_mut().into_iter().zip(stats) {
        if let Some(s) = s {
            n.update_running(s, momentum);
        }
    }
}
