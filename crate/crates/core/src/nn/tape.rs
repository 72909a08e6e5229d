//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the ids of
//! its operands. Parameters enter through [`Tape::param`], which borrows the
//! tensor and deduplicates by address, so a layer referenced from two
//! branches is one leaf and its gradients accumulate.

use std::borrow::Cow;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::activation::{elementwise, elementwise_backward, Elementwise};
use crate::nn::conv::{conv2d_backward_view, conv2d_forward_view, ConvGeom, ConvParams, ConvView};
use crate::nn::linear::{linear_backward_parts, linear_forward_parts, LinearParams};
use crate::nn::norm::{normalize_backward_parts, normalize_parts, NormMode, NormParams, NormSource, NormStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Linear { x: Var, weight: Var, bias: Var },
    Unary { op: Elementwise, x: Var },
    Binary { op: Elementwise, a: Var, b: Var },
    Norm { x: Var, scale: Var, shift: Var, stats: NormStats },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    Concat { parts: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Unary { op: Elementwise::Relu, .. } => "relu",
            Op::Unary { .. } => "gelu",
            Op::Binary { op: Elementwise::Add, .. } => "add",
            Op::Binary { .. } => "mul",
            Op::Norm { .. } => "norm",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Concat { .. } => "concat",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<usize, Var>,
    norm_stats: Vec<(usize, NormStats)>,
}

fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf, typically the network input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    /// A borrowed parameter leaf; repeated calls with the same tensor return the same var.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(&addr(t)) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf);
        self.params.insert(addr(t), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn conv(&mut self, x: Var, p: &'a ConvParams) -> Result<Var> {
        let kernel = self.param(&p.kernel);
        let bias = self.param(&p.bias);
        self.conv_vars(x, kernel, bias, p.geom)
    }

    pub fn conv_vars(&mut self, x: Var, kernel: Var, bias: Var, geom: ConvGeom) -> Result<Var> {
        let view = ConvView {
            kernel: self.value(kernel),
            bias: self.value(bias),
            geom,
        };
        let y = conv2d_forward_view(self.value(x), view)?;
        Ok(self.push(Cow::Owned(y), Op::Conv { x, kernel, bias, geom }))
    }

    pub fn linear(&mut self, x: Var, p: &'a LinearParams) -> Result<Var> {
        let weight = self.param(&p.weight);
        let bias = self.param(&p.bias);
        let y = linear_forward_parts(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(Cow::Owned(y), Op::Linear { x, weight, bias }))
    }

    /// Channel normalization. In batch-stats mode the statistics used are
    /// recorded and can be read back with [`Tape::batch_stats`].
    pub fn norm(&mut self, x: Var, p: &'a NormParams, mode: NormMode) -> Result<Var> {
        let scale = self.param(&p.scale);
        let shift = self.param(&p.shift);
        let source = match mode {
            NormMode::BatchStats => NormSource::Batch,
            NormMode::Frozen => NormSource::Frozen {
                mean: p.running_mean.data(),
                var: p.running_var.data(),
            },
        };
        let (y, stats) = normalize_parts(self.value(x), self.value(scale), self.value(shift), source)?;
        if mode == NormMode::BatchStats {
            self.norm_stats.push((addr(&p.scale), stats.clone()));
        }
        Ok(self.push(
            Cow::Owned(y),
            Op::Norm {
                x,
                scale,
                shift,
                stats,
            },
        ))
    }

    /// Batch statistics recorded for the norm layer whose scale tensor is `scale`.
    pub fn batch_stats(&self, scale: &Tensor) -> Option<&NormStats> {
        self.norm_stats
            .iter()
            .find(|(a, _)| *a == addr(scale))
            .map(|(_, s)| s)
    }

    fn unary(&mut self, op: Elementwise, x: Var) -> Result<Var> {
        let y = elementwise(op, self.value(x), None)?;
        Ok(self.push(Cow::Owned(y), Op::Unary { op, x }))
    }

    fn binary(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let y = elementwise(op, self.value(a), Some(self.value(b)))?;
        Ok(self.push(Cow::Owned(y), Op::Binary { op, a, b }))
    }

    /// Fingerprint of which ReLU inputs are positive. Finite differences are
    /// only meaningful when a perturbation leaves it unchanged.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Unary { op: Elementwise::Relu, x } = node.op {
                for &v in self.value(x).data() {
                    (v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Elementwise::Gelu, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let y = self.value(x).reshape(dims)?;
        Ok(self.push(Cow::Owned(y), Op::Reshape { x }))
    }

    /// `(N, C, H, W)` to `(N, C·H·W, 1, 1)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims();
        self.reshape(x, [n, c * h * w, 1, 1])
    }

    /// Spatial mean per channel, `(N, C, H, W)` to `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.dims();
        let plane = h * w;
        let data = xt
            .data()
            .chunks(plane.max(1))
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let y = Tensor::from_vec([n, c, 1, 1], data)?;
        Ok(self.push(Cow::Owned(y), Op::GlobalAvgPool { x }))
    }

    /// Joins along the channel axis; all parts share N, H and W.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.value(*first).dims();
        let mut total = 0;
        for &p in parts {
            let d = self.value(p).dims();
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::Shape(format!("concat part {d:?} vs batch {n} at {h}x{w}")));
            }
            total += d[1];
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.dims()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::from_vec([n, total, h, w], data)?;
        Ok(self.push(Cow::Owned(y), Op::Concat { parts: parts.to_vec() }))
    }

    /// Reverse sweep from `output` seeded with `seed` (same dims as the output).
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.dims() != self.value(output).dims() {
            return Err(Error::Shape(format!(
                "backward seed {:?} vs output {:?}",
                seed.dims(),
                self.value(output).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, kernel, bias, geom } => {
                    let view = ConvView {
                        kernel: self.value(*kernel),
                        bias: self.value(*bias),
                        geom: *geom,
                    };
                    let cg = conv2d_backward_view(&g, self.value(*x), view)?;
                    accumulate(&mut grads, *x, cg.input)?;
                    accumulate(&mut grads, *kernel, cg.kernel)?;
                    accumulate(&mut grads, *bias, cg.bias)?;
                }
                Op::Linear { x, weight, bias } => {
                    let lg = linear_backward_parts(
                        &g,
                        self.value(*x),
                        self.value(*weight),
                        self.value(*bias),
                    )?;
                    accumulate(&mut grads, *x, lg.input)?;
                    accumulate(&mut grads, *weight, lg.weight)?;
                    accumulate(&mut grads, *bias, lg.bias)?;
                }
                Op::Unary { op, x } => {
                    let (gx, _) = elementwise_backward(*op, &g, self.value(*x), None)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Binary { op, a, b } => {
                    let (ga, gb) =
                        elementwise_backward(*op, &g, self.value(*a), Some(self.value(*b)))?;
                    accumulate(&mut grads, *a, ga)?;
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Norm {
                    x,
                    scale,
                    shift,
                    stats,
                } => {
                    let ng = normalize_backward_parts(&g, self.value(*x), self.value(*scale), stats)?;
                    accumulate(&mut grads, *x, ng.input)?;
                    accumulate(&mut grads, *scale, ng.scale)?;
                    accumulate(&mut grads, *shift, ng.shift)?;
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.value(*x).dims())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let dims = self.value(*x).dims();
                    let plane = dims[2] * dims[3];
                    let mut gx = Tensor::zeros(dims);
                    let inv = 1.0 / plane as f64;
                    for (chunk, gv) in gx.data_mut().chunks_mut(plane.max(1)).zip(g.data()) {
                        chunk.fill(gv * inv);
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Concat { parts } => {
                    let [n, total, h, w] = g.dims();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).dims()[1];
                        let mut gp = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            gp.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        accumulate(&mut grads, p, Tensor::from_vec([n, c, h, w], gp)?)?;
                        offset += c;
                    }
                }
            }
            // Keep gradients of leaves; intermediates are no longer needed.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of a leaf var; `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter tensor registered with [`Tape::param`].
    pub fn wrt_param(&self, t: &Tensor) -> Option<&Tensor> {
        self.params.get(&addr(t)).and_then(|&v| self.wrt(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shared_param_is_one_leaf_and_accumulates() {
        let w = Tensor::vector(vec![2.0, -1.0]);
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y, Tensor::full([1, 2, 1, 1], 1.0)).unwrap();
        // d(w·w)/dw = 2w
        assert_eq!(grads.wrt_param(&w).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn global_pool_backward_spreads_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn([2, 3, 2, 2], 1.0, &mut rng));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).dims(), [2, 3, 1, 1]);
        let grads = tape.backward(y, Tensor::full([2, 3, 1, 1], 1.0)).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_rejects_bad_seed() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([1, 1, 2, 2]));
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y, Tensor::zeros([1, 1, 1, 1])).is_err());
        assert_eq!(tape.op_names(), vec!["leaf", "relu"]);
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec([2, 1, 1, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.input(Tensor::from_vec([2, 2, 1, 1], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let seed = Tensor::from_vec([2, 3, 1, 1], vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap();
        let g = tape.backward(y, seed).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[10.0, 40.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[20.0, 30.0, 50.0, 60.0]);
        assert!(tape.concat_channels(&[]).is_err());
    }
}
