//! Closed-form parameter and multiply-accumulate counts for a variant.
//!
//! FLOPs follow the detection-toolbox convention of one FLOP per
//! multiply-accumulate of convolution and linear layers; normalization and
//! activations are not counted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::strip::backbone::{embed_geometry, VariantConfig};
use crate::strip::module::{ModuleDesign, SQUARE_KERNEL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

struct Plan {
    layers: Vec<LayerCost>,
}

impl Plan {
    /// Convolution over `positions` output pixels.
    fn conv(&mut self, name: String, in_c: usize, out_c: usize, kh: usize, kw: usize, groups: usize, positions: u64) {
        let weights = (out_c * (in_c / groups) * kh * kw) as u64;
        self.layers.push(LayerCost {
            name,
            params: weights + out_c as u64,
            macs: weights * positions,
        });
    }

    fn norm(&mut self, name: String, c: usize) {
        self.layers.push(LayerCost {
            name,
            params: 2 * c as u64,
            macs: 0,
        });
    }
}

fn strip_module_layers(plan: &mut Plan, prefix: &str, c: usize, k: usize, design: ModuleDesign, pos: u64) {
    if design.has_local_square() {
        plan.conv(format!("{prefix}.square"), c, c, SQUARE_KERNEL, SQUARE_KERNEL, c, pos);
    }
    match design {
        ModuleDesign::Sequential | ModuleDesign::Parallel | ModuleDesign::NoSquare => {
            plan.conv(format!("{prefix}.h_strip"), c, c, 1, k, c, pos);
            plan.conv(format!("{prefix}.v_strip"), c, c, k, 1, c, pos);
        }
        ModuleDesign::Square { side }
        | ModuleDesign::SingleSquare { side }
        | ModuleDesign::Dilated { side, .. } => {
            plan.conv(format!("{prefix}.context"), c, c, side, side, c, pos);
        }
    }
    plan.conv(format!("{prefix}.pointwise"), c, c, 1, 1, 1, pos);
}

/// Strip-module parameter count for `c` channels and strip length `k`: `(weights, biases)`.
pub fn strip_module_params(c: usize, k: usize) -> (u64, u64) {
    let mut plan = Plan { layers: Vec::new() };
    strip_module_layers(&mut plan, "m", c, k, ModuleDesign::Sequential, 0);
    let total: u64 = plan.layers.iter().map(|l| l.params).sum();
    let biases = 4 * c as u64;
    (total - biases, biases)
}

/// Per-layer costs for an `h × w` input. `h` and `w` must be divisible by 32.
pub fn layer_costs(v: &VariantConfig, h: usize, w: usize) -> Result<Vec<LayerCost>> {
    v.validate()?;
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by 32")));
    }
    let mut plan = Plan { layers: Vec::new() };
    let mut in_c = v.in_channels;
    let mut stride = 1;
    for i in 0..4 {
        let c = v.channels[i];
        let (ek, geom) = embed_geometry(i);
        stride *= geom.stride;
        let pos = ((h / stride) * (w / stride)) as u64;
        let p = format!("stages.{i}");
        plan.conv(format!("{p}.embed"), in_c, c, ek, ek, 1, pos);
        plan.norm(format!("{p}.embed_norm"), c);
        for b in 0..v.depths[i] {
            let bp = format!("{p}.blocks.{b}");
            plan.norm(format!("{bp}.strip.norm"), c);
            plan.conv(format!("{bp}.strip.proj_in"), c, c, 1, 1, 1, pos);
            strip_module_layers(&mut plan, &format!("{bp}.strip.module"), c, v.kernel_schedule[i], v.design, pos);
            plan.conv(format!("{bp}.strip.proj_out"), c, c, 1, 1, 1, pos);
            let hid = c * v.ffn_expansion[i];
            plan.norm(format!("{bp}.ffn.norm"), c);
            plan.conv(format!("{bp}.ffn.expand"), c, hid, 1, 1, 1, pos);
            plan.conv(format!("{bp}.ffn.depthwise"), hid, hid, 3, 3, hid, pos);
            plan.conv(format!("{bp}.ffn.project"), hid, c, 1, 1, 1, pos);
        }
        plan.norm(format!("{p}.out_norm"), c);
        in_c = c;
    }
    Ok(plan.layers)
}

/// Learnable scalars of the backbone built from `v`.
pub fn count_parameters(v: &VariantConfig) -> Result<u64> {
    Ok(layer_costs(v, 32, 32)?.iter().map(|l| l.params).sum())
}

/// Multiply-accumulates of one forward pass over an `h × w` image.
pub fn estimate_flops(v: &VariantConfig, h: usize, w: usize) -> Result<u64> {
    Ok(layer_costs(v, h, w)?.iter().map(|l| l.macs).sum())
}

/// Published size of a preset: parameters and FLOPs at 1024×1024.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCost {
    pub params: f64,
    pub flops: f64,
}

pub const PARAM_TOLERANCE: f64 = 0.15;
pub const FLOPS_TOLERANCE: f64 = 0.20;

pub fn reference_cost(name: &str) -> Option<ReferenceCost> {
    match name {
        "stripnet-t" => Some(ReferenceCost { params: 3.8e6, flops: 18.2e9 }),
        "stripnet-s" => Some(ReferenceCost { params: 13.3e6, flops: 52.3e9 }),
        _ => None,
    }
}
