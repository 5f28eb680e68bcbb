//! Bidirectional feature pyramid refinement with fast normalized fusion.
//!
//! Each node combines 2 or 3 same-shape inputs with relu-clamped learnable
//! weights normalized to sum to one, then applies a depthwise-separable conv,
//! batch norm and hard-swish. One iteration runs a top-down pass (upsample +
//! fuse) followed by a bottom-up pass (downsample + fuse); output shapes
//! always equal input shapes.

use crate::backbone::{FeaturePyramid, Modality};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2dLayer, DwsConv};
use crate::params::{Init, ParamId, ParamStore, Run};
use crate::tape::{Tape, TensorId};

pub const FUSION_EPS: f32 = 1e-4;

/// out = sum_i relu(w_i) * x_i / (sum_j relu(w_j) + eps).
pub fn fast_normalized_fusion(tape: &mut Tape, inputs: &[TensorId], weights: &[TensorId]) -> Result<TensorId> {
    if inputs.len() < 2 {
        return Err(Error::invalid("fast_normalized_fusion", format!("needs >= 2 inputs, got {}", inputs.len())));
    }
    if inputs.len() != weights.len() {
        return Err(Error::invalid(
            "fast_normalized_fusion",
            format!("{} inputs vs {} weights", inputs.len(), weights.len()),
        ));
    }
    for pair in inputs.windows(2) {
        if tape.shape(pair[0]) != tape.shape(pair[1]) {
            return Err(Error::ShapeMismatch {
                op: "fast_normalized_fusion",
                lhs: tape.shape(pair[0]).to_vec(),
                rhs: tape.shape(pair[1]).to_vec(),
            });
        }
    }
    let clamped: Vec<TensorId> = weights.iter().map(|&w| tape.relu(w)).collect::<Result<_>>()?;
    let mut denom = clamped[0];
    for &w in &clamped[1..] {
        denom = tape.add(denom, w)?;
    }
    let denom = tape.shift(denom, FUSION_EPS)?;
    let mut acc = tape.mul_scalar_t(inputs[0], clamped[0])?;
    for (x, w) in inputs.iter().zip(&clamped).skip(1) {
        let term = tape.mul_scalar_t(*x, *w)?;
        acc = tape.add(acc, term)?;
    }
    tape.div_scalar_t(acc, denom)
}

/// One fusion node: normalized weighted combination + dws conv + BN + hard-swish.
pub struct FusionNode {
    pub weights: Vec<ParamId>,
    conv: DwsConv,
    bn: BatchNorm,
}

impl FusionNode {
    fn new(store: &mut ParamStore, name: &str, channels: usize, arity: usize) -> Result<Self> {
        let weights = (0..arity)
            .map(|i| store.add_param(&format!("{name}.w{i}"), vec![1], Init::Ones))
            .collect();
        Ok(FusionNode {
            weights,
            conv: DwsConv::new(store, &format!("{name}.conv"), channels, channels, 3, 1)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels),
        })
    }

    fn forward(&self, run: &mut Run, inputs: &[TensorId]) -> Result<TensorId> {
        let ws: Vec<TensorId> = self.weights.iter().map(|&w| run.p(w)).collect::<Result<_>>()?;
        let fused = fast_normalized_fusion(run.tape, inputs, &ws)?;
        let h = self.conv.forward(run, fused)?;
        let h = self.bn.forward(run, h)?;
        run.tape.hard_swish(h)
    }
}

struct BiFpnLayer {
    /// Top-down nodes for levels 0..L-1 (2 inputs each).
    td: Vec<FusionNode>,
    /// Bottom-up nodes for levels 1..L (3 inputs for interior, 2 for the top).
    bu: Vec<FusionNode>,
}

impl BiFpnLayer {
    fn new(store: &mut ParamStore, name: &str, channels: usize, levels: usize) -> Result<Self> {
        let td = (0..levels - 1)
            .map(|l| FusionNode::new(store, &format!("{name}.td{l}"), channels, 2))
            .collect::<Result<_>>()?;
        let bu = (1..levels)
            .map(|l| {
                let arity = if l == levels - 1 { 2 } else { 3 };
                FusionNode::new(store, &format!("{name}.bu{l}"), channels, arity)
            })
            .collect::<Result<_>>()?;
        Ok(BiFpnLayer { td, bu })
    }

    fn forward(&self, run: &mut Run, p: &[TensorId]) -> Result<Vec<TensorId>> {
        let levels = p.len();
        // Top-down pass: td[L-1] is the input itself.
        let mut td = vec![TensorId(0); levels];
        td[levels - 1] = p[levels - 1];
        for l in (0..levels - 1).rev() {
            let target = run.tape.shape(p[l]).to_vec();
            let up = run.tape.upsample_nearest(td[l + 1], target[2], target[3])?;
            td[l] = self.td[l].forward(run, &[p[l], up])?;
        }
        // Bottom-up pass.
        let mut out = vec![TensorId(0); levels];
        out[0] = td[0];
        for l in 1..levels {
            let down = run.tape.max_pool_2x(out[l - 1])?;
            let node = &self.bu[l - 1];
            if l == levels - 1 {
                out[l] = node.forward(run, &[p[l], down])?;
            } else {
                out[l] = node.forward(run, &[p[l], td[l], down])?;
            }
        }
        Ok(out)
    }
}

/// Lateral 1x1 projections to a common channel width plus `iterations`
/// bidirectional refinement layers.
pub struct BiFpn {
    pub channels: usize,
    laterals: Vec<(Conv2dLayer, BatchNorm)>,
    layers: Vec<BiFpnLayer>,
}

impl BiFpn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        level_channels: &[usize],
        channels: usize,
        iterations: usize,
    ) -> Result<Self> {
        if level_channels.len() < 2 {
            return Err(Error::invalid("bifpn", format!("cross-scale fusion undefined for {} level(s)", level_channels.len())));
        }
        if iterations < 1 {
            return Err(Error::invalid("bifpn", "iterations must be >= 1"));
        }
        let laterals = level_channels
            .iter()
            .enumerate()
            .map(|(l, &cin)| {
                (
                    Conv2dLayer::new(store, &format!("{name}.lat{l}.conv"), cin, channels, 1, 1, false),
                    BatchNorm::new(store, &format!("{name}.lat{l}.bn"), channels),
                )
            })
            .collect();
        let layers = (0..iterations)
            .map(|i| BiFpnLayer::new(store, &format!("{name}.it{i}"), channels, level_channels.len()))
            .collect::<Result<_>>()?;
        Ok(BiFpn { channels, laterals, layers })
    }

    /// Project a raw backbone pyramid to the common channel width.
    pub fn project(&self, run: &mut Run, raw: &FeaturePyramid) -> Result<Vec<TensorId>> {
        if raw.levels.len() != self.laterals.len() {
            return Err(Error::invalid(
                "bifpn",
                format!("pyramid has {} levels, expected {}", raw.levels.len(), self.laterals.len()),
            ));
        }
        raw.levels
            .iter()
            .zip(&self.laterals)
            .map(|(&x, (conv, bn))| {
                let h = conv.forward(run, x)?;
                bn.forward(run, h)
            })
            .collect()
    }

    /// Refine already-projected levels; shape-preserving.
    pub fn refine(&self, run: &mut Run, mut levels: Vec<TensorId>) -> Result<Vec<TensorId>> {
        if levels.len() < 2 {
            return Err(Error::invalid("bifpn", format!("cross-scale fusion undefined for {} level(s)", levels.len())));
        }
        for layer in &self.layers {
            levels = layer.forward(run, &levels)?;
        }
        Ok(levels)
    }

    /// Full forward: project then refine, tagging the output pyramid.
    pub fn forward(&self, run: &mut Run, raw: &FeaturePyramid) -> Result<FeaturePyramid> {
        let projected = self.project(run, raw)?;
        let refined = self.refine(run, projected)?;
        Ok(FeaturePyramid { levels: refined, modality: raw.modality })
    }

    /// (relu-clamped, normalized) fusion weights of every node, for
    /// diagnostics and invariant checks.
    pub fn normalized_node_weights(&self, store: &ParamStore) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for node in layer.td.iter().chain(layer.bu.iter()) {
                let raw: Vec<f32> = node.weights.iter().map(|&w| store.get(w).data[0].max(0.0)).collect();
                let denom: f32 = raw.iter().sum::<f32>() + FUSION_EPS;
                out.push(raw.iter().map(|v| v / denom).collect());
            }
        }
        out
    }
}

/// Placeholder modality for zeroed-out branches in single-modality ablations.
pub fn zero_pyramid(tape: &mut Tape, like_shapes: &[Vec<usize>], modality: Modality) -> FeaturePyramid {
    let levels = like_shapes.iter().map(|s| tape.zeros(s.clone())).collect();
    FeaturePyramid { levels, modality }
}
