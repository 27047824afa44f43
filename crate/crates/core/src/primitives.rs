//! The fifteen candidate primitive operations.
//!
//! Three families with fixed shape contracts:
//! down ops halve H,W and double C; up ops double H,W and halve C; normal
//! ops preserve shape. Every convolutional stage composes Conv -> ReLU ->
//! GroupNorm in that order; depthwise variants run a depthwise 3x3 stage
//! followed by a pointwise 1x1 stage (which carries the channel change);
//! pooling is followed by a 1x1 projection since pooling alone cannot
//! double channels; cweight ops end in squeeze-and-excitation re-weighting.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, ConvTransposeSpec, PoolKind, Shape, Tape, Var};

/// Channel group count used by every group normalization in the network.
pub const GN_GROUPS: usize = 4;
/// Epsilon for group normalization.
pub const GN_EPS: f64 = 1e-5;
/// Bottleneck reduction ratio of the squeeze-and-excitation gate.
pub const SE_REDUCTION: usize = 4;

/// One of the fifteen candidate operations.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum PrimitiveKind {
    AvgPool,
    MaxPool,
    DownConv,
    DownCweight,
    DownDilationConv,
    DownDepthConv,
    UpCweight,
    UpDepthConv,
    UpConv,
    UpDilationConv,
    Identity,
    Cweight,
    Conv,
    DilationConv,
    DepthConv,
}

/// Candidate set for edges that change resolution downward.
pub const DOWN_OPS: [PrimitiveKind; 6] = [
    PrimitiveKind::AvgPool,
    PrimitiveKind::MaxPool,
    PrimitiveKind::DownConv,
    PrimitiveKind::DownCweight,
    PrimitiveKind::DownDilationConv,
    PrimitiveKind::DownDepthConv,
];

/// Candidate set for edges that change resolution upward.
pub const UP_OPS: [PrimitiveKind; 4] = [
    PrimitiveKind::UpCweight,
    PrimitiveKind::UpDepthConv,
    PrimitiveKind::UpConv,
    PrimitiveKind::UpDilationConv,
];

/// Candidate set for shape-preserving edges between intermediate nodes.
pub const NORMAL_OPS: [PrimitiveKind; 5] = [
    PrimitiveKind::Identity,
    PrimitiveKind::Cweight,
    PrimitiveKind::Conv,
    PrimitiveKind::DilationConv,
    PrimitiveKind::DepthConv,
];

/// Position of an edge within a cell, which fixes its candidate set.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EdgeRole {
    Down,
    Up,
    Normal,
}

impl EdgeRole {
    pub fn ops(self) -> &'static [PrimitiveKind] {
        match self {
            EdgeRole::Down => &DOWN_OPS,
            EdgeRole::Up => &UP_OPS,
            EdgeRole::Normal => &NORMAL_OPS,
        }
    }
}

/// Shape transformation of a primitive family.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ShapeContract {
    Down,
    Up,
    Normal,
}

impl ShapeContract {
    pub fn c_out(self, c_in: usize) -> usize {
        match self {
            ShapeContract::Down => c_in * 2,
            ShapeContract::Up => c_in / 2,
            ShapeContract::Normal => c_in,
        }
    }

    pub fn output_shape(self, input: Shape) -> Shape {
        match self {
            ShapeContract::Down => Shape::new(input.n, input.c * 2, input.h / 2, input.w / 2),
            ShapeContract::Up => Shape::new(input.n, input.c / 2, input.h * 2, input.w * 2),
            ShapeContract::Normal => input,
        }
    }
}

impl PrimitiveKind {
    pub fn contract(self) -> ShapeContract {
        use PrimitiveKind::*;
        match self {
            AvgPool | MaxPool | DownConv | DownCweight | DownDilationConv | DownDepthConv => ShapeContract::Down,
            UpCweight | UpDepthConv | UpConv | UpDilationConv => ShapeContract::Up,
            Identity | Cweight | Conv | DilationConv | DepthConv => ShapeContract::Normal,
        }
    }

    pub fn legal_for(self, role: EdgeRole) -> bool {
        role.ops().contains(&self)
    }

    /// Serialized name used in genotype files.
    pub fn name(self) -> &'static str {
        use PrimitiveKind::*;
        match self {
            AvgPool => "avg_pool",
            MaxPool => "max_pool",
            DownConv => "down_conv",
            DownCweight => "down_cweight",
            DownDilationConv => "down_dilation_conv",
            DownDepthConv => "down_depth_conv",
            UpCweight => "up_cweight",
            UpDepthConv => "up_depth_conv",
            UpConv => "up_conv",
            UpDilationConv => "up_dilation_conv",
            Identity => "identity",
            Cweight => "cweight",
            Conv => "conv",
            DilationConv => "dilation_conv",
            DepthConv => "depth_conv",
        }
    }

    pub fn parse(s: &str) -> Option<PrimitiveKind> {
        use PrimitiveKind::*;
        Some(match s {
            "avg_pool" => AvgPool,
            "max_pool" => MaxPool,
            "down_conv" => DownConv,
            "down_cweight" => DownCweight,
            "down_dilation_conv" => DownDilationConv,
            "down_depth_conv" => DownDepthConv,
            "up_cweight" => UpCweight,
            "up_depth_conv" => UpDepthConv,
            "up_conv" => UpConv,
            "up_dilation_conv" => UpDilationConv,
            "identity" => Identity,
            "cweight" => Cweight,
            "conv" => Conv,
            "dilation_conv" => DilationConv,
            "depth_conv" => DepthConv,
            _ => return None,
        })
    }
}

enum Stage {
    Conv { w: ParamId, b: Option<ParamId>, spec: ConvSpec },
    ConvTranspose { w: ParamId, spec: ConvTransposeSpec },
    Pool(PoolKind),
    Relu,
    GroupNorm { gamma: ParamId, beta: ParamId },
    Se { fc1w: ParamId, fc1b: ParamId, fc2w: ParamId, fc2b: ParamId },
}

/// A built primitive: its kind, channel contract, and parameter stages.
pub struct PrimitiveInstance {
    pub kind: PrimitiveKind,
    pub c_in: usize,
    pub c_out: usize,
    stages: Vec<Stage>,
}

/// Build one primitive, registering its parameters under `prefix`.
pub fn build_primitive<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut Rng64,
    prefix: &str,
    kind: PrimitiveKind,
    c_in: usize,
    role: EdgeRole,
) -> Result<PrimitiveInstance> {
    if !kind.legal_for(role) {
        return Err(Error::config(format!(
            "primitive {} is not legal in a {:?} edge position",
            kind.name(),
            role
        )));
    }
    let contract = kind.contract();
    if contract == ShapeContract::Up && c_in % 2 != 0 {
        return Err(Error::config(format!("up primitive needs even c_in, got {c_in}")));
    }
    let c_out = contract.c_out(c_in);

    let mut b = StageBuilder { store, rng, prefix, stages: Vec::new(), next: 0 };
    use PrimitiveKind::*;
    match kind {
        Identity => {}
        AvgPool => {
            b.stages.push(Stage::Pool(PoolKind::Avg));
            b.conv_relu_gn(c_in, c_out, 1, ConvSpec::plain(1, 0))?;
        }
        MaxPool => {
            b.stages.push(Stage::Pool(PoolKind::Max));
            b.conv_relu_gn(c_in, c_out, 1, ConvSpec::plain(1, 0))?;
        }
        DownConv => b.conv_relu_gn(c_in, c_out, 3, ConvSpec::plain(2, 1))?,
        DownDilationConv => {
            b.conv_relu_gn(c_in, c_out, 3, ConvSpec { stride: 2, padding: 2, dilation: 2, groups: 1 })?
        }
        DownDepthConv => {
            b.conv_relu_gn(c_in, c_in, 3, ConvSpec { stride: 2, padding: 1, dilation: 1, groups: c_in })?;
            b.conv_relu_gn(c_in, c_out, 1, ConvSpec::plain(1, 0))?;
        }
        DownCweight => {
            b.conv_relu_gn(c_in, c_out, 3, ConvSpec::plain(2, 1))?;
            b.se(c_out)?;
        }
        UpConv => b.convt_relu_gn(c_in, c_out, up_spec(1))?,
        UpDilationConv => b.convt_relu_gn(c_in, c_out, up_spec(2))?,
        UpDepthConv => {
            b.convt_relu_gn(c_in, c_in, ConvTransposeSpec { groups: c_in, ..up_spec(1) })?;
            b.conv_relu_gn(c_in, c_out, 1, ConvSpec::plain(1, 0))?;
        }
        UpCweight => {
            b.convt_relu_gn(c_in, c_out, up_spec(1))?;
            b.se(c_out)?;
        }
        Conv => b.conv_relu_gn(c_in, c_out, 3, ConvSpec::plain(1, 1))?,
        DilationConv => {
            b.conv_relu_gn(c_in, c_out, 3, ConvSpec { stride: 1, padding: 2, dilation: 2, groups: 1 })?
        }
        DepthConv => {
            b.conv_relu_gn(c_in, c_in, 3, ConvSpec { stride: 1, padding: 1, dilation: 1, groups: c_in })?;
            b.conv_relu_gn(c_in, c_out, 1, ConvSpec::plain(1, 0))?;
        }
        Cweight => b.se(c_in)?,
    }
    let stages = b.stages;
    Ok(PrimitiveInstance { kind, c_in, c_out, stages })
}

/// Transposed 3x3 spec that exactly doubles spatial extent at the given
/// dilation (padding = dilation, output_padding = 1).
fn up_spec(dilation: usize) -> ConvTransposeSpec {
    ConvTransposeSpec { stride: 2, padding: dilation, output_padding: 1, dilation, groups: 1 }
}

struct StageBuilder<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut Rng64,
    prefix: &'a str,
    stages: Vec<Stage>,
    next: usize,
}

impl<S: Scalar> StageBuilder<'_, S> {
    fn gn_check(&self, c: usize) -> Result<()> {
        if c % GN_GROUPS != 0 {
            return Err(Error::config(format!(
                "channel count {c} not divisible by {GN_GROUPS} normalization groups"
            )));
        }
        Ok(())
    }

    fn conv_relu_gn(&mut self, c_in: usize, c_out: usize, k: usize, spec: ConvSpec) -> Result<()> {
        self.gn_check(c_out)?;
        let i = self.next;
        self.next += 1;
        let fan_in = (c_in / spec.groups) * k * k;
        let w = self.store.add(
            format!("{}.s{i}.conv.w", self.prefix),
            Shape::new(c_out, c_in / spec.groups, k, k),
            Init::HeUniform { fan_in },
            self.rng,
        )?;
        self.stages.push(Stage::Conv { w, b: None, spec });
        self.push_relu_gn(i, c_out)
    }

    fn convt_relu_gn(&mut self, c_in: usize, c_out: usize, spec: ConvTransposeSpec) -> Result<()> {
        self.gn_check(c_out)?;
        let i = self.next;
        self.next += 1;
        let fan_in = (c_in / spec.groups) * 9;
        let w = self.store.add(
            format!("{}.s{i}.convt.w", self.prefix),
            Shape::new(c_in, c_out / spec.groups, 3, 3),
            Init::HeUniform { fan_in },
            self.rng,
        )?;
        self.stages.push(Stage::ConvTranspose { w, spec });
        self.push_relu_gn(i, c_out)
    }

    fn push_relu_gn(&mut self, i: usize, c: usize) -> Result<()> {
        self.stages.push(Stage::Relu);
        let gamma = self.store.add(format!("{}.s{i}.gn.gamma", self.prefix), Shape::vector(c), Init::Ones, self.rng)?;
        let beta = self.store.add(format!("{}.s{i}.gn.beta", self.prefix), Shape::vector(c), Init::Zeros, self.rng)?;
        self.stages.push(Stage::GroupNorm { gamma, beta });
        Ok(())
    }

    fn se(&mut self, c: usize) -> Result<()> {
        if c % SE_REDUCTION != 0 {
            return Err(Error::config(format!(
                "channel count {c} not divisible by se reduction {SE_REDUCTION}"
            )));
        }
        let i = self.next;
        self.next += 1;
        let hidden = c / SE_REDUCTION;
        let fc1w = self.store.add(
            format!("{}.s{i}.se.fc1.w", self.prefix),
            Shape::new(hidden, c, 1, 1),
            Init::HeUniform { fan_in: c },
            self.rng,
        )?;
        let fc1b = self.store.add(format!("{}.s{i}.se.fc1.b", self.prefix), Shape::vector(hidden), Init::Zeros, self.rng)?;
        let fc2w = self.store.add(
            format!("{}.s{i}.se.fc2.w", self.prefix),
            Shape::new(c, hidden, 1, 1),
            Init::HeUniform { fan_in: hidden },
            self.rng,
        )?;
        let fc2b = self.store.add(format!("{}.s{i}.se.fc2.b", self.prefix), Shape::vector(c), Init::Zeros, self.rng)?;
        self.stages.push(Stage::Se { fc1w, fc1b, fc2w, fc2b });
        Ok(())
    }
}

/// Squeeze-and-excitation re-weighting: sigmoid-gated per-channel scaling
/// driven by globally pooled statistics.
pub fn se_reweight<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    fc1w: Var,
    fc1b: Var,
    fc2w: Var,
    fc2b: Var,
) -> Result<Var> {
    let squeezed = tape.global_avg_pool(x)?;
    let h = tape.conv2d(squeezed, fc1w, Some(fc1b), ConvSpec::plain(1, 0))?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, fc2w, Some(fc2b), ConvSpec::plain(1, 0))?;
    let gate = tape.sigmoid(h)?;
    tape.mul_channel_gate(x, gate)
}

impl PrimitiveInstance {
    /// Apply the primitive to a tape value. The output shape follows the
    /// kind's contract; only the parameters of this primitive are touched.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pv: &mut ParamVars,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.c_in {
            return Err(Error::config(format!(
                "{}: expected {} input channels, got {}",
                self.kind.name(),
                self.c_in,
                xs.c
            )));
        }
        let mut cur = x;
        for stage in &self.stages {
            cur = match stage {
                Stage::Conv { w, b, spec } => {
                    let wv = pv.var(tape, store, *w)?;
                    let bv = match b {
                        Some(id) => Some(pv.var(tape, store, *id)?),
                        None => None,
                    };
                    tape.conv2d(cur, wv, bv, *spec)?
                }
                Stage::ConvTranspose { w, spec } => {
                    let wv = pv.var(tape, store, *w)?;
                    tape.conv_transpose2d(cur, wv, *spec)?
                }
                Stage::Pool(kind) => tape.pool2(cur, *kind)?,
                Stage::Relu => tape.relu(cur)?,
                Stage::GroupNorm { gamma, beta } => {
                    let g = pv.var(tape, store, *gamma)?;
                    let b = pv.var(tape, store, *beta)?;
                    tape.group_norm(cur, g, b, GN_GROUPS, GN_EPS)?
                }
                Stage::Se { fc1w, fc1b, fc2w, fc2b } => {
                    let w1 = pv.var(tape, store, *fc1w)?;
                    let b1 = pv.var(tape, store, *fc1b)?;
                    let w2 = pv.var(tape, store, *fc2w)?;
                    let b2 = pv.var(tape, store, *fc2b)?;
                    se_reweight(tape, cur, w1, b1, w2, b2)?
                }
            };
        }
        Ok(cur)
    }

    /// All parameter ids of this primitive, in stage order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for s in &self.stages {
            match s {
                Stage::Conv { w, b, .. } => {
                    ids.push(*w);
                    if let Some(bid) = b {
                        ids.push(*bid);
                    }
                }
                Stage::ConvTranspose { w, .. } => ids.push(*w),
                Stage::GroupNorm { gamma, beta } => {
                    ids.push(*gamma);
                    ids.push(*beta);
                }
                Stage::Se { fc1w, fc1b, fc2w, fc2b } => {
                    ids.extend([*fc1w, *fc1b, *fc2w, *fc2b]);
                }
                Stage::Pool(_) | Stage::Relu => {}
            }
        }
        ids
    }

    /// Total scalar parameter count.
    pub fn param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).data.len()).sum()
    }
}

#[cfg(test)]
mod tests;
