//! The U-shaped over-parameterized network and its discrete counterpart.
//!
//! A stem lifts the input image to `base_channels`; D down-sampling cells
//! halve resolution and double channels per level; D up-sampling cells
//! mirror them, each taking the previous decoder output and the encoder
//! output of the same scale as its two inputs; a 1x1 head produces
//! per-pixel class logits at input resolution.
//!
//! Channel ladder: level l holds base_channels * 2^l channels at
//! (H, W) / 2^l. Down cell d maps level d to d+1; up cell u maps level
//! D-u back to D-u-1. The first cell of each half duplicates its single
//! predecessor; later down cells adapt their second input from one level
//! shallower with a strided 1x1 projection.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, ParamVars};
use crate::primitives::{build_primitive, PrimitiveInstance, GN_EPS, GN_GROUPS, SE_REDUCTION};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::search_space::{
    enumerate_edges, ArchParams, BinaryGates, CellRole, CellSpec, Edge, Genotype, MixedOp,
};
use crate::tensor::{ConvSpec, Shape, Tape, Var};

/// Static description of one network instantiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Number of down cells (= number of up cells).
    pub depth: usize,
    /// Channels after the stem; doubled at each level.
    pub base_channels: usize,
    pub num_classes: usize,
    /// Intermediate nodes per cell.
    pub m: usize,
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::config("network depth must be >= 1"));
        }
        if self.m < 1 {
            return Err(Error::config("cells need at least one intermediate node"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("segmentation needs at least two classes"));
        }
        if self.base_channels % GN_GROUPS != 0 || self.base_channels % SE_REDUCTION != 0 {
            return Err(Error::config(format!(
                "base_channels {} must be divisible by {} (normalization groups) and {} (se reduction)",
                self.base_channels, GN_GROUPS, SE_REDUCTION
            )));
        }
        let div = 1usize << self.depth;
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::config(format!(
                "input {}x{} not divisible by 2^depth = {div}",
                self.input_h, self.input_w
            )));
        }
        if self.in_channels < 1 {
            return Err(Error::config("input needs at least one channel"));
        }
        Ok(())
    }

    /// Channels at pyramid level l (level 0 = stem output).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Conv -> ReLU -> GroupNorm block used for the stem, the per-cell output
/// projection, and the level adapter on a down cell's second input.
struct ConvBlock {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    spec: ConvSpec,
}

impl ConvBlock {
    fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng64,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Result<ConvBlock> {
        if c_out % GN_GROUPS != 0 {
            return Err(Error::config(format!("block {prefix}: {c_out} channels not divisible by {GN_GROUPS}")));
        }
        let w = store.add(
            format!("{prefix}.conv.w"),
            Shape::new(c_out, c_in, k, k),
            Init::HeUniform { fan_in: c_in * k * k },
            rng,
        )?;
        let gamma = store.add(format!("{prefix}.gn.gamma"), Shape::vector(c_out), Init::Ones, rng)?;
        let beta = store.add(format!("{prefix}.gn.beta"), Shape::vector(c_out), Init::Zeros, rng)?;
        Ok(ConvBlock { w, gamma, beta, spec })
    }

    fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pv: &mut ParamVars,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<Var> {
        let w = pv.var(tape, store, self.w)?;
        let c = tape.conv2d(x, w, None, self.spec)?;
        let r = tape.relu(c)?;
        let gamma = pv.var(tape, store, self.gamma)?;
        let beta = pv.var(tape, store, self.beta)?;
        tape.group_norm(r, gamma, beta, GN_GROUPS, GN_EPS)
    }
}

/// One cell of the supernet: a mixed op per DAG edge, an optional input
/// adapter, and the 1x1 output projection over concatenated node outputs.
struct MixedCell {
    edges: Vec<MixedOp>,
    pre: Option<ConvBlock>,
    proj: ConvBlock,
}

/// Forward flavour of the supernet.
pub enum SupernetMode<'a> {
    /// Softmax-weighted sum over all candidates (differentiable in alpha).
    Continuous,
    /// One sampled path per edge; `down`/`up` gates are shared by all cells
    /// of the respective role.
    Binarized { down: &'a BinaryGates, up: &'a BinaryGates },
}

/// Per-pass handles produced by a forward call.
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter-to-leaf mapping of this pass (for gradient readout).
    pub params: ParamVars,
    /// Alpha row leaves, present in continuous mode: (down rows, up rows).
    pub alpha_vars: Option<(Vec<Var>, Vec<Var>)>,
}

/// The over-parameterized search network.
pub struct Supernet<S: Scalar> {
    pub config: NetworkConfig,
    pub store: ParamStore<S>,
    pub down_spec: CellSpec,
    pub up_spec: CellSpec,
    pub alpha_down: ArchParams<S>,
    pub alpha_up: ArchParams<S>,
    stem: ConvBlock,
    down_cells: Vec<MixedCell>,
    up_cells: Vec<MixedCell>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<S: Scalar> Supernet<S> {
    /// Deterministic construction from a configuration and seed.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Supernet<S>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng64::derive(seed, &[0x6e65_74]);
        let down_spec = CellSpec::new(CellRole::Down, config.m)?;
        let up_spec = CellSpec::new(CellRole::Up, config.m)?;

        let stem = ConvBlock::build(
            &mut store,
            &mut rng,
            "stem",
            config.in_channels,
            config.base_channels,
            3,
            ConvSpec::plain(1, 1),
        )?;

        let mut down_cells = Vec::with_capacity(config.depth);
        for d in 0..config.depth {
            let c_in = config.channels_at(d);
            let pre = if d == 0 {
                None
            } else {
                Some(ConvBlock::build(
                    &mut store,
                    &mut rng,
                    &format!("down.{d}.pre"),
                    c_in / 2,
                    c_in,
                    1,
                    ConvSpec::plain(2, 0),
                )?)
            };
            down_cells.push(build_mixed_cell(&mut store, &mut rng, &down_spec, "down", d, c_in, pre)?);
        }

        let mut up_cells = Vec::with_capacity(config.depth);
        for u in 0..config.depth {
            let c_in = config.channels_at(config.depth - u);
            up_cells.push(build_mixed_cell(&mut store, &mut rng, &up_spec, "up", u, c_in, None)?);
        }

        let head_w = store.add(
            "head.conv.w",
            Shape::new(config.num_classes, config.base_channels, 1, 1),
            Init::HeUniform { fan_in: config.base_channels },
            &mut rng,
        )?;
        let head_b = store.add("head.conv.b", Shape::vector(config.num_classes), Init::Zeros, &mut rng)?;

        let alpha_down = ArchParams::zeros(&down_spec);
        let alpha_up = ArchParams::zeros(&up_spec);
        Ok(Supernet {
            config,
            store,
            down_spec,
            up_spec,
            alpha_down,
            alpha_up,
            stem,
            down_cells,
            up_cells,
            head_w,
            head_b,
        })
    }

    /// Run the network on a batch already on the tape. `weights_grad`
    /// controls whether parameters are inserted as differentiable leaves;
    /// alpha leaves (continuous mode only) always are.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        batch: Var,
        mode: &SupernetMode,
        weights_grad: bool,
    ) -> Result<ForwardPass> {
        let bs = tape.shape(batch);
        if bs.c != self.config.in_channels || bs.h != self.config.input_h || bs.w != self.config.input_w {
            return Err(Error::config(format!(
                "batch {} does not match configured input ({},{},{})",
                bs, self.config.in_channels, self.config.input_h, self.config.input_w
            )));
        }
        let mut pv = ParamVars::new(&self.store, weights_grad);

        // alpha rows enter the tape once per role and are shared by cells
        let alpha_vars = match mode {
            SupernetMode::Continuous => {
                let down = leaf_alpha_weights(tape, &self.alpha_down)?;
                let up = leaf_alpha_weights(tape, &self.alpha_up)?;
                Some((down, up))
            }
            SupernetMode::Binarized { down, up } => {
                if down.active.len() != self.down_spec.edges.len() || up.active.len() != self.up_spec.edges.len() {
                    return Err(Error::config("binary gates do not match cell edge counts"));
                }
                None
            }
        };
        let (weights_down, weights_up) = match &alpha_vars {
            Some((d, u)) => (Some(softmax_rows(tape, d)?), Some(softmax_rows(tape, u)?)),
            None => (None, None),
        };

        let stem_out = self.stem.apply(tape, &mut pv, &self.store, batch)?;

        let mut down_outs: Vec<Var> = Vec::with_capacity(self.config.depth);
        for (d, cell) in self.down_cells.iter().enumerate() {
            let prev = if d == 0 { stem_out } else { down_outs[d - 1] };
            let prev_prev_raw = if d <= 1 { stem_out } else { down_outs[d - 2] };
            let prev_prev = match &cell.pre {
                Some(pre) => pre.apply(tape, &mut pv, &self.store, prev_prev_raw)?,
                None => prev_prev_raw,
            };
            let edge_mode = edge_mode_for(mode, &weights_down, CellRole::Down);
            let out = forward_cell(
                tape,
                &mut pv,
                &self.store,
                &self.down_spec,
                &cell.edges,
                &cell.proj,
                prev_prev,
                prev,
                edge_mode,
            )?;
            down_outs.push(out);
        }

        let mut cur = *down_outs.last().expect("depth >= 1");
        for (u, cell) in self.up_cells.iter().enumerate() {
            // mirror-level encoder output: the down cell producing the same
            // scale; the deepest cell pairs with itself at the boundary
            let skip = if u == 0 { cur } else { down_outs[self.config.depth - 1 - u] };
            let edge_mode = edge_mode_for(mode, &weights_up, CellRole::Up);
            cur = forward_cell(
                tape,
                &mut pv,
                &self.store,
                &self.up_spec,
                &cell.edges,
                &cell.proj,
                cur,
                skip,
                edge_mode,
            )?;
        }

        let head_w = pv.var(tape, &self.store, self.head_w)?;
        let head_b = pv.var(tape, &self.store, self.head_b)?;
        let logits = tape.conv2d(cur, head_w, Some(head_b), ConvSpec::plain(1, 0))?;
        Ok(ForwardPass { logits, params: pv, alpha_vars })
    }

    /// Derive the discrete architectures from the current alpha.
    pub fn derive_genotypes(&self) -> (Genotype, Genotype) {
        (
            crate::search_space::derive_genotype(&self.alpha_down, &self.down_spec),
            crate::search_space::derive_genotype(&self.alpha_up, &self.up_spec),
        )
    }

    pub fn weights_hash(&self) -> u64 {
        self.store.content_hash()
    }

    pub fn alpha_hash(&self) -> u64 {
        self.alpha_down.content_hash() ^ self.alpha_up.content_hash().rotate_left(1)
    }
}

fn edge_mode_for<'a>(
    mode: &'a SupernetMode,
    weights: &'a Option<Vec<Var>>,
    role: CellRole,
) -> CellEdgeMode<'a> {
    match mode {
        SupernetMode::Continuous => CellEdgeMode::Continuous(weights.as_ref().expect("weights prepared")),
        SupernetMode::Binarized { down, up } => CellEdgeMode::Binarized(match role {
            CellRole::Down => down,
            CellRole::Up => up,
        }),
    }
}

enum CellEdgeMode<'a> {
    /// Softmaxed alpha rows, one per edge.
    Continuous(&'a [Var]),
    Binarized(&'a BinaryGates),
}

fn leaf_alpha_weights<S: Scalar>(tape: &mut Tape<S>, alpha: &ArchParams<S>) -> Result<Vec<Var>> {
    alpha
        .rows()
        .iter()
        .map(|row| tape.leaf(row.clone(), Shape::vector(row.len()), true))
        .collect()
}

fn softmax_rows<S: Scalar>(tape: &mut Tape<S>, rows: &[Var]) -> Result<Vec<Var>> {
    rows.iter().map(|&r| tape.softmax_channels(r)).collect()
}

fn build_mixed_cell<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut Rng64,
    spec: &CellSpec,
    role_name: &str,
    index: usize,
    c_in: usize,
    pre: Option<ConvBlock>,
) -> Result<MixedCell> {
    let c_node = spec.role.resolution_role().ops()[0].contract().c_out(c_in);
    let mut edges = Vec::with_capacity(spec.edges.len());
    for (e, edge) in spec.edges.iter().enumerate() {
        let edge_c_in = if edge.src < 0 { c_in } else { c_node };
        edges.push(MixedOp::build(
            store,
            rng,
            &format!("{role_name}.{index}.edge.{e}"),
            edge.role(spec.role),
            edge_c_in,
        )?);
    }
    let proj = ConvBlock::build(
        store,
        rng,
        &format!("{role_name}.{index}.proj"),
        spec.m * c_node,
        c_node,
        1,
        ConvSpec::plain(1, 0),
    )?;
    Ok(MixedCell { edges, pre, proj })
}

/// Shared cell body: compute each intermediate node as the sum of its
/// incoming edge outputs, concatenate all nodes, and project.
#[allow(clippy::too_many_arguments)]
fn forward_cell<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &mut ParamVars,
    store: &ParamStore<S>,
    spec: &CellSpec,
    edges: &[MixedOp],
    proj: &ConvBlock,
    input_prev_prev: Var,
    input_prev: Var,
    mode: CellEdgeMode,
) -> Result<Var> {
    let mut nodes: Vec<Option<Var>> = vec![None; spec.m];
    for (e, edge) in spec.edges.iter().enumerate() {
        let src = match edge.src {
            -2 => input_prev_prev,
            -1 => input_prev,
            i => nodes[i as usize].expect("edges are enumerated in topological order"),
        };
        let out = match &mode {
            CellEdgeMode::Continuous(weights) => {
                edges[e].forward_continuous(tape, pv, store, src, weights[e])?
            }
            CellEdgeMode::Binarized(gates) => {
                edges[e].forward_binarized(tape, pv, store, src, gates.active[e])?
            }
        };
        nodes[edge.dst] = Some(match nodes[edge.dst] {
            Some(acc) => tape.add(acc, out)?,
            None => out,
        });
    }
    let node_vars: Vec<Var> = nodes.into_iter().map(|n| n.expect("every node has edges")).collect();
    let cat = tape.concat_channels(&node_vars)?;
    proj.apply(tape, pv, store, cat)
}

/// A discrete network instantiated from derived genotypes: the same
/// skeleton with each mixed edge replaced by its chosen single op and
/// non-retained edges absent.
pub struct DiscreteNet<S: Scalar> {
    pub config: NetworkConfig,
    pub store: ParamStore<S>,
    pub genotype_down: Genotype,
    pub genotype_up: Genotype,
    stem: ConvBlock,
    down_cells: Vec<DiscreteCell>,
    up_cells: Vec<DiscreteCell>,
    head_w: ParamId,
    head_b: ParamId,
}

struct DiscreteCell {
    /// (edge, index of the edge in the full enumeration, index of the op in
    /// the edge's candidate set, the built op)
    ops: Vec<(Edge, usize, usize, PrimitiveInstance)>,
    pre: Option<ConvBlock>,
    proj: ConvBlock,
}

impl<S: Scalar> DiscreteNet<S> {
    /// Fresh-weight instantiation (retraining starts from scratch).
    pub fn build(
        genotype_down: Genotype,
        genotype_up: Genotype,
        config: NetworkConfig,
        seed: u64,
    ) -> Result<DiscreteNet<S>> {
        config.validate()?;
        if genotype_down.m != config.m || genotype_up.m != config.m {
            return Err(Error::config(format!(
                "genotype node counts ({}, {}) do not match configured m = {}",
                genotype_down.m, genotype_up.m, config.m
            )));
        }
        if genotype_down.role != CellRole::Down || genotype_up.role != CellRole::Up {
            return Err(Error::config("genotype roles are swapped"));
        }
        genotype_down.validate()?;
        genotype_up.validate()?;

        let mut store = ParamStore::new();
        let mut rng = Rng64::derive(seed, &[0x6e65_74]);
        let stem = ConvBlock::build(
            &mut store,
            &mut rng,
            "stem",
            config.in_channels,
            config.base_channels,
            3,
            ConvSpec::plain(1, 1),
        )?;

        let mut down_cells = Vec::with_capacity(config.depth);
        for d in 0..config.depth {
            let c_in = config.channels_at(d);
            let pre = if d == 0 {
                None
            } else {
                Some(ConvBlock::build(
                    &mut store,
                    &mut rng,
                    &format!("down.{d}.pre"),
                    c_in / 2,
                    c_in,
                    1,
                    ConvSpec::plain(2, 0),
                )?)
            };
            down_cells.push(build_discrete_cell(&mut store, &mut rng, &genotype_down, "down", d, c_in, pre)?);
        }
        let mut up_cells = Vec::with_capacity(config.depth);
        for u in 0..config.depth {
            let c_in = config.channels_at(config.depth - u);
            up_cells.push(build_discrete_cell(&mut store, &mut rng, &genotype_up, "up", u, c_in, None)?);
        }

        let head_w = store.add(
            "head.conv.w",
            Shape::new(config.num_classes, config.base_channels, 1, 1),
            Init::HeUniform { fan_in: config.base_channels },
            &mut rng,
        )?;
        let head_b = store.add("head.conv.b", Shape::vector(config.num_classes), Init::Zeros, &mut rng)?;

        Ok(DiscreteNet {
            config,
            store,
            genotype_down,
            genotype_up,
            stem,
            down_cells,
            up_cells,
            head_w,
            head_b,
        })
    }

    pub fn forward(&self, tape: &mut Tape<S>, batch: Var, weights_grad: bool) -> Result<ForwardPass> {
        let bs = tape.shape(batch);
        if bs.c != self.config.in_channels || bs.h != self.config.input_h || bs.w != self.config.input_w {
            return Err(Error::config(format!(
                "batch {} does not match configured input ({},{},{})",
                bs, self.config.in_channels, self.config.input_h, self.config.input_w
            )));
        }
        let mut pv = ParamVars::new(&self.store, weights_grad);
        let stem_out = self.stem.apply(tape, &mut pv, &self.store, batch)?;

        let mut down_outs: Vec<Var> = Vec::with_capacity(self.config.depth);
        for (d, cell) in self.down_cells.iter().enumerate() {
            let prev = if d == 0 { stem_out } else { down_outs[d - 1] };
            let prev_prev_raw = if d <= 1 { stem_out } else { down_outs[d - 2] };
            let prev_prev = match &cell.pre {
                Some(pre) => pre.apply(tape, &mut pv, &self.store, prev_prev_raw)?,
                None => prev_prev_raw,
            };
            down_outs.push(forward_discrete_cell(tape, &mut pv, &self.store, cell, self.config.m, prev_prev, prev)?);
        }

        let mut cur = *down_outs.last().expect("depth >= 1");
        for (u, cell) in self.up_cells.iter().enumerate() {
            let skip = if u == 0 { cur } else { down_outs[self.config.depth - 1 - u] };
            cur = forward_discrete_cell(tape, &mut pv, &self.store, cell, self.config.m, cur, skip)?;
        }

        let head_w = pv.var(tape, &self.store, self.head_w)?;
        let head_b = pv.var(tape, &self.store, self.head_b)?;
        let logits = tape.conv2d(cur, head_w, Some(head_b), ConvSpec::plain(1, 0))?;
        Ok(ForwardPass { logits, params: pv, alpha_vars: None })
    }

    /// Copy the supernet's weights for every chosen op (and all shared
    /// skeleton blocks) into this network. With hard one-hot alpha and no
    /// pruned edges the two then compute identical functions.
    pub fn copy_weights_from(&mut self, sup: &Supernet<S>) -> Result<()> {
        for id in self.store.ids().collect::<Vec<_>>() {
            let dname = self.store.get(id).name.clone();
            let sup_name = match edge_param_rewrite(&dname, &self.down_cells, &self.up_cells) {
                Some(rewritten) => rewritten,
                None => dname.clone(),
            };
            let src = sup
                .store
                .find(&sup_name)
                .ok_or_else(|| Error::config(format!("no supernet parameter {sup_name} for {dname}")))?;
            let src_data = sup.store.get(src).data.clone();
            let dst = self.store.get_mut(id);
            if src_data.len() != dst.data.len() {
                return Err(Error::config(format!("parameter size mismatch for {dname}")));
            }
            dst.data = src_data;
        }
        Ok(())
    }

    pub fn weights_hash(&self) -> u64 {
        self.store.content_hash()
    }
}

/// Map a discrete edge parameter name ("down.0.edge.3.s0.conv.w") to its
/// supernet counterpart ("down.0.edge.3.op.2.s0.conv.w").
fn edge_param_rewrite(name: &str, down: &[DiscreteCell], up: &[DiscreteCell]) -> Option<String> {
    let mut parts = name.splitn(4, '.');
    let role = parts.next()?;
    let cell_idx: usize = parts.next()?.parse().ok()?;
    let kw = parts.next()?;
    let rest = parts.next()?;
    if kw != "edge" {
        return None;
    }
    let (edge_idx_str, suffix) = rest.split_once('.')?;
    let edge_idx: usize = edge_idx_str.parse().ok()?;
    let cells = match role {
        "down" => down,
        "up" => up,
        _ => return None,
    };
    let cell = cells.get(cell_idx)?;
    let (_, _, op_idx, _) = cell.ops.iter().find(|(_, e, _, _)| *e == edge_idx)?;
    Some(format!("{role}.{cell_idx}.edge.{edge_idx}.op.{op_idx}.{suffix}"))
}

fn build_discrete_cell<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut Rng64,
    genotype: &Genotype,
    role_name: &str,
    index: usize,
    c_in: usize,
    pre: Option<ConvBlock>,
) -> Result<DiscreteCell> {
    let spec = CellSpec::new(genotype.role, genotype.m)?;
    let all_edges = enumerate_edges(genotype.m)?;
    let c_node = spec.role.resolution_role().ops()[0].contract().c_out(c_in);
    // process retained edges in enumeration order so sources are always
    // computed before use, whatever order the genotype file listed them in
    let mut chosen: Vec<(Edge, crate::primitives::PrimitiveKind, usize)> = genotype
        .chosen
        .iter()
        .map(|(edge, kind)| {
            let idx = all_edges.iter().position(|e| e == edge).ok_or_else(|| {
                Error::config(format!("genotype edge {} <- {} not in cell DAG", edge.dst, edge.src))
            })?;
            Ok((*edge, *kind, idx))
        })
        .collect::<Result<_>>()?;
    chosen.sort_by_key(|(_, _, idx)| *idx);
    let mut ops = Vec::with_capacity(chosen.len());
    for (edge, kind, edge_idx) in &chosen {
        let (edge, kind, edge_idx) = (edge, kind, *edge_idx);
        let role = edge.role(genotype.role);
        let op_idx = role
            .ops()
            .iter()
            .position(|k| k == kind)
            .expect("validated genotype ops are in their edge's set");
        let edge_c_in = if edge.src < 0 { c_in } else { c_node };
        let inst = build_primitive(
            store,
            rng,
            &format!("{role_name}.{index}.edge.{edge_idx}"),
            *kind,
            edge_c_in,
            role,
        )?;
        ops.push((*edge, edge_idx, op_idx, inst));
    }
    let proj = ConvBlock::build(
        store,
        rng,
        &format!("{role_name}.{index}.proj"),
        genotype.m * c_node,
        c_node,
        1,
        ConvSpec::plain(1, 0),
    )?;
    Ok(DiscreteCell { ops, pre, proj })
}

fn forward_discrete_cell<S: Scalar>(
    tape: &mut Tape<S>,
    pv: &mut ParamVars,
    store: &ParamStore<S>,
    cell: &DiscreteCell,
    m: usize,
    input_prev_prev: Var,
    input_prev: Var,
) -> Result<Var> {
    let mut nodes: Vec<Option<Var>> = vec![None; m];
    for (edge, _, _, op) in &cell.ops {
        let src = match edge.src {
            -2 => input_prev_prev,
            -1 => input_prev,
            i => nodes[i as usize]
                .ok_or_else(|| Error::config(format!("edge source node {i} has no retained inputs")))?,
        };
        let out = op.apply(tape, pv, store, src)?;
        nodes[edge.dst] = Some(match nodes[edge.dst] {
            Some(acc) => tape.add(acc, out)?,
            None => out,
        });
    }
    let node_vars: Vec<Var> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| Error::config(format!("node {i} has no incoming edges"))))
        .collect::<Result<_>>()?;
    let cat = tape.concat_channels(&node_vars)?;
    cell.proj.apply(tape, pv, store, cat)
}

#[cfg(test)]
mod tests;
