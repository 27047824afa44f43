//! Cell search space: a DAG of mixed edges over the primitive op sets.
//!
//! A cell has two input nodes (-2, -1) holding the outputs of the two
//! previous layers and M intermediate nodes. Every intermediate node j
//! receives one edge from each input node and one from each earlier
//! intermediate node, giving K = 2M + M(M-1)/2 edges. Edges leaving input
//! nodes carry the resolution-changing candidate set (down or up, by cell
//! role); edges between intermediate nodes carry the normal set, so all
//! intermediate nodes live at one spatial/channel scale.

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::primitives::{build_primitive, EdgeRole, PrimitiveInstance, PrimitiveKind};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Shape, Tape, Var};

/// Which half of the network a cell (and its shared alpha) belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellRole {
    Down,
    Up,
}

impl CellRole {
    pub fn name(self) -> &'static str {
        match self {
            CellRole::Down => "down",
            CellRole::Up => "up",
        }
    }

    pub fn parse(s: &str) -> Option<CellRole> {
        match s {
            "down" => Some(CellRole::Down),
            "up" => Some(CellRole::Up),
            _ => None,
        }
    }

    /// Candidate-set role of the resolution-changing edges in this cell.
    pub fn resolution_role(self) -> EdgeRole {
        match self {
            CellRole::Down => EdgeRole::Down,
            CellRole::Up => EdgeRole::Up,
        }
    }
}

/// A directed edge of the cell DAG. Sources -2 and -1 are the input nodes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Edge {
    pub src: isize,
    pub dst: usize,
}

impl Edge {
    pub fn role(&self, cell: CellRole) -> EdgeRole {
        if self.src < 0 {
            cell.resolution_role()
        } else {
            EdgeRole::Normal
        }
    }
}

/// Closed-form edge count: K = 2M + M(M-1)/2.
pub fn edge_count(m: usize) -> usize {
    2 * m + m * (m - 1) / 2
}

/// Deterministic edge enumeration: for each destination node in order,
/// sources -2, -1, 0, .., dst-1.
pub fn enumerate_edges(m: usize) -> Result<Vec<Edge>> {
    if m < 1 {
        return Err(Error::config(format!("cell needs at least one intermediate node, got {m}")));
    }
    let mut edges = Vec::with_capacity(edge_count(m));
    for dst in 0..m {
        edges.push(Edge { src: -2, dst });
        edges.push(Edge { src: -1, dst });
        for src in 0..dst {
            edges.push(Edge { src: src as isize, dst });
        }
    }
    Ok(edges)
}

/// Cell topology shared by all cells of one role.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub role: CellRole,
    pub m: usize,
    pub edges: Vec<Edge>,
}

impl CellSpec {
    pub fn new(role: CellRole, m: usize) -> Result<CellSpec> {
        Ok(CellSpec { role, m, edges: enumerate_edges(m)? })
    }

    pub fn op_set(&self, edge: &Edge) -> &'static [PrimitiveKind] {
        edge.role(self.role).ops()
    }
}

/// Architecture parameters: one real vector per edge, shared across all
/// cells of the same role. Softmax of a row gives the path weights.
#[derive(Clone, Debug)]
pub struct ArchParams<S: Scalar> {
    pub role: CellRole,
    rows: Vec<Vec<S>>,
}

impl<S: Scalar> ArchParams<S> {
    /// Zero-initialized (uniform mixture over candidates).
    pub fn zeros(spec: &CellSpec) -> ArchParams<S> {
        let rows = spec
            .edges
            .iter()
            .map(|e| vec![S::ZERO; spec.op_set(e).len()])
            .collect();
        ArchParams { role: spec.role, rows }
    }

    pub fn num_edges(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, edge: usize) -> &[S] {
        &self.rows[edge]
    }

    pub fn row_mut(&mut self, edge: usize) -> &mut [S] {
        &mut self.rows[edge]
    }

    pub fn rows(&self) -> &[Vec<S>] {
        &self.rows
    }

    pub fn row_f64(&self, edge: usize) -> Vec<f64> {
        self.rows[edge].iter().map(|v| v.to_f64()).collect()
    }

    /// Saturate one row towards a hard one-hot choice (+/-40 logits).
    pub fn set_one_hot(&mut self, edge: usize, op: usize) {
        for (i, v) in self.rows[edge].iter_mut().enumerate() {
            *v = S::from_f64(if i == op { 40.0 } else { -40.0 });
        }
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for row in &self.rows {
            for &v in row {
                h ^= v.to_bits_u64();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// One sampled active path per edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryGates {
    pub active: Vec<usize>,
}

/// Sample one active op per edge from Categorical(softmax(alpha_row)).
/// Deterministic given the generator state.
pub fn sample_binary_gates<S: Scalar>(alpha: &ArchParams<S>, rng: &mut Rng64) -> BinaryGates {
    let active = alpha
        .rows()
        .iter()
        .map(|row| {
            let probs = softmax_slice(&row.iter().map(|v| v.to_f64()).collect::<Vec<_>>());
            let u = rng.next_f64();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        })
        .collect();
    BinaryGates { active }
}

/// Deterministic gates: per edge, the current argmax op (ties -> lowest).
pub fn argmax_gates<S: Scalar>(alpha: &ArchParams<S>) -> BinaryGates {
    let active = alpha.rows().iter().map(|row| argmax(row)).collect();
    BinaryGates { active }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// All candidate ops of one edge, built over a shared parameter store.
pub struct MixedOp {
    pub candidates: Vec<PrimitiveInstance>,
}

impl MixedOp {
    /// Build every candidate of the edge's op set, named `{prefix}.op.{i}`.
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut Rng64,
        prefix: &str,
        role: EdgeRole,
        c_in: usize,
    ) -> Result<MixedOp> {
        let candidates = role
            .ops()
            .iter()
            .enumerate()
            .map(|(i, &kind)| build_primitive(store, rng, &format!("{prefix}.op.{i}"), kind, c_in, role))
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedOp { candidates })
    }

    /// Continuous relaxation: softmax-weighted sum of all candidate outputs.
    /// `weights` is the softmaxed alpha row on the tape, shape (1,N,1,1).
    pub fn forward_continuous<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pv: &mut ParamVars,
        store: &ParamStore<S>,
        x: Var,
        weights: Var,
    ) -> Result<Var> {
        if tape.shape(weights) != Shape::vector(self.candidates.len()) {
            return Err(Error::config(format!(
                "mixed op: weight vector {} does not match {} candidates",
                tape.shape(weights),
                self.candidates.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (i, op) in self.candidates.iter().enumerate() {
            let out = op.apply(tape, pv, store, x)?;
            let scaled = tape.scale_by_element(out, weights, i)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        Ok(acc.expect("op sets are non-empty"))
    }

    /// Binarized path: only the gated candidate is computed, so memory and
    /// compute per edge are independent of the candidate count.
    pub fn forward_binarized<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pv: &mut ParamVars,
        store: &ParamStore<S>,
        x: Var,
        gate: usize,
    ) -> Result<Var> {
        let op = self
            .candidates
            .get(gate)
            .ok_or_else(|| Error::config(format!("gate {gate} out of range for {} candidates", self.candidates.len())))?;
        op.apply(tape, pv, store, x)
    }
}

/// The discrete architecture extracted from trained alpha: one op per
/// retained edge, exactly two retained inputs per intermediate node.
#[derive(Clone, Debug, PartialEq)]
pub struct Genotype {
    pub role: CellRole,
    pub m: usize,
    pub chosen: Vec<(Edge, PrimitiveKind)>,
}

/// Redundant-path removal: keep the argmax op of every edge, then per node
/// the two incoming edges with the largest kept-op softmax weight.
/// Ties break to the lowest op/edge index.
pub fn derive_genotype<S: Scalar>(alpha: &ArchParams<S>, spec: &CellSpec) -> Genotype {
    assert_eq!(alpha.num_edges(), spec.edges.len(), "alpha/spec edge count mismatch");
    let mut best_per_edge = Vec::with_capacity(spec.edges.len());
    for (i, edge) in spec.edges.iter().enumerate() {
        let probs = softmax_slice(&alpha.row_f64(i));
        let op = argmax(&probs);
        best_per_edge.push((spec.op_set(edge)[op], probs[op]));
    }

    let mut retained = vec![false; spec.edges.len()];
    for dst in 0..spec.m {
        let mut incoming: Vec<(usize, f64)> = spec
            .edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.dst == dst)
            .map(|(i, _)| (i, best_per_edge[i].1))
            .collect();
        // highest weight first, lower edge index wins ties
        incoming.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(i, _) in incoming.iter().take(2) {
            retained[i] = true;
        }
    }

    let chosen = spec
        .edges
        .iter()
        .enumerate()
        .filter(|(i, _)| retained[*i])
        .map(|(i, e)| (*e, best_per_edge[i].0))
        .collect();
    Genotype { role: spec.role, m: spec.m, chosen }
}

impl Genotype {
    /// Structural invariants: exactly two incoming edges per node, legal op
    /// per edge position, sources precede destinations.
    pub fn validate(&self) -> Result<()> {
        let mut incoming = vec![0usize; self.m];
        for (edge, kind) in &self.chosen {
            if edge.dst >= self.m {
                return Err(Error::data(format!("genotype: node {} out of range for m={}", edge.dst, self.m)));
            }
            if edge.src < -2 || edge.src >= edge.dst as isize {
                return Err(Error::data(format!("genotype: invalid edge {} <- {}", edge.dst, edge.src)));
            }
            if !kind.legal_for(edge.role(self.role)) {
                return Err(Error::data(format!(
                    "genotype: op {} illegal on edge {} <- {}",
                    kind.name(),
                    edge.dst,
                    edge.src
                )));
            }
            incoming[edge.dst] += 1;
        }
        for (node, &count) in incoming.iter().enumerate() {
            if count != 2 {
                return Err(Error::data(format!(
                    "genotype: node {node} has {count} incoming edges, expected 2"
                )));
            }
        }
        Ok(())
    }

    /// Human-readable serialization: a commented header carrying the node
    /// count and engine version, then one `role dst <- src : op` line per
    /// retained edge.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# genotype\n");
        out.push_str(&format!("# version = {}\n", env!("CARGO_PKG_VERSION")));
        out.push_str(&format!("# role = {}\n", self.role.name()));
        out.push_str(&format!("# m = {}\n", self.m));
        for (edge, kind) in &self.chosen {
            out.push_str(&format!("{} {} <- {} : {}\n", self.role.name(), edge.dst, edge.src, kind.name()));
        }
        out
    }

    /// Parse the text form, reporting the file name, line number, and
    /// offending token on error.
    pub fn parse(text: &str, source: &str) -> Result<Genotype> {
        let mut role: Option<CellRole> = None;
        let mut m: Option<usize> = None;
        let mut chosen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    match k.trim() {
                        "role" => {
                            role = Some(CellRole::parse(v.trim()).ok_or_else(|| {
                                Error::data(format!("{source}:{lineno}: unknown role '{}'", v.trim()))
                            })?)
                        }
                        "m" => {
                            m = Some(v.trim().parse().map_err(|_| {
                                Error::data(format!("{source}:{lineno}: invalid node count '{}'", v.trim()))
                            })?)
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() != 6 || tokens[2] != "<-" || tokens[4] != ":" {
                return Err(Error::data(format!(
                    "{source}:{lineno}: expected 'role dst <- src : op', got '{line}'"
                )));
            }
            let line_role = CellRole::parse(tokens[0])
                .ok_or_else(|| Error::data(format!("{source}:{lineno}: unknown role '{}'", tokens[0])))?;
            let dst: usize = tokens[1]
                .parse()
                .map_err(|_| Error::data(format!("{source}:{lineno}: invalid node index '{}'", tokens[1])))?;
            let src: isize = tokens[3]
                .parse()
                .map_err(|_| Error::data(format!("{source}:{lineno}: invalid source index '{}'", tokens[3])))?;
            let kind = PrimitiveKind::parse(tokens[5])
                .ok_or_else(|| Error::data(format!("{source}:{lineno}: unknown op name '{}'", tokens[5])))?;
            if let Some(r) = role {
                if r != line_role {
                    return Err(Error::data(format!(
                        "{source}:{lineno}: role '{}' conflicts with header '{}'",
                        tokens[0],
                        r.name()
                    )));
                }
            } else {
                role = Some(line_role);
            }
            chosen.push((Edge { src, dst }, kind));
        }
        let role = role.ok_or_else(|| Error::data(format!("{source}: no role declared")))?;
        let m = m.ok_or_else(|| Error::data(format!("{source}: missing '# m =' header")))?;
        let genotype = Genotype { role, m, chosen };
        genotype.validate()?;
        Ok(genotype)
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut fnv = |byte: u64| {
            h ^= byte;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        fnv(self.role as u64);
        fnv(self.m as u64);
        for (edge, kind) in &self.chosen {
            fnv(edge.src as u64);
            fnv(edge.dst as u64);
            fnv(*kind as u64);
        }
        h
    }

    /// Fixed reference cell: plain stride-changing convolutions from the
    /// input nodes and 3x3 convolutions along the intermediate chain. This
    /// is the hand-built baseline the searched cells are compared against.
    pub fn handbuilt(role: CellRole, m: usize) -> Genotype {
        let res_op = match role {
            CellRole::Down => PrimitiveKind::DownConv,
            CellRole::Up => PrimitiveKind::UpConv,
        };
        let mut chosen = Vec::new();
        for dst in 0..m {
            if dst == 0 {
                chosen.push((Edge { src: -2, dst }, res_op));
                chosen.push((Edge { src: -1, dst }, res_op));
            } else {
                chosen.push((Edge { src: -1, dst }, res_op));
                chosen.push((Edge { src: dst as isize - 1, dst }, PrimitiveKind::Conv));
            }
        }
        Genotype { role, m, chosen }
    }
}

#[cfg(test)]
mod tests;
