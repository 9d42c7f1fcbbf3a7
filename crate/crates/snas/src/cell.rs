//! DAG cells: masked forward pass, cell stacking into a network, and
//! child-graph derivation.
//!
//! Each intermediate node is the mask-weighted sum of candidate-op outputs
//! over its incoming edges; the cell output concatenates the intermediate
//! nodes along channels. Normal cells share one logit matrix, reduction cells
//! another.

use rand::Rng;

use crate::arch::{self, ArchParams, CellType};
use crate::error::TensorError;
use crate::ops::{apply_op, OpKind};
use crate::params::{Ctx, Init};
use crate::tensor::{Element, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

/// Node indexing: 0 and 1 are the cell inputs, 2..2+N the intermediates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParentGraph {
    pub num_intermediate: usize,
    pub candidates: Vec<OpKind>,
    pub edges: Vec<(usize, usize)>,
}

impl ParentGraph {
    pub fn new(num_intermediate: usize, candidates: Vec<OpKind>) -> Self {
        let mut edges = Vec::new();
        for j in 2..2 + num_intermediate {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        ParentGraph {
            num_intermediate,
            candidates,
            edges,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
}

// ── Genotype ────────────────────────────────────────────────────────────

/// One chosen op per edge per cell type; `zero` drops the edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub normal: Vec<OpKind>,
    pub reduce: Vec<OpKind>,
}

impl Genotype {
    pub fn ops(&self, cell_type: CellType) -> &[OpKind] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    /// One line per edge: `celltype edge(i,j) opname`.
    pub fn render(&self, graph: &ParentGraph) -> String {
        let mut out = String::new();
        for (cell_type, ops) in [(CellType::Normal, &self.normal), (CellType::Reduce, &self.reduce)] {
            for (e, &(i, j)) in graph.edges.iter().enumerate() {
                out.push_str(&format!("{} edge({i},{j}) {}\n", cell_type.name(), ops[e].name()));
            }
        }
        out
    }

    pub fn parse(text: &str, graph: &ParentGraph) -> Result<Self> {
        let mut normal = vec![None; graph.num_edges()];
        let mut reduce = vec![None; graph.num_edges()];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || TensorError::invalid("genotype", format!("unparseable line: {line}"));
            let mut parts = line.split_whitespace();
            let (ct, edge, opname) = (
                parts.next().ok_or_else(bad)?,
                parts.next().ok_or_else(bad)?,
                parts.next().ok_or_else(bad)?,
            );
            let inner = edge
                .strip_prefix("edge(")
                .and_then(|s| s.strip_suffix(')'))
                .ok_or_else(bad)?;
            let (i, j) = inner.split_once(',').ok_or_else(bad)?;
            let ij: (usize, usize) = (
                i.trim().parse().map_err(|_| bad())?,
                j.trim().parse().map_err(|_| bad())?,
            );
            let e = graph
                .edges
                .iter()
                .position(|&x| x == ij)
                .ok_or_else(|| TensorError::invalid("genotype", format!("unknown edge {ij:?}")))?;
            let op = OpKind::parse(opname)
                .ok_or_else(|| TensorError::invalid("genotype", format!("unknown op {opname}")))?;
            match ct {
                "normal" => normal[e] = Some(op),
                "reduce" => reduce[e] = Some(op),
                _ => return Err(bad()),
            }
        }
        let fill = |v: Vec<Option<OpKind>>, ct: &str| -> Result<Vec<OpKind>> {
            v.into_iter()
                .enumerate()
                .map(|(e, o)| {
                    o.ok_or_else(|| TensorError::invalid("genotype", format!("missing {ct} edge {e}")))
                })
                .collect()
        };
        Ok(Genotype {
            normal: fill(normal, "normal")?,
            reduce: fill(reduce, "reduce")?,
        })
    }

    /// Graph-description output for visualization; zero edges are omitted.
    pub fn to_dot(&self, graph: &ParentGraph) -> String {
        let mut out = String::from("digraph cells {\n  rankdir=LR;\n");
        for (cell_type, ops) in [(CellType::Normal, &self.normal), (CellType::Reduce, &self.reduce)] {
            let ct = cell_type.name();
            out.push_str(&format!("  subgraph cluster_{ct} {{\n    label=\"{ct}\";\n"));
            for n in 0..2 + graph.num_intermediate {
                let label = if n < 2 {
                    format!("in{n}")
                } else {
                    format!("n{}", n - 2)
                };
                out.push_str(&format!("    {ct}_{n} [label=\"{label}\"];\n"));
            }
            for (e, &(i, j)) in graph.edges.iter().enumerate() {
                if ops[e] == OpKind::Zero {
                    continue;
                }
                out.push_str(&format!("    {ct}_{i} -> {ct}_{j} [label=\"{}\"];\n", ops[e].name()));
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        out
    }
}

/// Per-edge argmax over logits, zero included; ties go to the lowest index.
pub fn derive_genotype(alpha: &ArchParams, graph: &ParentGraph) -> Genotype {
    let pick = |rows: &[Vec<f64>]| -> Vec<OpKind> {
        rows.iter().map(|r| graph.candidates[arch::argmax(r)]).collect()
    };
    Genotype {
        normal: pick(&alpha.normal),
        reduce: pick(&alpha.reduce),
    }
}

/// How edge masks are produced during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskMode<'a> {
    /// Concrete relaxation: Z = softmax((log α + G)/λ) with fresh Gumbels.
    Sampled { lambda: f64 },
    /// Deterministic softmax attention over ops (no noise).
    Expectation,
    /// One-hot masks from a fixed child graph.
    Hard(&'a Genotype),
}

// ── Cell forward ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EdgeTrace {
    pub from: usize,
    pub to: usize,
    /// Mask row on the tape, shape [num candidates].
    pub z: TensorId,
    pub op_outputs: Vec<TensorId>,
    /// Z-weighted sum of the op outputs.
    pub mixed: TensorId,
}

#[derive(Debug, Clone)]
pub struct CellTrace {
    /// Preprocessed inputs followed by the intermediate nodes.
    pub nodes: Vec<TensorId>,
    pub edges: Vec<EdgeTrace>,
    pub output: TensorId,
}

fn preprocess<E: Element>(
    ctx: &mut Ctx<E>,
    name: &str,
    x: TensorId,
    out_c: usize,
    stride: usize,
) -> Result<TensorId> {
    let in_c = ctx.tape.shape(x)[1];
    let y = ctx.tape.relu(x)?;
    let fan_in = in_c;
    let w = ctx.param(&format!("{name}.weight"), &[out_c, in_c, 1, 1], Init::HeNormal { fan_in })?;
    let y = ctx.tape.conv2d(
        y,
        w,
        crate::tensor::ConvSpec {
            stride,
            pad: 0,
            dilation: 1,
            groups: 1,
        },
    )?;
    let gamma = ctx.param(&format!("{name}.gamma"), &[out_c], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.beta"), &[out_c], Init::Zeros)?;
    ctx.tape.batch_norm2d(y, gamma, beta, crate::ops::BN_EPS)
}

/// Masked forward through one cell. `masks` holds one on-tape simplex row per
/// edge, aligned with `graph.edges`; every candidate op executes and the edge
/// value is the mask-weighted sum.
pub fn cell_forward<E: Element>(
    ctx: &mut Ctx<E>,
    graph: &ParentGraph,
    prefix: &str,
    s0: TensorId,
    s1: TensorId,
    channels: usize,
    reduction: bool,
    masks: &[TensorId],
) -> Result<CellTrace> {
    if masks.len() != graph.num_edges() {
        return Err(TensorError::shape(
            "cell_forward",
            format!("{} masks for {} edges", masks.len(), graph.num_edges()),
        ));
    }
    let s1_h = ctx.tape.shape(s1)[2];
    let s0_h = ctx.tape.shape(s0)[2];
    let stride0 = if s0_h == s1_h { 1 } else { 2 };
    let x0 = preprocess(ctx, &format!("{prefix}.pre0"), s0, channels, stride0)?;
    let x1 = preprocess(ctx, &format!("{prefix}.pre1"), s1, channels, 1)?;
    let mut nodes = vec![x0, x1];
    let mut edge_traces = Vec::with_capacity(graph.num_edges());
    for j in 2..2 + graph.num_intermediate {
        let mut node_acc: Option<TensorId> = None;
        for (e, &(i, jj)) in graph.edges.iter().enumerate() {
            if jj != j {
                continue;
            }
            let stride = if reduction && i < 2 { 2 } else { 1 };
            let x_i = nodes[i];
            let mut op_outputs = Vec::with_capacity(graph.candidates.len());
            let mut mixed: Option<TensorId> = None;
            for (k, &kind) in graph.candidates.iter().enumerate() {
                let out = apply_op(
                    ctx,
                    kind,
                    x_i,
                    &format!("{prefix}.e{e}.{}", kind.name()),
                    channels,
                    channels,
                    stride,
                )?;
                op_outputs.push(out);
                let zk = ctx.tape.index(masks[e], k)?;
                let term = ctx.tape.scalar_mul(zk, out)?;
                mixed = Some(match mixed {
                    None => term,
                    Some(m) => ctx.tape.add(m, term)?,
                });
            }
            let mixed = mixed.expect("nonempty candidate list");
            edge_traces.push(EdgeTrace {
                from: i,
                to: j,
                z: masks[e],
                op_outputs,
                mixed,
            });
            node_acc = Some(match node_acc {
                None => mixed,
                Some(a) => ctx.tape.add(a, mixed)?,
            });
        }
        nodes.push(node_acc.expect("every intermediate has incoming edges"));
    }
    let output = ctx.tape.concat_channels(&nodes[2..])?;
    Ok(CellTrace {
        nodes,
        edges: edge_traces,
        output,
    })
}

/// Subgraph execution of a derived child: only the chosen op per edge runs,
/// zero edges are skipped entirely. Parameter names match `cell_forward`, so
/// both paths share weights.
pub fn cell_forward_subgraph<E: Element>(
    ctx: &mut Ctx<E>,
    graph: &ParentGraph,
    prefix: &str,
    s0: TensorId,
    s1: TensorId,
    channels: usize,
    reduction: bool,
    chosen: &[OpKind],
) -> Result<CellTrace> {
    let s1_h = ctx.tape.shape(s1)[2];
    let s0_h = ctx.tape.shape(s0)[2];
    let stride0 = if s0_h == s1_h { 1 } else { 2 };
    let x0 = preprocess(ctx, &format!("{prefix}.pre0"), s0, channels, stride0)?;
    let x1 = preprocess(ctx, &format!("{prefix}.pre1"), s1, channels, 1)?;
    let mut nodes = vec![x0, x1];
    for j in 2..2 + graph.num_intermediate {
        let mut node_acc: Option<TensorId> = None;
        let mut zero_shape: Option<Vec<usize>> = None;
        for (e, &(i, jj)) in graph.edges.iter().enumerate() {
            if jj != j {
                continue;
            }
            let stride = if reduction && i < 2 { 2 } else { 1 };
            let kind = chosen[e];
            if kind == OpKind::Zero {
                let h = ctx.tape.shape(nodes[i])[2];
                let n = ctx.tape.shape(nodes[i])[0];
                let oh = crate::tensor::conv_out_dim(h, 1, stride, 0, 1).unwrap();
                zero_shape = Some(vec![n, channels, oh, oh]);
                continue;
            }
            let out = apply_op(
                ctx,
                kind,
                nodes[i],
                &format!("{prefix}.e{e}.{}", kind.name()),
                channels,
                channels,
                stride,
            )?;
            node_acc = Some(match node_acc {
                None => out,
                Some(a) => ctx.tape.add(a, out)?,
            });
        }
        let node = match node_acc {
            Some(a) => a,
            None => ctx.tape.zeros(&zero_shape.expect("at least one incoming edge")),
        };
        nodes.push(node);
    }
    let output = ctx.tape.concat_channels(&nodes[2..])?;
    Ok(CellTrace {
        nodes,
        edges: Vec::new(),
        output,
    })
}

// ── Network ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub num_cells: usize,
    pub num_intermediate: usize,
    pub init_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub candidates: Vec<OpKind>,
    /// When false every cell is a normal cell (tiny test networks).
    pub use_reduction: bool,
}

impl NetworkSpec {
    pub fn graph(&self) -> ParentGraph {
        ParentGraph::new(self.num_intermediate, self.candidates.clone())
    }

    /// Reduction cells at one and two thirds of the depth.
    pub fn is_reduction(&self, cell: usize) -> bool {
        self.use_reduction && (cell == self.num_cells / 3 || cell == 2 * self.num_cells / 3)
    }

    pub fn cell_type(&self, cell: usize) -> CellType {
        if self.is_reduction(cell) {
            CellType::Reduce
        } else {
            CellType::Normal
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkTrace {
    pub cells: Vec<CellTrace>,
    /// Per cell, per edge: the Gumbel draws used for its mask (sampled mode).
    pub gumbels: Vec<Vec<Option<Vec<f64>>>>,
    /// On-tape logit rows, shared by all cells of the type.
    pub arch_normal: Vec<TensorId>,
    pub arch_reduce: Vec<TensorId>,
    pub logits: TensorId,
}

fn stem<E: Element>(ctx: &mut Ctx<E>, x: TensorId, in_c: usize, out_c: usize) -> Result<TensorId> {
    let w = ctx.param(
        "stem.weight",
        &[out_c, in_c, 3, 3],
        Init::HeNormal { fan_in: in_c * 9 },
    )?;
    let y = ctx.tape.conv2d(
        x,
        w,
        crate::tensor::ConvSpec {
            stride: 1,
            pad: 1,
            dilation: 1,
            groups: 1,
        },
    )?;
    let gamma = ctx.param("stem.gamma", &[out_c], Init::Ones)?;
    let beta = ctx.param("stem.beta", &[out_c], Init::Zeros)?;
    ctx.tape.batch_norm2d(y, gamma, beta, crate::ops::BN_EPS)
}

fn classifier<E: Element>(ctx: &mut Ctx<E>, x: TensorId, classes: usize) -> Result<TensorId> {
    let y = ctx.tape.relu(x)?;
    let pooled = ctx.tape.global_avg_pool(y)?;
    let c = ctx.tape.shape(pooled)[1];
    let w = ctx.param("classifier.weight", &[c, classes], Init::HeNormal { fan_in: c })?;
    let b = ctx.param("classifier.bias", &[classes], Init::Zeros)?;
    let logits = ctx.tape.matmul(pooled, w)?;
    ctx.tape.add_row(logits, b)
}

/// Full masked forward: stem, stacked cells with per-cell fresh masks, global
/// average pooling, linear classifier. Cells of the same type share logits
/// but draw independent Gumbel noise.
pub fn network_forward<E: Element, R: Rng>(
    ctx: &mut Ctx<E>,
    spec: &NetworkSpec,
    images: TensorId,
    alpha: &ArchParams,
    mode: MaskMode,
    arch_trainable: bool,
    rng: &mut R,
) -> Result<NetworkTrace> {
    let graph = spec.graph();
    let num_ops = graph.candidates.len();
    let lift_rows = |ctx: &mut Ctx<E>, rows: &[Vec<f64>]| -> Result<Vec<TensorId>> {
        rows.iter()
            .map(|r| ctx.tape.leaf_f64(&[num_ops], r, arch_trainable))
            .collect()
    };
    let arch_normal = lift_rows(ctx, &alpha.normal)?;
    let arch_reduce = lift_rows(ctx, &alpha.reduce)?;

    let s = stem(ctx, images, spec.in_channels, spec.init_channels)?;
    let (mut s0, mut s1) = (s, s);
    let mut channels = spec.init_channels;
    let mut cells = Vec::with_capacity(spec.num_cells);
    let mut all_gumbels = Vec::with_capacity(spec.num_cells);
    for cell in 0..spec.num_cells {
        let reduction = spec.is_reduction(cell);
        if reduction {
            channels *= 2;
        }
        let rows = if reduction { &arch_reduce } else { &arch_normal };
        let mut masks = Vec::with_capacity(graph.num_edges());
        let mut cell_gumbels = Vec::with_capacity(graph.num_edges());
        for e in 0..graph.num_edges() {
            let (z, g) = match mode {
                MaskMode::Sampled { lambda } => {
                    let g = arch::draw_gumbels(num_ops, rng);
                    let z = arch::relaxed_sample_on_tape(ctx.tape, rows[e], &g, lambda)?;
                    (z, Some(g))
                }
                MaskMode::Expectation => (ctx.tape.softmax1d(rows[e])?, None),
                MaskMode::Hard(genotype) => {
                    let ops = genotype.ops(spec.cell_type(cell));
                    let k = graph
                        .candidates
                        .iter()
                        .position(|&c| c == ops[e])
                        .ok_or_else(|| {
                            TensorError::invalid("network_forward", format!("op {} not a candidate", ops[e].name()))
                        })?;
                    let z = ctx.tape.leaf_f64(&[num_ops], &arch::one_hot(num_ops, k), false)?;
                    (z, None)
                }
            };
            masks.push(z);
            cell_gumbels.push(g);
        }
        let trace = cell_forward(
            ctx,
            &graph,
            &format!("cell{cell}"),
            s0,
            s1,
            channels,
            reduction,
            &masks,
        )?;
        s0 = s1;
        s1 = trace.output;
        cells.push(trace);
        all_gumbels.push(cell_gumbels);
    }
    let logits = classifier(ctx, s1, spec.num_classes)?;
    Ok(NetworkTrace {
        cells,
        gumbels: all_gumbels,
        arch_normal,
        arch_reduce,
        logits,
    })
}

/// Forward through the derived child graph only; parameters shared by name
/// with the masked network.
pub fn genotype_forward<E: Element>(
    ctx: &mut Ctx<E>,
    spec: &NetworkSpec,
    images: TensorId,
    genotype: &Genotype,
) -> Result<TensorId> {
    let graph = spec.graph();
    let s = stem(ctx, images, spec.in_channels, spec.init_channels)?;
    let (mut s0, mut s1) = (s, s);
    let mut channels = spec.init_channels;
    for cell in 0..spec.num_cells {
        let reduction = spec.is_reduction(cell);
        if reduction {
            channels *= 2;
        }
        let chosen = genotype.ops(spec.cell_type(cell));
        let trace = cell_forward_subgraph(
            ctx,
            &graph,
            &format!("cell{cell}"),
            s0,
            s1,
            channels,
            reduction,
            chosen,
        )?;
        s0 = s1;
        s1 = trace.output;
    }
    classifier(ctx, s1, spec.num_classes)
}
