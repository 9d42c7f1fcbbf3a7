//! Closed-form search gradients and per-edge credit assignment, implemented
//! independently of the tape's backward rules so each side cross-checks the
//! other.
//!
//! The per-edge gradient in log-logit form is (Z_k/λ)(b_k − Σ_l Z_l b_l) with
//! b_k the inner product of the node gradient and the kth op output; the
//! direct-parameter form divides by α_k. Per-edge credit is the negative
//! inner product of node gradient and mixed edge output, with gradients to
//! successor nodes stopped.

use rand::Rng;

use crate::arch::{self, CellType};
use crate::cell::{EdgeTrace, NetworkSpec, NetworkTrace};
use crate::error::TensorError;
use crate::tensor::{Record, Tape, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn node_grad<'t>(tape: &'t Tape<f64>, id: TensorId, what: &str) -> Result<&'t [f64]> {
    tape.grad(id)
        .ok_or_else(|| TensorError::invalid("credit", format!("missing cached gradient at {what}")))
}

// ── Closed-form search gradient ─────────────────────────────────────────

/// Per-op gradient of the loss w.r.t. this edge's log-logits, from cached
/// activations and the node gradient. Requires a prior backward pass.
pub fn analytic_edge_alpha_grad(tape: &Tape<f64>, edge: &EdgeTrace, lambda: f64) -> Result<Vec<f64>> {
    let g = node_grad(tape, edge.mixed, "edge output")?;
    let z = tape.data(edge.z);
    let b: Vec<f64> = edge
        .op_outputs
        .iter()
        .map(|&o| dot(g, tape.data(o)))
        .collect();
    let zbar = dot(z, &b);
    Ok(z.iter()
        .zip(&b)
        .map(|(&zk, &bk)| zk / lambda * (bk - zbar))
        .collect())
}

/// Direct-parameter form of the same gradient: divide the log form by
/// α_k = exp(log α_k).
pub fn alpha_grad_direct(log_alpha_row: &[f64], grad_log: &[f64]) -> Vec<f64> {
    log_alpha_row
        .iter()
        .zip(grad_log)
        .map(|(&la, &g)| g / la.exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchGrads {
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
}

/// Closed-form log-logit gradients accumulated over every cell in a trace;
/// must equal the autodiff gradients at the lifted logit rows.
pub fn analytic_network_alpha_grad(
    tape: &Tape<f64>,
    trace: &NetworkTrace,
    spec: &NetworkSpec,
    num_edges: usize,
    num_ops: usize,
    lambda: f64,
) -> Result<ArchGrads> {
    let mut out = ArchGrads {
        normal: vec![vec![0.0; num_ops]; num_edges],
        reduce: vec![vec![0.0; num_ops]; num_edges],
    };
    for (cell_idx, cell) in trace.cells.iter().enumerate() {
        let rows = match spec.cell_type(cell_idx) {
            CellType::Normal => &mut out.normal,
            CellType::Reduce => &mut out.reduce,
        };
        for (e, edge) in cell.edges.iter().enumerate() {
            let g = analytic_edge_alpha_grad(tape, edge, lambda)?;
            for (acc, v) in rows[e].iter_mut().zip(&g) {
                *acc += v;
            }
        }
    }
    Ok(out)
}

// ── Per-edge credit ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EdgeCredit {
    pub cell: usize,
    pub from: usize,
    pub to: usize,
    /// R = −⟨∂L/∂x_j, Õ(x_i)⟩ with successor gradients stopped.
    pub credit: f64,
}

#[derive(Debug, Clone)]
pub struct CreditReport {
    pub edges: Vec<EdgeCredit>,
    /// Per cell, per intermediate node: ⟨∂L/∂x_j, x_j⟩.
    pub node_credits: Vec<Vec<f64>>,
}

pub fn edge_credit(tape: &Tape<f64>, edge: &EdgeTrace) -> Result<f64> {
    let g = node_grad(tape, edge.mixed, "edge output")?;
    Ok(-dot(g, tape.data(edge.mixed)))
}

/// Credits for every edge and intermediate node of a traced forward pass.
pub fn credit_report(tape: &Tape<f64>, trace: &NetworkTrace) -> Result<CreditReport> {
    let mut edges = Vec::new();
    let mut node_credits = Vec::new();
    for (cell_idx, cell) in trace.cells.iter().enumerate() {
        for edge in &cell.edges {
            edges.push(EdgeCredit {
                cell: cell_idx,
                from: edge.from,
                to: edge.to,
                credit: edge_credit(tape, edge)?,
            });
        }
        let mut nodes = Vec::new();
        for &n in &cell.nodes[2..] {
            let g = node_grad(tape, n, "intermediate node")?;
            nodes.push(dot(g, tape.data(n)));
        }
        node_credits.push(nodes);
    }
    Ok(CreditReport { edges, node_credits })
}

// ── Monte Carlo estimators ──────────────────────────────────────────────

/// Hard-sample score-function estimate: draw one op per edge from the
/// categorical, multiply the per-edge credit by the categorical score.
/// `eval` returns the per-edge credit ⟨∂L/∂x_j, Õ(x_i)⟩ for one sample.
pub fn score_function_grad_hard<R: Rng>(
    rows: &[Vec<f64>],
    num_samples: usize,
    rng: &mut R,
    eval: &mut dyn FnMut(&[usize]) -> Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    if num_samples < 1 {
        return Err(TensorError::invalid("score_function_grad", "num_samples < 1"));
    }
    let mut acc: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for _ in 0..num_samples {
        let ks: Vec<usize> = rows
            .iter()
            .map(|r| {
                let g = arch::draw_gumbels(r.len(), rng);
                let perturbed: Vec<f64> = r.iter().zip(&g).map(|(&a, &b)| a + b).collect();
                arch::argmax(&perturbed)
            })
            .collect();
        let credits = eval(&ks);
        for (e, row) in rows.iter().enumerate() {
            let score = arch::categorical_score(row, ks[e]);
            for (a, s) in acc[e].iter_mut().zip(&score) {
                *a += s * credits[e];
            }
        }
    }
    for row in &mut acc {
        for v in row.iter_mut() {
            *v /= num_samples as f64;
        }
    }
    Ok(acc)
}

/// Relaxed-sample score-function estimate using the concrete density score.
/// `eval` returns the per-edge credit given the soft masks.
pub fn score_function_grad_relaxed<R: Rng>(
    rows: &[Vec<f64>],
    lambda: f64,
    num_samples: usize,
    rng: &mut R,
    eval: &mut dyn FnMut(&[Vec<f64>]) -> Vec<f64>,
) -> Result<Vec<Vec<f64>>> {
    if num_samples < 1 {
        return Err(TensorError::invalid("score_function_grad", "num_samples < 1"));
    }
    let mut acc: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for _ in 0..num_samples {
        let zs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let g = arch::draw_gumbels(r.len(), rng);
                arch::relaxed_sample(r, &g, lambda)
            })
            .collect::<Result<_>>()?;
        let credits = eval(&zs);
        for (e, row) in rows.iter().enumerate() {
            let score = arch::concrete_density_score(row, &zs[e], lambda);
            for (a, s) in acc[e].iter_mut().zip(&score) {
                *a += s * credits[e];
            }
        }
    }
    for row in &mut acc {
        for v in row.iter_mut() {
            *v /= num_samples as f64;
        }
    }
    Ok(acc)
}

/// Reparameterized estimate: mean of the closed-form per-sample gradient.
/// `eval` returns, per edge, the vector b with b_k = ⟨∂L/∂x_j, O_k(x_i)⟩
/// for the drawn soft masks.
pub fn reparameterized_grad_mc<R: Rng>(
    rows: &[Vec<f64>],
    lambda: f64,
    num_samples: usize,
    rng: &mut R,
    eval: &mut dyn FnMut(&[Vec<f64>]) -> Vec<Vec<f64>>,
) -> Result<Vec<Vec<f64>>> {
    if num_samples < 1 {
        return Err(TensorError::invalid("reparameterized_grad", "num_samples < 1"));
    }
    let mut acc: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for _ in 0..num_samples {
        let zs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let g = arch::draw_gumbels(r.len(), rng);
                arch::relaxed_sample(r, &g, lambda)
            })
            .collect::<Result<_>>()?;
        let bs = eval(&zs);
        for e in 0..rows.len() {
            let zbar = dot(&zs[e], &bs[e]);
            for k in 0..rows[e].len() {
                acc[e][k] += zs[e][k] / lambda * (bs[e][k] - zbar);
            }
        }
    }
    for row in &mut acc {
        for v in row.iter_mut() {
            *v /= num_samples as f64;
        }
    }
    Ok(acc)
}

// ── Exact oracles ───────────────────────────────────────────────────────

/// Exact E[L] and ∇_{log α} E[L] for hard choices by full enumeration of
/// every one-hot outcome.
pub fn enumerate_expected_grad(
    rows: &[Vec<f64>],
    eval: &mut dyn FnMut(&[usize]) -> f64,
) -> (f64, Vec<Vec<f64>>) {
    let probs: Vec<Vec<f64>> = rows.iter().map(|r| arch::softmax(r)).collect();
    let mut expectation = 0.0;
    let mut grad: Vec<Vec<f64>> = rows.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut ks = vec![0usize; rows.len()];
    loop {
        let p: f64 = ks.iter().zip(&probs).map(|(&k, pr)| pr[k]).product();
        let l = eval(&ks);
        expectation += p * l;
        for (e, row) in rows.iter().enumerate() {
            let score = arch::categorical_score(row, ks[e]);
            for (g, s) in grad[e].iter_mut().zip(&score) {
                *g += p * l * s;
            }
        }
        // odometer over outcomes
        let mut i = 0;
        loop {
            if i == ks.len() {
                return (expectation, grad);
            }
            ks[i] += 1;
            if ks[i] < rows[i].len() {
                break;
            }
            ks[i] = 0;
            i += 1;
        }
    }
}

/// E over the Gumbel noise of a scalar function of the soft mask, for one
/// 2-op row: the Gumbel difference is standard logistic, so a 1-D midpoint
/// rule over its inverse CDF converges fast.
pub fn quadrature_expected_soft(
    row: &[f64],
    lambda: f64,
    n_points: usize,
    f: &dyn Fn(&[f64]) -> f64,
) -> f64 {
    assert_eq!(row.len(), 2, "quadrature oracle is for 2-op rows");
    let delta = row[0] - row[1];
    let mut total = 0.0;
    for i in 0..n_points {
        let u = (i as f64 + 0.5) / n_points as f64;
        let gdiff = (u / (1.0 - u)).ln();
        let z1 = 1.0 / (1.0 + (-(delta + gdiff) / lambda).exp());
        total += f(&[z1, 1.0 - z1]);
    }
    total / n_points as f64
}

// ── Taylor decomposition ────────────────────────────────────────────────

/// Credits ∂f/∂x_j · x_j at the given cut nodes of a scalar output `f`.
///
/// Valid only when f is positively 1-homogeneous in the cut values jointly:
/// every tape record between the cut and f must be linear or ReLU-piecewise
/// linear with no constant terms. Verified structurally; violating records
/// are rejected. Runs the backward pass itself, so call on a fresh tape.
pub fn taylor_credits(tape: &mut Tape<f64>, f: TensorId, cut: &[TensorId]) -> Result<Vec<f64>> {
    check_taylor_eligible(tape, f, cut)?;
    tape.backward(f)?;
    let mut out = Vec::with_capacity(cut.len());
    for &n in cut {
        let g = node_grad(tape, n, "cut node")?;
        out.push(dot(g, tape.data(n)));
    }
    Ok(out)
}

fn is_zero(tape: &Tape<f64>, id: TensorId) -> bool {
    tape.data(id).iter().all(|&v| v == 0.0)
}

/// Structural homogeneity check: walk every node that both depends on the cut
/// and feeds f, and reject records that introduce constant terms or
/// higher-degree interactions in the cut values.
pub fn check_taylor_eligible(tape: &Tape<f64>, f: TensorId, cut: &[TensorId]) -> Result<()> {
    let n = f.0 + 1;
    let mut dependent = vec![false; n];
    for c in cut {
        if c.0 >= n {
            return Err(TensorError::invalid("taylor", "cut node after output"));
        }
        dependent[c.0] = true;
    }
    let dep = |d: &[bool], id: TensorId| id.0 < d.len() && d[id.0];
    for i in 0..n {
        if dependent[i] {
            continue;
        }
        let parents = tape.parents(TensorId(i));
        if parents.iter().any(|&p| dep(&dependent, p)) {
            dependent[i] = true;
        }
    }
    // ancestors of f
    let mut feeds = vec![false; n];
    feeds[f.0] = true;
    for i in (0..n).rev() {
        if !feeds[i] {
            continue;
        }
        for p in tape.parents(TensorId(i)) {
            feeds[p.0] = true;
        }
    }
    let reject = |what: &str| {
        Err(TensorError::invalid(
            "taylor",
            format!("{what} breaks first-order exactness between cut and output"),
        ))
    };
    for i in 0..n {
        if !dependent[i] || !feeds[i] || cut.iter().any(|c| c.0 == i) {
            continue;
        }
        let d = |id: TensorId| dep(&dependent, id);
        match tape.record(TensorId(i)) {
            Record::Leaf => {}
            Record::Relu(_)
            | Record::Scale(_, _)
            | Record::Sum(_)
            | Record::Mean(_)
            | Record::Index(_, _)
            | Record::MaxPool2d { .. }
            | Record::AvgPool2d { .. }
            | Record::GlobalAvgPool(_) => {}
            Record::Add(a, b) | Record::Sub(a, b) => {
                for &side in &[*a, *b] {
                    if !d(side) && !is_zero(tape, side) {
                        return reject("adding a nonzero constant");
                    }
                }
            }
            Record::AddRow(a, b) => {
                if !d(*a) && !is_zero(tape, *a) {
                    return reject("adding a nonzero constant");
                }
                if !d(*b) && !is_zero(tape, *b) {
                    return reject("bias addition");
                }
                if d(*a) && d(*b) {
                    // both linear in the cut: still first-order exact
                }
            }
            Record::Mul(a, b) => {
                if d(*a) && d(*b) {
                    return reject("product of two cut-dependent values");
                }
            }
            Record::ScalarMul(s, a) => {
                if d(*s) && d(*a) {
                    return reject("product of two cut-dependent values");
                }
            }
            Record::Matmul(a, b) => {
                if d(*a) && d(*b) {
                    return reject("product of two cut-dependent values");
                }
            }
            Record::Conv2d { input, weight, .. } => {
                if d(*input) && d(*weight) {
                    return reject("product of two cut-dependent values");
                }
            }
            Record::ConcatChannels(parts) => {
                for p in parts {
                    if !d(*p) && !is_zero(tape, *p) {
                        return reject("concatenating a nonzero constant");
                    }
                }
            }
            Record::Log(_) | Record::Exp(_) | Record::Softmax1d(_) => {
                return reject("non-piecewise-linear activation");
            }
            Record::BatchNorm2d { .. } => return reject("batch normalization"),
            Record::CrossEntropyLogits { .. } => return reject("cross-entropy"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{relaxed_sample_on_tape, ArchParams};
    use crate::cell::{network_forward, MaskMode, NetworkSpec};
    use crate::ops::reduced_candidates;
    use crate::params::{Ctx, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One scalar edge built by hand: z from log-logits + fixed Gumbels, two
    /// constant op values, mixed = z·o, loss l(mixed).
    fn scalar_edge(
        la: &[f64],
        g: &[f64],
        o: &[f64],
        lambda: f64,
        loss: impl Fn(&mut Tape<f64>, TensorId) -> TensorId,
    ) -> (Tape<f64>, TensorId, EdgeTrace, TensorId) {
        let mut tape = Tape::<f64>::new();
        let la_id = tape.leaf(&[la.len()], la.to_vec(), true).unwrap();
        let z = relaxed_sample_on_tape(&mut tape, la_id, g, lambda).unwrap();
        let mut op_outputs = Vec::new();
        let mut mixed = None;
        for (k, &ok) in o.iter().enumerate() {
            let o_id = tape.leaf(&[1], vec![ok], false).unwrap();
            op_outputs.push(o_id);
            let zk = tape.index(z, k).unwrap();
            let term = tape.scalar_mul(zk, o_id).unwrap();
            mixed = Some(match mixed {
                None => term,
                Some(m) => tape.add(m, term).unwrap(),
            });
        }
        let mixed = mixed.unwrap();
        let l = loss(&mut tape, mixed);
        let edge = EdgeTrace {
            from: 0,
            to: 2,
            z,
            op_outputs,
            mixed,
        };
        (tape, la_id, edge, l)
    }

    #[test]
    fn identical_op_outputs_give_zero_alpha_grad() {
        let (mut tape, la_id, edge, l) =
            scalar_edge(&[0.4, -0.9], &[0.2, 0.7], &[1.5, 1.5], 0.5, |t, m| {
                t.sum(m).unwrap()
            });
        tape.backward(l).unwrap();
        let analytic = analytic_edge_alpha_grad(&tape, &edge, 0.5).unwrap();
        let auto = tape.grad(la_id).unwrap();
        for k in 0..2 {
            assert!(analytic[k].abs() < 1e-12);
            assert!(auto[k].abs() < 1e-12);
        }
    }

    #[test]
    fn symbolic_two_op_case_matches_closed_form_and_autodiff() {
        let (la, g, o, lambda, t) = ([0.3, -0.5], [0.8, 0.1], [2.0, -1.0], 0.6, 0.7);
        let (mut tape, la_id, edge, l) = scalar_edge(&la, &g, &o, lambda, |tp, m| {
            let tgt = tp.leaf(&[1], vec![t], false).unwrap();
            let d = tp.sub(m, tgt).unwrap();
            let sq = tp.mul(d, d).unwrap();
            tp.sum(sq).unwrap()
        });
        tape.backward(l).unwrap();
        let z = tape.data(edge.z).to_vec();
        let x = tape.data(edge.mixed)[0];
        // dL/dlogα₁ = 2(x−t)(o₁−o₂)·z₁z₂/λ, and the negative for logα₂.
        let symbolic = 2.0 * (x - t) * (o[0] - o[1]) * z[0] * z[1] / lambda;
        let analytic = analytic_edge_alpha_grad(&tape, &edge, lambda).unwrap();
        let auto = tape.grad(la_id).unwrap();
        assert!((analytic[0] - symbolic).abs() < 1e-12, "{analytic:?} vs {symbolic}");
        assert!((analytic[1] + symbolic).abs() < 1e-12);
        assert!((auto[0] - symbolic).abs() < 1e-12);
        assert!((auto[1] + symbolic).abs() < 1e-12);
        assert!(symbolic.abs() > 1e-3, "degenerate test point");
    }

    fn traced_net(
        seed: u64,
        lambda: f64,
    ) -> (Tape<f64>, NetworkSpec, NetworkTrace, ArchParams) {
        let spec = NetworkSpec {
            num_cells: 2,
            num_intermediate: 2,
            init_channels: 3,
            in_channels: 2,
            num_classes: 3,
            candidates: reduced_candidates(),
            use_reduction: false,
        };
        let graph = spec.graph();
        let mut alpha = ArchParams::uniform(graph.num_edges(), 4);
        let mut arng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
        for row in alpha.normal.iter_mut().chain(alpha.reduce.iter_mut()) {
            for v in row.iter_mut() {
                *v = arng.random::<f64>() - 0.5;
            }
        }
        let mut store = ParamStore::<f64>::new(seed);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = ctx.tape.leaf(&[2, 2, 6, 6], images, false).unwrap();
        let trace = network_forward(
            &mut ctx,
            &spec,
            x,
            &alpha,
            MaskMode::Sampled { lambda },
            true,
            &mut rng,
        )
        .unwrap();
        let loss = ctx.tape.cross_entropy_logits(trace.logits, &[0, 2]).unwrap();
        tape.backward(loss).unwrap();
        (tape, spec, trace, alpha)
    }

    #[test]
    fn network_alpha_grad_matches_autodiff_to_1e10() {
        let lambda = 0.5;
        let (tape, spec, trace, alpha) = traced_net(21, lambda);
        let graph = spec.graph();
        let analytic =
            analytic_network_alpha_grad(&tape, &trace, &spec, graph.num_edges(), 4, lambda).unwrap();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (e, &row_id) in trace.arch_normal.iter().enumerate() {
            let auto = tape.grad(row_id).unwrap();
            for k in 0..4 {
                let a = analytic.normal[e][k];
                let rel = (a - auto[k]).abs() / a.abs().max(auto[k].abs()).max(1e-12);
                max_rel = max_rel.max(rel);
                max_abs = max_abs.max(auto[k].abs());
            }
        }
        assert!(max_abs > 1e-6, "gradients degenerate");
        assert!(max_rel < 1e-10, "max rel err {max_rel}");
        // a sign flip in the closed form is caught
        let flipped = -analytic.normal[0][0];
        let auto0 = tape.grad(trace.arch_normal[0]).unwrap()[0];
        assert!((flipped - auto0).abs() > 1e-8);
        let _ = alpha;
    }

    #[test]
    fn direct_parameterization_is_log_form_over_alpha() {
        // Lift direct α, take log on tape, sample; the tape gradient at α
        // must equal the log-form gradient divided by α.
        let alpha_direct = [1.7, 0.6, 2.3];
        let g = [0.4, -0.2, 0.9];
        let w = [1.0, -2.0, 0.5];
        let lambda = 0.45;
        let mut tape = Tape::<f64>::new();
        let a_id = tape.leaf(&[3], alpha_direct.to_vec(), true).unwrap();
        let la_id = tape.log(a_id).unwrap();
        let z = relaxed_sample_on_tape(&mut tape, la_id, &g, lambda).unwrap();
        let wt = tape.leaf(&[3], w.to_vec(), false).unwrap();
        let prod = tape.mul(z, wt).unwrap();
        let l = tape.sum(prod).unwrap();
        tape.backward(l).unwrap();
        let la_row: Vec<f64> = tape.data(la_id).to_vec();
        let grad_log = tape.grad(la_id).unwrap().to_vec();
        let direct = alpha_grad_direct(&la_row, &grad_log);
        let auto = tape.grad(a_id).unwrap();
        for k in 0..3 {
            assert!((direct[k] - auto[k]).abs() < 1e-12, "component {k}");
        }
    }

    #[test]
    fn edge_credit_sign_and_zero_cases() {
        // identity readout: L = Σ x_j, Õ constant c → R = −Σc.
        let (mut tape, _la, edge, l) =
            scalar_edge(&[0.0, 0.0], &[0.0, 0.0], &[3.0, 3.0], 0.5, |t, m| t.sum(m).unwrap());
        tape.backward(l).unwrap();
        let r = edge_credit(&tape, &edge).unwrap();
        assert!((r + 3.0).abs() < 1e-12, "R {r}");
        // zero op output → R = 0
        let (mut tape, _la, edge, l) =
            scalar_edge(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 0.5, |t, m| t.sum(m).unwrap());
        tape.backward(l).unwrap();
        assert_eq!(edge_credit(&tape, &edge).unwrap(), 0.0);
    }

    #[test]
    fn credits_finite_and_nonzero_at_step_zero() {
        let (tape, _spec, trace, _alpha) = traced_net(5, 0.8);
        let report = credit_report(&tape, &trace).unwrap();
        assert!(!report.edges.is_empty());
        assert!(report.edges.iter().all(|e| e.credit.is_finite()));
        assert!(report.node_credits.iter().flatten().all(|c| c.is_finite()));
        assert!(report.edges.iter().any(|e| e.credit.abs() > 1e-9));
    }

    // ── Estimator equivalence on enumerable problems ────────────────────

    #[test]
    fn enumeration_oracle_matches_finite_differences() {
        let rows = vec![vec![0.2, -0.4], vec![0.1, 0.7, -0.3]];
        let o1 = [1.0, -2.0];
        let o2 = [0.5, 2.0, -1.0];
        let mut loss = |ks: &[usize]| 1.3 * o1[ks[0]] * o2[ks[1]] + 0.7 * o1[ks[0]] - 0.2 * o2[ks[1]];
        let (_e, grad) = enumerate_expected_grad(&rows, &mut loss);
        let eps = 1e-6;
        for e in 0..2 {
            for k in 0..rows[e].len() {
                let mut up = rows.clone();
                up[e][k] += eps;
                let mut dn = rows.clone();
                dn[e][k] -= eps;
                let (eu, _) = enumerate_expected_grad(&up, &mut loss);
                let (ed, _) = enumerate_expected_grad(&dn, &mut loss);
                let num = (eu - ed) / (2.0 * eps);
                assert!((grad[e][k] - num).abs() < 1e-8, "edge {e} op {k}");
            }
        }
    }

    #[test]
    fn hard_score_estimator_with_credits_is_unbiased() {
        // Two edges, multilinear loss; per-edge credit (∂L/∂x_e)·x_e.
        let rows = vec![vec![0.2, -0.4], vec![0.1, 0.7]];
        let o1 = [1.0, -2.0];
        let o2 = [0.5, 2.0];
        let (a, w1, w2) = (1.3, 0.7, -0.2);
        let mut loss = |ks: &[usize]| a * o1[ks[0]] * o2[ks[1]] + w1 * o1[ks[0]] + w2 * o2[ks[1]];
        let (_, exact) = enumerate_expected_grad(&rows, &mut loss);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut credits = |ks: &[usize]| {
            let (x1, x2) = (o1[ks[0]], o2[ks[1]]);
            vec![(a * x2 + w1) * x1, (a * x1 + w2) * x2]
        };
        let n = 200_000;
        let est = score_function_grad_hard(&rows, n, &mut rng, &mut credits).unwrap();
        for e in 0..2 {
            for k in 0..2 {
                assert!(
                    (est[e][k] - exact[e][k]).abs() < 0.03,
                    "edge {e} op {k}: {} vs {}",
                    est[e][k],
                    exact[e][k]
                );
            }
        }
    }

    #[test]
    fn score_estimator_is_zero_mean_for_constant_loss() {
        let rows = vec![vec![0.5, -0.1, 0.3]];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut credits = |_ks: &[usize]| vec![4.2];
        let est = score_function_grad_hard(&rows, 200_000, &mut rng, &mut credits).unwrap();
        for k in 0..3 {
            assert!(est[0][k].abs() < 0.03, "{est:?}");
        }
    }

    /// Exact soft-regime gradient for one 2-op edge by central differences of
    /// the quadrature expectation.
    fn quadrature_grad(row: &[f64], lambda: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        (0..2)
            .map(|k| {
                let mut up = row.to_vec();
                up[k] += eps;
                let mut dn = row.to_vec();
                dn[k] -= eps;
                (quadrature_expected_soft(&up, lambda, 200_000, f)
                    - quadrature_expected_soft(&dn, lambda, 200_000, f))
                    / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn reparameterized_estimator_matches_quadrature_nonlinear_loss() {
        let row = vec![0.3, -0.2];
        let o = [2.0, -1.0];
        let t = 0.4;
        let lambda = 0.7;
        let f = move |z: &[f64]| {
            let x = z[0] * o[0] + z[1] * o[1];
            (x - t) * (x - t)
        };
        let exact = quadrature_grad(&row, lambda, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut eval = |zs: &[Vec<f64>]| {
            let x = zs[0][0] * o[0] + zs[0][1] * o[1];
            vec![vec![2.0 * (x - t) * o[0], 2.0 * (x - t) * o[1]]]
        };
        let est = reparameterized_grad_mc(&[row.clone()], lambda, 200_000, &mut rng, &mut eval).unwrap();
        for k in 0..2 {
            assert!(
                (est[0][k] - exact[k]).abs() < 0.02,
                "op {k}: {} vs {}",
                est[0][k],
                exact[k]
            );
        }
    }

    #[test]
    fn relaxed_score_estimator_matches_quadrature_linear_loss() {
        let row = vec![0.4, -0.1];
        let o = [1.5, -0.5];
        let w = 1.2;
        let lambda = 0.8;
        let f = move |z: &[f64]| w * (z[0] * o[0] + z[1] * o[1]);
        let exact = quadrature_grad(&row, lambda, &f);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut eval = |zs: &[Vec<f64>]| vec![f(&zs[0])];
        let est =
            score_function_grad_relaxed(&[row.clone()], lambda, 400_000, &mut rng, &mut eval).unwrap();
        for k in 0..2 {
            assert!(
                (est[0][k] - exact[k]).abs() < 0.03,
                "op {k}: {} vs {}",
                est[0][k],
                exact[k]
            );
        }
    }

    #[test]
    fn two_estimators_agree_with_each_other() {
        let row = vec![0.1, 0.6];
        let o = [2.0, -1.5];
        let w = 0.9;
        let lambda = 0.9;
        let mut rng1 = ChaCha8Rng::seed_from_u64(55);
        let mut eval_b = |_zs: &[Vec<f64>]| vec![vec![w * o[0], w * o[1]]];
        let rep = reparameterized_grad_mc(&[row.clone()], lambda, 200_000, &mut rng1, &mut eval_b).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(56);
        let mut eval_l = |zs: &[Vec<f64>]| vec![w * (zs[0][0] * o[0] + zs[0][1] * o[1])];
        let sc =
            score_function_grad_relaxed(&[row.clone()], lambda, 400_000, &mut rng2, &mut eval_l).unwrap();
        for k in 0..2 {
            assert!((rep[0][k] - sc[0][k]).abs() < 0.03, "op {k}: {rep:?} vs {sc:?}");
        }
    }

    #[test]
    fn reparameterized_variance_is_lower_than_score_variance() {
        let row = vec![0.1, 0.6];
        let o = [2.0, -1.5];
        let w = 0.9;
        let lambda = 0.9;
        let n = 20_000;
        let per_sample = |est: &dyn Fn(&mut ChaCha8Rng) -> f64, seed: u64| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<f64> = (0..n).map(|_| est(&mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        };
        let rep_var = per_sample(
            &|rng| {
                let g = arch::draw_gumbels(2, rng);
                let z = arch::relaxed_sample(&row, &g, lambda).unwrap();
                let b = [w * o[0], w * o[1]];
                let zbar = z[0] * b[0] + z[1] * b[1];
                z[0] / lambda * (b[0] - zbar)
            },
            7,
        );
        let score_var = per_sample(
            &|rng| {
                let g = arch::draw_gumbels(2, rng);
                let z = arch::relaxed_sample(&row, &g, lambda).unwrap();
                let l = w * (z[0] * o[0] + z[1] * o[1]);
                arch::concrete_density_score(&row, &z, lambda)[0] * l
            },
            8,
        );
        assert!(
            rep_var < score_var,
            "reparameterized {rep_var} vs score {score_var}"
        );
    }

    // ── Taylor decomposition ────────────────────────────────────────────

    #[test]
    fn linear_readout_credit_equals_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[4], vec![1.0, -2.0, 0.5, 3.0], true).unwrap();
        let w = tape.leaf(&[4], vec![0.3, 0.7, -1.1, 0.2], false).unwrap();
        let p = tape.mul(x, w).unwrap();
        let f = tape.sum(p).unwrap();
        let fval = tape.scalar_value(f);
        let credits = taylor_credits(&mut tape, f, &[x]).unwrap();
        assert!((credits[0] - fval).abs() < 1e-12);
    }

    #[test]
    fn two_layer_relu_net_conserves_at_both_cuts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[1, 6], rand_vec(6), true).unwrap();
        let w1 = tape.leaf(&[6, 5], rand_vec(30), false).unwrap();
        let w2 = tape.leaf(&[5, 3], rand_vec(15), false).unwrap();
        let h = tape.matmul(x, w1).unwrap();
        let hr = tape.relu(h).unwrap();
        let y = tape.matmul(hr, w2).unwrap();
        let yr = tape.relu(y).unwrap();
        let f = tape.sum(yr).unwrap();
        let fval = tape.scalar_value(f);
        assert!(fval.abs() > 1e-6);
        let credits = taylor_credits(&mut tape, f, &[x, hr]).unwrap();
        assert!((credits[0] - fval).abs() < 1e-10, "input cut");
        assert!((credits[1] - fval).abs() < 1e-10, "hidden cut");
    }

    #[test]
    fn skip_connected_node_gets_integrated_credit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };
        let xv = rand_vec(4);
        let w1v = rand_vec(16);
        let w2v = rand_vec(12);
        let w3v = rand_vec(4);
        let build = |use_b: bool, use_c: bool| -> (f64, f64) {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&[1, 4], xv.clone(), true).unwrap();
            let w1 = tape.leaf(&[4, 4], w1v.clone(), false).unwrap();
            let a0 = tape.matmul(x, w1).unwrap();
            let a = tape.relu(a0).unwrap();
            let mut parts = Vec::new();
            if use_b {
                let w2 = tape.leaf(&[4, 3], w2v.clone(), false).unwrap();
                let b0 = tape.matmul(a, w2).unwrap();
                let b = tape.relu(b0).unwrap();
                parts.push(tape.sum(b).unwrap());
            }
            if use_c {
                let w3 = tape.leaf(&[4, 1], w3v.clone(), false).unwrap();
                let c = tape.matmul(a, w3).unwrap();
                parts.push(tape.sum(c).unwrap());
            }
            let f = match parts.len() {
                1 => parts[0],
                _ => tape.add(parts[0], parts[1]).unwrap(),
            };
            let fval = tape.scalar_value(f);
            let credits = taylor_credits(&mut tape, f, &[a]).unwrap();
            (fval, credits[0])
        };
        let (f_both, credit_both) = build(true, true);
        let (f_b, credit_b) = build(true, false);
        let (f_c, credit_c) = build(false, true);
        assert!((credit_both - f_both).abs() < 1e-10);
        assert!((f_b + f_c - f_both).abs() < 1e-10);
        // credit through both consumers equals the per-path credits summed
        assert!((credit_b + credit_c - credit_both).abs() < 1e-10);
    }

    #[test]
    fn taylor_rejects_ineligible_networks() {
        // bias addition
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let b = tape.leaf(&[3], vec![0.1, 0.2, 0.3], false).unwrap();
        let y = tape.add_row(x, b).unwrap();
        let f = tape.sum(y).unwrap();
        let err = taylor_credits(&mut tape, f, &[x]).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        // softmax
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let s = tape.softmax1d(x).unwrap();
        let f = tape.sum(s).unwrap();
        assert!(taylor_credits(&mut tape, f, &[x]).is_err());
        // batch norm
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[2, 1, 2, 2], (0..8).map(|i| i as f64).collect(), true).unwrap();
        let gamma = tape.leaf(&[1], vec![1.0], false).unwrap();
        let beta = tape.leaf(&[1], vec![0.0], false).unwrap();
        let y = tape.batch_norm2d(x, gamma, beta, 1e-5).unwrap();
        let f = tape.sum(y).unwrap();
        assert!(taylor_credits(&mut tape, f, &[x]).is_err());
        // degree-2 interaction
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        assert!(taylor_credits(&mut tape, f, &[x]).is_err());
    }

    #[test]
    fn cell_edge_credits_conserve_over_a_cut() {
        use crate::cell::{cell_forward, ParentGraph};
        use crate::ops::topology_candidates;
        // skip/zero cell: no parameters past the preprocess, so the section
        // between the preprocessed inputs and the output is ReLU-free linear.
        let graph = ParentGraph::new(2, topology_candidates());
        let mut store = ParamStore::<f64>::new(77);
        let mut tape = Tape::<f64>::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let images: Vec<f64> = (0..1 * 3 * 4 * 4).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = ctx.tape.leaf(&[1, 3, 4, 4], images, true).unwrap();
        let masks: Vec<TensorId> = (0..graph.num_edges())
            .map(|e| {
                let z = if e % 2 == 0 { vec![0.7, 0.3] } else { vec![0.4, 0.6] };
                ctx.tape.leaf(&[2], z, false).unwrap()
            })
            .collect();
        let trace = cell_forward(&mut ctx, &graph, "c", x, x, 3, false, &masks).unwrap();
        // random linear readout: a plain sum of batch-norm outputs is zero
        let out_len: usize = ctx.tape.shape(trace.output).iter().product();
        let out_shape = ctx.tape.shape(trace.output).to_vec();
        let wdata: Vec<f64> = (0..out_len).map(|_| rng.random::<f64>() + 0.1).collect();
        let w = ctx.tape.leaf(&out_shape, wdata, false).unwrap();
        let weighted = ctx.tape.mul(trace.output, w).unwrap();
        let f = ctx.tape.sum(weighted).unwrap();
        let fval = tape.scalar_value(f);
        assert!(fval.abs() > 1e-9);
        let cut = [trace.nodes[0], trace.nodes[1]];
        let credits = taylor_credits(&mut tape, f, &cut).unwrap();
        assert!((credits[0] + credits[1] - fval).abs() < 1e-10);
        // incoming edge credits sum to the node credit
        for (ni, &node) in trace.nodes[2..].iter().enumerate() {
            let j = ni + 2;
            let g = tape.grad(node).unwrap().to_vec();
            let node_credit = dot(&g, tape.data(node));
            let edge_sum: f64 = trace
                .edges
                .iter()
                .filter(|e| e.to == j)
                .map(|e| dot(tape.grad(e.mixed).unwrap(), tape.data(e.mixed)))
                .sum();
            assert!((edge_sum - node_credit).abs() < 1e-10, "node {j}");
        }
    }

    #[test]
    fn quadrature_approaches_enumeration_at_low_temperature() {
        let row = vec![0.3, -0.2];
        let o = [2.0, -1.0];
        let f = move |z: &[f64]| z[0] * o[0] + z[1] * o[1];
        let soft = quadrature_expected_soft(&row, 0.01, 200_000, &f);
        let p = arch::softmax(&row);
        let hard = p[0] * o[0] + p[1] * o[1];
        assert!((soft - hard).abs() < 0.01, "{soft} vs {hard}");
    }
}
