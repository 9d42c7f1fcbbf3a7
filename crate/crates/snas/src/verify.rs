//! Self-contained 64-bit verification suite: every gradient, estimator,
//! credit, and cost formula checked against an independent oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, ArchParams};
use crate::baselines::relu_mixture_gap;
use crate::cell::{network_forward, MaskMode, NetworkSpec, NetworkTrace};
use crate::credit::{
    analytic_network_alpha_grad, enumerate_expected_grad, quadrature_expected_soft,
    reparameterized_grad_mc, score_function_grad_hard, taylor_credits,
};
use crate::gradcheck::check_param_gradients;
use crate::ops::{reduced_candidates, OpKind};
use crate::params::{Ctx, ParamStore};
use crate::resource::{genotype_cost_walk, hard_sample_cost, mc_cost_grad, CostTable, ResourceConfig};
use crate::tensor::{Tape, TensorId};

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    /// Measured discrepancy (or other scalar under test).
    pub value: f64,
    pub tolerance: f64,
    /// True when value must exceed the tolerance (mutation checks).
    pub expect_above: bool,
    pub pass: bool,
}

fn below(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check {
        name,
        value,
        tolerance,
        expect_above: false,
        pass: value.is_finite() && value <= tolerance,
    }
}

fn above(name: &'static str, value: f64, tolerance: f64) -> Check {
    Check {
        name,
        value,
        tolerance,
        expect_above: true,
        pass: value.is_finite() && value > tolerance,
    }
}

impl Check {
    pub fn render(&self) -> String {
        let rel = if self.expect_above { ">" } else { "<=" };
        format!(
            "{:<44} {:>12.3e} {rel} {:>9.1e}  {}",
            self.name,
            self.value,
            self.tolerance,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

// ── Shared fixtures ─────────────────────────────────────────────────────

fn tiny_spec() -> NetworkSpec {
    NetworkSpec {
        num_cells: 1,
        num_intermediate: 2,
        init_channels: 2,
        in_channels: 2,
        num_classes: 3,
        candidates: reduced_candidates(),
        use_reduction: false,
    }
}

fn random_alpha<R: Rng>(num_edges: usize, num_ops: usize, rng: &mut R) -> ArchParams {
    let mut alpha = ArchParams::uniform(num_edges, num_ops);
    for row in alpha.normal.iter_mut().chain(alpha.reduce.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
    }
    alpha
}

fn sampled_loss(
    spec: &NetworkSpec,
    alpha: &ArchParams,
    store: &mut ParamStore<f64>,
    seed: u64,
    lambda: f64,
    trainable: bool,
) -> (Tape<f64>, NetworkTrace, TensorId) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<f64> = (0..2 * spec.in_channels * 16).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut tape = Tape::<f64>::new();
    let mut ctx = Ctx::new(&mut tape, store, trainable);
    let x = ctx
        .tape
        .leaf(&[2, spec.in_channels, 4, 4], images, false)
        .expect("leaf");
    let mut gumbel_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b1);
    let trace = network_forward(
        &mut ctx,
        spec,
        x,
        alpha,
        MaskMode::Sampled { lambda },
        trainable,
        &mut gumbel_rng,
    )
    .expect("forward");
    let loss = ctx.tape.cross_entropy_logits(trace.logits, &[0, 2]).expect("loss");
    (tape, trace, loss)
}

/// Max relative errors (theta, alpha) of autodiff versus central differences
/// on one randomly initialized sampled cell.
pub fn cell_gradcheck(seed: u64, lambda: f64) -> (f64, f64) {
    let spec = tiny_spec();
    let graph = spec.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = random_alpha(graph.num_edges(), graph.candidates.len(), &mut rng);

    // theta: every store scalar against central differences
    let mut store = ParamStore::<f64>::new(seed);
    let spec2 = spec.clone();
    let alpha2 = alpha.clone();
    let theta_report = check_param_gradients(&mut store, 1e-5, &move |ctx| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let images: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = ctx.tape.leaf(&[2, 2, 4, 4], images, false)?;
        let mut gumbel_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b1);
        let trace = network_forward(
            ctx,
            &spec2,
            x,
            &alpha2,
            MaskMode::Sampled { lambda },
            false,
            &mut gumbel_rng,
        )?;
        ctx.tape.cross_entropy_logits(trace.logits, &[0, 2])
    })
    .expect("theta gradcheck");

    // alpha: fixed gumbel stream, perturb logits
    let mut store = ParamStore::<f64>::new(seed);
    let (tape, trace, loss) = sampled_loss(&spec, &alpha, &mut store, seed ^ 0xfeed, lambda, true);
    let mut tape = tape;
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = trace
        .arch_normal
        .iter()
        .map(|&id| tape.grad(id).expect("alpha grad").to_vec())
        .collect();
    let eval = |alpha: &ArchParams, store: &mut ParamStore<f64>| -> f64 {
        let (tape, _trace, loss) = sampled_loss(&spec, alpha, store, seed ^ 0xfeed, lambda, false);
        tape.scalar_value(loss)
    };
    let eps = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut perturbed = alpha.clone();
    for e in 0..graph.num_edges() {
        for k in 0..graph.candidates.len() {
            let orig = perturbed.normal[e][k];
            perturbed.normal[e][k] = orig + eps;
            let up = eval(&perturbed, &mut store);
            perturbed.normal[e][k] = orig - eps;
            let down = eval(&perturbed, &mut store);
            perturbed.normal[e][k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[e][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    (theta_report.max_rel_err, max_rel)
}

/// Max relative error of the closed-form architecture gradient against
/// autodiff, plus the discrepancy a deliberate sign flip would produce.
pub fn closed_form_check(seed: u64, lambda: f64) -> (f64, f64) {
    let spec = NetworkSpec {
        num_cells: 2,
        ..tiny_spec()
    };
    let graph = spec.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = random_alpha(graph.num_edges(), graph.candidates.len(), &mut rng);
    let mut store = ParamStore::<f64>::new(seed);
    let (mut tape, trace, loss) = sampled_loss(&spec, &alpha, &mut store, seed, lambda, true);
    tape.backward(loss).expect("backward");
    let analytic = analytic_network_alpha_grad(
        &tape,
        &trace,
        &spec,
        graph.num_edges(),
        graph.candidates.len(),
        lambda,
    )
    .expect("closed form");
    let mut max_rel: f64 = 0.0;
    let mut mutation: f64 = 0.0;
    for (e, &row_id) in trace.arch_normal.iter().enumerate() {
        let auto = tape.grad(row_id).expect("alpha grad");
        for k in 0..graph.candidates.len() {
            let a = analytic.normal[e][k];
            let rel = (a - auto[k]).abs() / a.abs().max(auto[k].abs()).max(1e-12);
            max_rel = max_rel.max(rel);
            // sign-flipped closed form must disagree with autodiff
            mutation = mutation.max((-a - auto[k]).abs());
        }
    }
    (max_rel, mutation)
}

// ── The table ───────────────────────────────────────────────────────────

pub fn run_all() -> Vec<Check> {
    let mut checks = Vec::new();

    // gradient correctness on sampled cells
    let mut theta_worst: f64 = 0.0;
    let mut alpha_worst: f64 = 0.0;
    for seed in 0..3u64 {
        let (t, a) = cell_gradcheck(100 + seed, 0.4 + 0.2 * seed as f64);
        theta_worst = theta_worst.max(t);
        alpha_worst = alpha_worst.max(a);
    }
    checks.push(below("theta_grad_vs_finite_difference", theta_worst, 1e-4));
    checks.push(below("alpha_grad_vs_finite_difference", alpha_worst, 1e-4));

    let (cf, mutation) = closed_form_check(7, 0.5);
    checks.push(below("closed_form_alpha_grad_vs_autodiff", cf, 1e-10));
    checks.push(above("sign_flip_mutation_detected", mutation, 1e-8));

    // estimator equivalence on enumerable problems
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
    let est = score_function_grad_hard(&rows, 200_000, &mut rng, &mut credits).expect("score est");
    let mut diff: f64 = 0.0;
    for e in 0..2 {
        for k in 0..2 {
            diff = diff.max((est[e][k] - exact[e][k]).abs());
        }
    }
    checks.push(below("hard_score_estimator_vs_enumeration", diff, 0.03));

    // reparameterized estimate against the logistic quadrature oracle
    let row = vec![0.3, -0.2];
    let ov = [2.0, -1.0];
    let tgt = 0.4;
    let lambda = 0.7;
    let f = move |z: &[f64]| {
        let x = z[0] * ov[0] + z[1] * ov[1];
        (x - tgt) * (x - tgt)
    };
    let eps = 1e-5;
    let quad_grad: Vec<f64> = (0..2)
        .map(|k| {
            let mut up = row.clone();
            up[k] += eps;
            let mut dn = row.clone();
            dn[k] -= eps;
            (quadrature_expected_soft(&up, lambda, 200_000, &f)
                - quadrature_expected_soft(&dn, lambda, 200_000, &f))
                / (2.0 * eps)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rows1 = vec![row.clone()];
    let est = reparameterized_grad_mc(&rows1, lambda, 200_000, &mut rng, &mut |zs| {
        let x = zs[0][0] * ov[0] + zs[0][1] * ov[1];
        let dl = 2.0 * (x - tgt);
        vec![vec![dl * ov[0], dl * ov[1]]]
    })
    .expect("reparam est");
    let diff = (est[0][0] - quad_grad[0]).abs().max((est[0][1] - quad_grad[1]).abs());
    checks.push(below("reparameterized_estimator_vs_quadrature", diff, 0.02));

    // layer-credit conservation on bias-free relu nets
    checks.push(below("credit_conservation_two_layer", taylor_two_layer_residual(), 1e-10));
    checks.push(below("credit_conservation_skip", taylor_skip_residual(), 1e-10));

    // zero-temperature limit of the relaxation
    let la = [(3.0f64).ln(), 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut hits = 0usize;
    for _ in 0..n {
        let g = arch::draw_gumbels(2, &mut rng);
        let z = arch::relaxed_sample(&la, &g, 0.01).expect("sample");
        if arch::argmax(&z) == 0 {
            hits += 1;
        }
    }
    let freq_err = (hits as f64 / n as f64 - 0.75).abs();
    checks.push(below("limit_frequency_matches_softmax", freq_err, 0.01));

    // cost model: reference triple and exact mask decomposition
    let reference = crate::ops::conv_cost(3, 3, 16, 16, 1, 8, 8);
    let triple_err = (reference.params as i64 - 2304).abs()
        + (reference.flops as i64 - 147_456).abs()
        + (reference.mac as i64 - 4352).abs();
    checks.push(below("cost_reference_triple", triple_err as f64, 0.0));

    let spec = NetworkSpec {
        num_cells: 3,
        num_intermediate: 2,
        init_channels: 4,
        in_channels: 3,
        num_classes: 4,
        candidates: reduced_candidates(),
        use_reduction: true,
    };
    let cfg = ResourceConfig {
        eta: 1.0,
        w_params: 1.0,
        w_flops: 1.0,
        w_mac: 1.0,
    };
    let table = CostTable::build(&spec, 8, &cfg).expect("cost table");
    let graph = spec.graph();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let mut choices = Vec::new();
        let mut normal = Vec::new();
        let mut reduce = Vec::new();
        for e in 0..graph.num_edges() {
            let kn = (rng.random::<f64>() * 4.0) as usize % 4;
            let kr = (rng.random::<f64>() * 4.0) as usize % 4;
            normal.push(graph.candidates[kn]);
            reduce.push(graph.candidates[kr]);
            let _ = e;
        }
        for cell in 0..spec.num_cells {
            let ops = if spec.is_reduction(cell) { &reduce } else { &normal };
            choices.push(
                ops.iter()
                    .map(|o| graph.candidates.iter().position(|c| c == o).unwrap())
                    .collect::<Vec<_>>(),
            );
        }
        let masked = hard_sample_cost(&table, &choices);
        let genotype = crate::cell::Genotype { normal, reduce };
        let walked = genotype_cost_walk(&spec, &genotype, 8);
        if masked != walked {
            mismatches += 1;
        }
    }
    checks.push(below("masked_cost_equals_subgraph_walk", mismatches as f64, 0.0));

    // analytic expected cost against Monte Carlo, in standard-error units
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let alpha = random_alpha(graph.num_edges(), 4, &mut rng);
    let exact = crate::resource::expected_cost(&table, &spec, &alpha);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut masks = Vec::new();
        for cell in 0..spec.num_cells {
            let rows = alpha.rows(spec.cell_type(cell));
            let cell_masks: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let g = arch::draw_gumbels(r.len(), &mut rng);
                    let perturbed: Vec<f64> = r.iter().zip(&g).map(|(&x, &y)| x + y).collect();
                    arch::one_hot(r.len(), arch::argmax(&perturbed))
                })
                .collect();
            masks.push(cell_masks);
        }
        let c = crate::resource::sample_cost(&table, &masks).expect("sample cost");
        sum += c;
        sum_sq += c * c;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt().max(1e-12);
    checks.push(below("expected_cost_vs_monte_carlo_se_units", (mean - exact).abs() / se, 3.0));

    // cost gradient estimator direction sanity: zero op row with positive
    // cost spread must push probability toward the cheap op
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let cg = mc_cost_grad(&table, &spec, &alpha, 20_000, &mut rng).expect("cost grad");
    let zero_idx = graph.candidates.iter().position(|&c| c == OpKind::Zero).unwrap();
    let grad_row = &cg.normal[0];
    let descent_gap = grad_row[zero_idx] - grad_row.iter().cloned().fold(f64::MIN, f64::max);
    checks.push(below("cost_grad_zero_op_is_cheapest_direction", descent_gap, 0.0));

    // attention bias: exact 0.25 gap on the canonical construction, exactness
    // for linear responses
    let gap = relu_mixture_gap(&[0.0, 0.0], 1.0, 1.0);
    checks.push(below("attention_bias_gap_is_one_quarter", (gap.gap() - 0.25).abs(), 1e-12));
    let la2 = [0.4, -0.9];
    let o = [2.0, -1.5];
    let p = arch::softmax(&la2);
    let mixed = p[0] * o[0] + p[1] * o[1];
    let rows2 = vec![la2.to_vec()];
    let (expected, _) = enumerate_expected_grad(&rows2, &mut |ks| o[ks[0]]);
    checks.push(below("attention_exact_for_linear_ops", (mixed - expected).abs(), 1e-10));

    checks
}

pub fn taylor_two_layer_residual() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&[1, 4], draw(4), false).expect("x");
    let w1 = tape.leaf(&[4, 5], draw(20), false).expect("w1");
    let w2 = tape.leaf(&[5, 1], draw(5), false).expect("w2");
    let h_pre = tape.matmul(x, w1).expect("mm");
    let h = tape.relu(h_pre).expect("relu");
    let h_cut = tape.leaf(&[1, 5], tape.data(h).to_vec(), true).expect("cut");
    let out = tape.matmul(h_cut, w2).expect("mm2");
    let f = tape.sum(out).expect("sum");
    let fval = tape.scalar_value(f);
    let credits = taylor_credits(&mut tape, f, &[h_cut]).expect("credits");
    (credits.iter().sum::<f64>() - fval).abs()
}

pub fn taylor_skip_residual() -> f64 {
    // h feeds both relu(h)W2 and a direct skip hW3; its credit integrates both
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };
    let mut tape = Tape::<f64>::new();
    let h = tape.leaf(&[1, 5], draw(5), true).expect("h");
    let w2 = tape.leaf(&[5, 1], draw(5), false).expect("w2");
    let w3 = tape.leaf(&[5, 1], draw(5), false).expect("w3");
    let r = tape.relu(h).expect("relu");
    let branch = tape.matmul(r, w2).expect("mm");
    let skip = tape.matmul(h, w3).expect("mm");
    let out = tape.add(branch, skip).expect("add");
    let f = tape.sum(out).expect("sum");
    let fval = tape.scalar_value(f);
    let credits = taylor_credits(&mut tape, f, &[h]).expect("credits");
    (credits.iter().sum::<f64>() - fval).abs()
}
