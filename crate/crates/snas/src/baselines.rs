//! Comparison search modes: attention-style expectation mixing and a
//! score-function baseline driven by one scalar reward per trajectory.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, ArchParams};
use crate::cell::{genotype_forward, network_forward, Genotype, MaskMode, NetworkSpec, ParentGraph};
use crate::credit::ArchGrads;
use crate::data::Dataset;
use crate::error::Error;
use crate::params::{Ctx, ParamStore};
use crate::trainer::{Sgd, StepOutcome};
use crate::tensor::Tape;

// ── Mode selection ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Snas,
    DartsAttention,
    ReinforceConstant,
}

impl SearchMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "snas" => Some(SearchMode::Snas),
            "darts_attention" => Some(SearchMode::DartsAttention),
            "reinforce_constant" => Some(SearchMode::ReinforceConstant),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::Snas => "snas",
            SearchMode::DartsAttention => "darts_attention",
            SearchMode::ReinforceConstant => "reinforce_constant",
        }
    }
}

// ── Attention mixing ────────────────────────────────────────────────────

/// Single-level update with deterministic softmax masks instead of sampled
/// ones; both parameter sets descend the mixed loss.
#[allow(clippy::too_many_arguments)]
pub fn darts_train_step(
    spec: &NetworkSpec,
    alpha: &mut ArchParams,
    store: &mut ParamStore<f64>,
    images: &[f64],
    labels: &[usize],
    sgd: &mut Sgd,
    adam: &mut crate::trainer::Adam,
    step_idx: usize,
) -> Result<StepOutcome, Error> {
    let bsz = labels.len();
    let side = ((images.len() / (bsz * spec.in_channels)) as f64).sqrt().round() as usize;
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (theta_grads, arch_grads, loss_val) = {
        let mut ctx = Ctx::new(&mut tape, store, true);
        let x = ctx
            .tape
            .leaf(&[bsz, spec.in_channels, side, side], images.to_vec(), false)?;
        let trace = network_forward(&mut ctx, spec, x, alpha, MaskMode::Expectation, true, &mut rng)?;
        let loss = ctx.tape.cross_entropy_logits(trace.logits, labels)?;
        let loss_val = ctx.tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {loss_val} at step {step_idx}; aborting before update"
            )));
        }
        ctx.tape.backward(loss)?;
        let theta_grads = ctx.grads();
        let row_grads = |rows: &[crate::tensor::TensorId]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|&id| match ctx.tape.grad(id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; alpha.num_ops()],
                })
                .collect()
        };
        let arch_grads = ArchGrads {
            normal: row_grads(&trace.arch_normal),
            reduce: row_grads(&trace.arch_reduce),
        };
        (theta_grads, arch_grads, loss_val)
    };
    let grad_norm = theta_grads
        .values()
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numerical(format!(
            "gradient norm {grad_norm} at step {step_idx}; aborting before update"
        )));
    }
    sgd.step(store, &theta_grads, step_idx);
    adam.step(alpha, &arch_grads);
    Ok(StepOutcome {
        loss: loss_val,
        theta_grad_norm: grad_norm,
    })
}

/// Loss of the softmax-mixed output versus the exact expectation over hard
/// choices, for a one-edge scalar construction with the two candidate
/// responses `relu(x)` and `relu(-x)` and target-squared loss.
#[derive(Debug, Clone, Copy)]
pub struct MixtureGap {
    pub attention_loss: f64,
    pub expected_sampled_loss: f64,
}

impl MixtureGap {
    pub fn gap(&self) -> f64 {
        self.expected_sampled_loss - self.attention_loss
    }
}

/// Evaluates both objectives for candidates {relu(x), relu(-x)} at the given
/// input and target with logits `log_alpha`. The mixed output commutes with
/// the expectation only when the ops are linear in a shared regime; relu
/// breaks that, so mixing is biased toward an unreachable average.
pub fn relu_mixture_gap(log_alpha: &[f64; 2], x: f64, target: f64) -> MixtureGap {
    let o = [x.max(0.0), (-x).max(0.0)];
    let loss = |y: f64| (y - target) * (y - target);
    let p = arch::softmax(log_alpha);
    let attention_loss = loss(p[0] * o[0] + p[1] * o[1]);
    let rows = vec![log_alpha.to_vec()];
    let (expected_sampled_loss, _) =
        crate::credit::enumerate_expected_grad(&rows, &mut |ks: &[usize]| loss(o[ks[0]]));
    MixtureGap {
        attention_loss,
        expected_sampled_loss,
    }
}

// ── Whole-trajectory score baseline ─────────────────────────────────────

/// Moving-average reward baseline; seeded with the first observed reward so
/// a constant reward contributes exactly zero advantage from step one.
#[derive(Debug, Clone)]
pub struct ReinforceState {
    pub alpha_lr: f64,
    pub baseline_momentum: f64,
    pub baseline: Option<f64>,
}

impl ReinforceState {
    pub fn new(alpha_lr: f64, baseline_momentum: f64) -> Self {
        ReinforceState {
            alpha_lr,
            baseline_momentum,
            baseline: None,
        }
    }

    pub fn advantage(&mut self, reward: f64) -> f64 {
        let b = *self.baseline.get_or_insert(reward);
        let adv = reward - b;
        self.baseline = Some(self.baseline_momentum * b + (1.0 - self.baseline_momentum) * reward);
        adv
    }
}

/// Draw one hard architecture per edge from the per-edge categoricals.
pub fn sample_genotype<R: Rng>(
    alpha: &ArchParams,
    graph: &ParentGraph,
    rng: &mut R,
) -> (Genotype, Vec<Vec<usize>>) {
    let draw = |rows: &[Vec<f64>], rng: &mut R| -> (Vec<crate::ops::OpKind>, Vec<usize>) {
        let mut ops = Vec::with_capacity(rows.len());
        let mut ks = Vec::with_capacity(rows.len());
        for row in rows {
            let g = arch::draw_gumbels(row.len(), rng);
            let perturbed: Vec<f64> = row.iter().zip(&g).map(|(&a, &b)| a + b).collect();
            let k = arch::argmax(&perturbed);
            ops.push(graph.candidates[k]);
            ks.push(k);
        }
        (ops, ks)
    };
    let (normal, kn) = draw(&alpha.normal, rng);
    let (reduce, kr) = draw(&alpha.reduce, rng);
    (Genotype { normal, reduce }, vec![kn, kr])
}

/// Ascend the scalar-reward score-function gradient: every edge's chosen
/// logit moves by advantage times its score, with no per-edge credit.
pub fn reinforce_alpha_update(alpha: &mut ArchParams, choices: &[Vec<usize>], advantage: f64, lr: f64) {
    let apply = |rows: &mut Vec<Vec<f64>>, ks: &[usize]| {
        for (row, &k) in rows.iter_mut().zip(ks) {
            let score = arch::categorical_score(row, k);
            for (a, s) in row.iter_mut().zip(&score) {
                *a += lr * advantage * s;
            }
        }
    };
    apply(&mut alpha.normal, &choices[0]);
    apply(&mut alpha.reduce, &choices[1]);
}

/// One baseline step: sample a child, train its weights on the batch, score
/// it by accuracy on a validation minibatch, then update the logits with the
/// whole-trajectory advantage.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_constant_step<R: Rng>(
    spec: &NetworkSpec,
    alpha: &mut ArchParams,
    store: &mut ParamStore<f64>,
    images: &[f64],
    labels: &[usize],
    val_minibatch: &Dataset,
    sgd: &mut Sgd,
    state: &mut ReinforceState,
    step_idx: usize,
    rng: &mut R,
) -> Result<StepOutcome, Error> {
    let graph = spec.graph();
    let (genotype, choices) = sample_genotype(alpha, &graph, rng);
    let bsz = labels.len();
    let side = ((images.len() / (bsz * spec.in_channels)) as f64).sqrt().round() as usize;
    let mut tape = Tape::<f64>::new();
    let (theta_grads, loss_val) = {
        let mut ctx = Ctx::new(&mut tape, store, true);
        let x = ctx
            .tape
            .leaf(&[bsz, spec.in_channels, side, side], images.to_vec(), false)?;
        let logits = genotype_forward(&mut ctx, spec, x, &genotype)?;
        let loss = ctx.tape.cross_entropy_logits(logits, labels)?;
        let loss_val = ctx.tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {loss_val} at step {step_idx}; aborting before update"
            )));
        }
        ctx.tape.backward(loss)?;
        (ctx.grads(), loss_val)
    };
    let grad_norm = theta_grads
        .values()
        .flat_map(|g| g.iter().map(|v| v * v))
        .sum::<f64>()
        .sqrt();
    sgd.step(store, &theta_grads, step_idx);
    let reward = crate::trainer::evaluate_genotype(spec, &genotype, store, val_minibatch, val_minibatch.n.max(1))?;
    let advantage = state.advantage(reward);
    reinforce_alpha_update(alpha, &choices, advantage, state.alpha_lr);
    Ok(StepOutcome {
        loss: loss_val,
        theta_grad_norm: grad_norm,
    })
}
