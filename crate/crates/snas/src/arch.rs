//! The fully factorized architecture distribution: concrete-relaxation
//! sampling, temperature schedule, probabilities, and entropy.
//!
//! Logits are stored as log α directly (unconstrained reals), initialized to
//! zeros, so the initial distribution is uniform per edge.

use rand::Rng;

use crate::checkpoint::{Archive, ArrayValue};
use crate::error::TensorError;
use crate::tensor::{Element, Tape, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

/// Clamp range for uniform draws before the double log.
const U_LO: f64 = 1e-10;
const U_HI: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

/// Per-cell-type edge logit matrices, rows = edges, cols = candidate ops.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
}

impl ArchParams {
    /// All-zero logits: uniform distribution on every edge.
    pub fn uniform(num_edges: usize, num_ops: usize) -> Self {
        ArchParams {
            normal: vec![vec![0.0; num_ops]; num_edges],
            reduce: vec![vec![0.0; num_ops]; num_edges],
        }
    }

    pub fn rows(&self, cell_type: CellType) -> &[Vec<f64>] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn rows_mut(&mut self, cell_type: CellType) -> &mut Vec<Vec<f64>> {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduce => &mut self.reduce,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.normal.len()
    }

    pub fn num_ops(&self) -> usize {
        self.normal.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn mean_entropy(&self) -> f64 {
        let rows: Vec<&Vec<f64>> = self.normal.iter().chain(self.reduce.iter()).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| edge_entropy(r)).sum::<f64>() / rows.len() as f64
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        for (cell_type, rows) in [(CellType::Normal, &self.normal), (CellType::Reduce, &self.reduce)] {
            for (e, row) in rows.iter().enumerate() {
                archive.insert(
                    format!("arch.{}.edge{e}", cell_type.name()),
                    vec![row.len()],
                    ArrayValue::F64(row.clone()),
                );
            }
        }
    }

    pub fn from_archive(archive: &Archive, num_edges: usize, num_ops: usize) -> Option<Self> {
        let mut out = ArchParams::uniform(num_edges, num_ops);
        for cell_type in [CellType::Normal, CellType::Reduce] {
            for e in 0..num_edges {
                let arr = archive.get(&format!("arch.{}.edge{e}", cell_type.name()))?;
                let row = arr.value.to_f64_vec();
                if row.len() != num_ops {
                    return None;
                }
                out.rows_mut(cell_type)[e] = row;
            }
        }
        Some(out)
    }
}

// ── Sampling ────────────────────────────────────────────────────────────

/// G = −log(−log U), with U clamped into the open interval.
pub fn gumbel(u: f64) -> f64 {
    let u = u.clamp(U_LO, U_HI);
    -(-u.ln()).ln()
}

pub fn draw_gumbels<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng.random::<f64>())).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Softened one-hot Z_k = softmax((log α + G)/λ), off-tape.
pub fn relaxed_sample(log_alpha: &[f64], gumbels: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(TensorError::invalid("relaxed_sample", format!("lambda {lambda} <= 0")));
    }
    if log_alpha.len() != gumbels.len() {
        return Err(TensorError::shape(
            "relaxed_sample",
            format!("{} logits vs {} gumbels", log_alpha.len(), gumbels.len()),
        ));
    }
    let scaled: Vec<f64> = log_alpha
        .iter()
        .zip(gumbels)
        .map(|(&la, &g)| (la + g) / lambda)
        .collect();
    Ok(softmax(&scaled))
}

/// Same computation on the tape: Z = softmax((logα + G)/λ), differentiable
/// through logα via the reparameterization. `log_alpha` must be a tape tensor;
/// the Gumbel draws enter as constants.
pub fn relaxed_sample_on_tape<E: Element>(
    tape: &mut Tape<E>,
    log_alpha: TensorId,
    gumbels: &[f64],
    lambda: f64,
) -> Result<TensorId> {
    if lambda <= 0.0 {
        return Err(TensorError::invalid("relaxed_sample", format!("lambda {lambda} <= 0")));
    }
    let g = tape.leaf_f64(&[gumbels.len()], gumbels, false)?;
    let shifted = tape.add(log_alpha, g)?;
    let scaled = tape.scale(shifted, 1.0 / lambda)?;
    tape.softmax1d(scaled)
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

// ── Probabilities and entropy ───────────────────────────────────────────

/// Shannon entropy (nats) of softmax(log α).
pub fn edge_entropy(log_alpha: &[f64]) -> f64 {
    let p = softmax(log_alpha);
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// log softmax(log α)[k], the categorical log-probability of op k.
pub fn log_prob(log_alpha: &[f64], k: usize) -> Result<f64> {
    if k >= log_alpha.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "log_prob",
            index: k,
            len: log_alpha.len(),
        });
    }
    let m = log_alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + log_alpha.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(log_alpha[k] - lse)
}

/// ∇_{log α} log p(k) = onehot(k) − softmax(log α).
pub fn categorical_score(log_alpha: &[f64], k: usize) -> Vec<f64> {
    let p = softmax(log_alpha);
    p.iter()
        .enumerate()
        .map(|(i, &pi)| if i == k { 1.0 - pi } else { -pi })
        .collect()
}

/// ∇_{log α_k} of the concrete density log p_λ(z):
/// 1 − n·α_k z_k^{−λ} / Σ_l α_l z_l^{−λ}.
pub fn concrete_density_score(log_alpha: &[f64], z: &[f64], lambda: f64) -> Vec<f64> {
    let n = log_alpha.len() as f64;
    let terms: Vec<f64> = log_alpha
        .iter()
        .zip(z)
        .map(|(&la, &zk)| (la - lambda * zk.ln()).exp())
        .collect();
    let total: f64 = terms.iter().sum();
    terms.iter().map(|&t| 1.0 - n * t / total).collect()
}

// ── Temperature schedule ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayMode {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub mode: DecayMode,
    pub total_epochs: usize,
}

impl TemperatureSchedule {
    pub fn linear(lambda0: f64, lambda_min: f64, total_epochs: usize) -> Self {
        TemperatureSchedule {
            lambda0,
            lambda_min,
            mode: DecayMode::Linear,
            total_epochs,
        }
    }

    /// Temperature at the start of `epoch`; reaches lambda_min at the final
    /// epoch and never drops below it.
    pub fn at(&self, epoch: usize) -> f64 {
        if self.total_epochs <= 1 {
            return self.lambda_min;
        }
        let t = (epoch as f64 / (self.total_epochs - 1) as f64).min(1.0);
        match self.mode {
            DecayMode::Linear => self.lambda0 + (self.lambda_min - self.lambda0) * t,
            DecayMode::Exponential => {
                self.lambda0 * (self.lambda_min / self.lambda0).powf(t)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_closed_form_inversions() {
        assert!(gumbel((-1.0f64).exp()).abs() < 1e-12);
        assert!((gumbel((-(-1.0f64).exp()).exp()) - 1.0).abs() < 1e-9);
        assert!((gumbel((-std::f64::consts::E).exp()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_equal_noise_gives_uniform() {
        let z = relaxed_sample(&[0.3; 5], &[1.1; 5], 0.7).unwrap();
        for &x in &z {
            assert!((x - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_case_alpha_2_1_lambda_half() {
        // softmax((ln 2, 0)/0.5) = (4/5, 1/5).
        let z = relaxed_sample(&[2.0f64.ln(), 0.0], &[0.0, 0.0], 0.5).unwrap();
        assert!((z[0] - 0.8).abs() < 1e-12);
        assert!((z[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn samples_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let la: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let g = draw_gumbels(8, &mut rng);
            let z = relaxed_sample(&la, &g, 0.2).unwrap();
            let s: f64 = z.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(z.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn nonpositive_lambda_rejected() {
        assert!(relaxed_sample(&[0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
        assert!(relaxed_sample(&[0.0, 0.0], &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert!((edge_entropy(&[0.0; 8]) - 8.0f64.ln()).abs() < 1e-12);
        assert!(edge_entropy(&[100.0, 0.0, 0.0]) < 1e-12);
        // probs (0.5, 0.5, ~0, ~0)
        let h = edge_entropy(&[0.0, 0.0, -60.0, -60.0]);
        assert!((h - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn log_prob_cases() {
        assert!((log_prob(&[0.0; 4], 2).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        // α=(1,3) as logits (ln 1, ln 3): p(1) = 0.75.
        assert!((log_prob(&[0.0, 3.0f64.ln()], 1).unwrap() - 0.75f64.ln()).abs() < 1e-12);
        assert!(log_prob(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn categorical_score_matches_finite_differences() {
        let la = [0.4, -0.2, 1.1];
        let score = categorical_score(&la, 1);
        let eps = 1e-6;
        for i in 0..3 {
            let mut up = la;
            up[i] += eps;
            let mut dn = la;
            dn[i] -= eps;
            let num = (log_prob(&up, 1).unwrap() - log_prob(&dn, 1).unwrap()) / (2.0 * eps);
            assert!((score[i] - num).abs() < 1e-8, "component {i}");
        }
    }

    #[test]
    fn concrete_density_score_matches_finite_differences() {
        // log density up to a λ-only constant:
        // Σ_k (logα_k − (λ+1) ln z_k) − n ln Σ_l α_l z_l^{−λ}.
        fn log_density_var(la: &[f64], z: &[f64], lambda: f64) -> f64 {
            let n = la.len() as f64;
            let s: f64 = la.iter().zip(z).map(|(&a, &zk)| (a - lambda * zk.ln()).exp()).sum();
            la.iter().zip(z).map(|(&a, &zk)| a - (lambda + 1.0) * zk.ln()).sum::<f64>() - n * s.ln()
        }
        let la = [0.2, -0.5, 0.9];
        let z = softmax(&[0.3, 1.0, -0.2]);
        let lambda = 0.7;
        let score = concrete_density_score(&la, &z, lambda);
        let eps = 1e-6;
        for i in 0..3 {
            let mut up = la;
            up[i] += eps;
            let mut dn = la;
            dn[i] -= eps;
            let num = (log_density_var(&up, &z, lambda) - log_density_var(&dn, &z, lambda)) / (2.0 * eps);
            assert!((score[i] - num).abs() < 1e-7, "component {i}: {} vs {num}", score[i]);
        }
    }

    #[test]
    fn zero_temperature_limit_is_monotone_toward_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut final_max_sum = 0.0;
        for _ in 0..50 {
            let la: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let g = draw_gumbels(6, &mut rng);
            let perturbed: Vec<f64> = la.iter().zip(&g).map(|(&a, &gg)| a + gg).collect();
            let k = argmax(&perturbed);
            let mut prev_max = 0.0;
            for lambda in [1.0, 0.1, 0.01] {
                let z = relaxed_sample(&la, &g, lambda).unwrap();
                assert_eq!(argmax(&z), k);
                let m = z[k];
                assert!(m >= prev_max - 1e-12, "lambda {lambda}");
                prev_max = m;
            }
            final_max_sum += prev_max;
        }
        // Close-call draws (two perturbed logits within ~λ·ln 99) keep the max
        // below 0.99, so assert on the mean rather than per draw.
        assert!(final_max_sum / 50.0 > 0.95, "mean {}", final_max_sum / 50.0);
    }

    #[test]
    fn argmax_distribution_is_lambda_invariant() {
        // Chi-square of argmax counts across temperatures against the
        // categorical probabilities; 3 dof per temperature, threshold 16.27
        // (p=0.001). Identical U streams give identical argmax exactly; use
        // independent streams for a real distributional check.
        let la = [0.0, 1.0f64.ln(), 2.0f64.ln(), 0.5f64.ln()];
        let p = softmax(&la);
        let n = 40_000;
        for (ti, lambda) in [1.0, 0.1, 0.01].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + ti as u64);
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let g = draw_gumbels(4, &mut rng);
                let z = relaxed_sample(&la, &g, lambda).unwrap();
                counts[argmax(&z)] += 1;
            }
            let chi2: f64 = counts
                .iter()
                .zip(&p)
                .map(|(&c, &pi)| {
                    let e = pi * n as f64;
                    (c as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < 16.27, "lambda {lambda}: chi2 {chi2}, counts {counts:?}");
        }
    }

    #[test]
    fn low_temperature_argmax_frequency_matches_alpha_ratio() {
        // α=(1,3): p(argmax = op 1) = 0.75.
        let la = [0.0, 3.0f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let g = draw_gumbels(2, &mut rng);
            let z = relaxed_sample(&la, &g, 0.01).unwrap();
            if argmax(&z) == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn on_tape_sample_matches_off_tape_and_reparam_grad_checks() {
        use crate::gradcheck::check_gradients;
        let la = vec![0.3, -0.7, 1.2];
        let g = vec![0.5, -0.1, 0.9];
        let lambda = 0.6;
        let z_off = relaxed_sample(&la, &g, lambda).unwrap();
        let mut tape = Tape::<f64>::new();
        let la_id = tape.leaf(&[3], la.clone(), true).unwrap();
        let z_id = relaxed_sample_on_tape(&mut tape, la_id, &g, lambda).unwrap();
        let z_on = tape.data(z_id).to_vec();
        for (a, b) in z_off.iter().zip(&z_on) {
            assert!((a - b).abs() < 1e-12);
        }
        // Closed-form reparameterization gradient in log-α:
        // ∂Σ w_k Z_k / ∂logα_l = (Z_l/λ)(w_l − Σ_k w_k Z_k).
        let w = [1.0, 2.0, -0.5];
        let wz: f64 = w.iter().zip(&z_off).map(|(a, b)| a * b).sum();
        let g_vec = g.clone();
        let report = check_gradients(&[(vec![3], la.clone())], 1e-6, &move |tape, ids| {
            let z = relaxed_sample_on_tape(tape, ids[0], &g_vec, lambda)?;
            let wt = tape.leaf(&[3], w.to_vec(), false)?;
            let prod = tape.mul(z, wt)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        let mut tape2 = Tape::<f64>::new();
        let la_id = tape2.leaf(&[3], la.clone(), true).unwrap();
        let z_id = relaxed_sample_on_tape(&mut tape2, la_id, &g, lambda).unwrap();
        let wt = tape2.leaf(&[3], w.to_vec(), false).unwrap();
        let prod = tape2.mul(z_id, wt).unwrap();
        let loss = tape2.sum(prod).unwrap();
        tape2.backward(loss).unwrap();
        let grad = tape2.grad(la_id).unwrap();
        for l in 0..3 {
            let closed = z_off[l] / lambda * (w[l] - wz);
            assert!((grad[l] - closed).abs() < 1e-10, "component {l}");
        }
    }

    #[test]
    fn temperature_schedule_endpoints_and_monotonicity() {
        let s = TemperatureSchedule::linear(1.0, 0.03, 50);
        assert!((s.at(0) - 1.0).abs() < 1e-12);
        assert!((s.at(49) - 0.03).abs() < 1e-12);
        assert!((s.at(100) - 0.03).abs() < 1e-12);
        for e in 1..50 {
            assert!(s.at(e) < s.at(e - 1));
        }
        let ex = TemperatureSchedule {
            lambda0: 1.0,
            lambda_min: 0.03,
            mode: DecayMode::Exponential,
            total_epochs: 50,
        };
        assert!((ex.at(0) - 1.0).abs() < 1e-12);
        assert!((ex.at(49) - 0.03).abs() < 1e-9);
    }

    #[test]
    fn arch_params_archive_roundtrip() {
        let mut a = ArchParams::uniform(5, 4);
        a.normal[2][1] = 0.75;
        a.reduce[4][3] = -1.5;
        let mut archive = Archive::new();
        a.to_archive(&mut archive);
        let b = ArchParams::from_archive(&archive, 5, 4).unwrap();
        assert_eq!(a, b);
    }
}
