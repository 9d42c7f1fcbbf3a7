//! Joint training loop: SGD with cosine decay for operation weights, Adam for
//! architecture logits, both fed by a single backward pass per step.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{self, ArchParams, TemperatureSchedule};
use crate::baselines::{darts_train_step, reinforce_constant_step, ReinforceState, SearchMode};
use crate::cell::{derive_genotype, genotype_forward, network_forward, Genotype, MaskMode, NetworkSpec};
use crate::credit::ArchGrads;
use crate::data::{augment, Dataset};
use crate::error::Error;
use crate::params::{Ctx, ParamStore};
use crate::resource::{expected_cost, mc_cost_grad, CostTable, ResourceConfig};
use crate::tensor::Tape;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub theta_lr: f64,
    pub theta_momentum: f64,
    pub theta_wd: f64,
    pub clip_norm: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub alpha_wd: f64,
    pub lambda0: f64,
    pub lambda_min: f64,
    pub resource: ResourceConfig,
    pub cost_mc_samples: usize,
    pub holdout_frac: f64,
    pub augment: bool,
    pub seed: u64,
    pub reinforce_alpha_lr: f64,
    pub reinforce_baseline_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            theta_lr: 0.025,
            theta_momentum: 0.9,
            theta_wd: 3e-4,
            clip_norm: 5.0,
            alpha_lr: 3e-4,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            alpha_wd: 1e-3,
            lambda0: 1.0,
            lambda_min: 0.03,
            resource: ResourceConfig {
                eta: 0.0,
                w_params: 1.0,
                w_flops: 1.0,
                w_mac: 1.0,
            },
            cost_mc_samples: 256,
            holdout_frac: 0.2,
            augment: false,
            seed: 0,
            reinforce_alpha_lr: 0.1,
            reinforce_baseline_momentum: 0.9,
        }
    }
}

// ── Optimizers ──────────────────────────────────────────────────────────

/// Momentum SGD with cosine learning rate, decoupled clip, and L2 decay.
#[derive(Debug)]
pub struct Sgd {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub total_steps: usize,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr0: f64, momentum: f64, weight_decay: f64, clip_norm: f64, total_steps: usize) -> Self {
        Sgd {
            lr0,
            momentum,
            weight_decay,
            clip_norm,
            total_steps,
            velocity: BTreeMap::new(),
        }
    }

    /// Cosine from lr0 at step 0 to exactly 0 at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr0;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        0.5 * self.lr0 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Global-norm clip over all gradients, then momentum update with L2
    /// decay added after clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f64>,
        grads: &BTreeMap<String, Vec<f64>>,
        step_idx: usize,
    ) {
        let lr = self.lr_at(step_idx);
        let norm_sq: f64 = grads.values().flat_map(|g| g.iter().map(|v| v * v)).sum();
        let norm = norm_sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let grad = g[i] * scale + self.weight_decay * p.data[i];
                vel[i] = self.momentum * vel[i] + grad;
                p.data[i] -= lr * vel[i];
            }
        }
    }
}

/// Adam over architecture logits with coupled L2 decay.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    t: usize,
    m: ArchGrads,
    v: ArchGrads,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64, num_edges: usize, num_ops: usize) -> Self {
        let zeros = || ArchGrads {
            normal: vec![vec![0.0; num_ops]; num_edges],
            reduce: vec![vec![0.0; num_ops]; num_edges],
        };
        Adam {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, alpha: &mut ArchParams, grads: &ArchGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let update = |rows: &mut Vec<Vec<f64>>, g: &[Vec<f64>], m: &mut [Vec<f64>], v: &mut [Vec<f64>]| {
            for e in 0..rows.len() {
                for k in 0..rows[e].len() {
                    let grad = g[e][k] + self.weight_decay * rows[e][k];
                    m[e][k] = self.beta1 * m[e][k] + (1.0 - self.beta1) * grad;
                    v[e][k] = self.beta2 * v[e][k] + (1.0 - self.beta2) * grad * grad;
                    let mhat = m[e][k] / bc1;
                    let vhat = v[e][k] / bc2;
                    rows[e][k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        };
        update(&mut alpha.normal, &grads.normal, &mut self.m.normal, &mut self.v.normal);
        update(&mut alpha.reduce, &grads.reduce, &mut self.m.reduce, &mut self.v.reduce);
    }
}

// ── Single step ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub theta_grad_norm: f64,
}

fn gather_batch(ds: &Dataset, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let sz = ds.channels * ds.height * ds.height;
    let mut images = Vec::with_capacity(idx.len() * sz);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        images.extend_from_slice(ds.image(i));
        labels.push(ds.labels[i]);
    }
    (images, labels)
}

/// One joint update: sample masks, forward, one backward populating both
/// operation and architecture gradients, then the two optimizer steps. The
/// resource penalty gradient is added only when eta > 0 so a zero penalty
/// leaves the random stream and the update bitwise untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng>(
    spec: &NetworkSpec,
    alpha: &mut ArchParams,
    store: &mut ParamStore<f64>,
    images: &[f64],
    labels: &[usize],
    lambda: f64,
    sgd: &mut Sgd,
    adam: &mut Adam,
    step_idx: usize,
    cost: Option<(&CostTable, f64, usize)>,
    rng: &mut R,
) -> Result<StepOutcome, Error> {
    let bsz = labels.len();
    let mut tape = Tape::<f64>::new();
    let (theta_grads, mut arch_grads, loss_val) = {
        let mut ctx = Ctx::new(&mut tape, store, true);
        let x = ctx
            .tape
            .leaf(&[bsz, spec.in_channels, _side(images, bsz, spec.in_channels), _side(images, bsz, spec.in_channels)], images.to_vec(), false)?;
        let trace = network_forward(&mut ctx, spec, x, alpha, MaskMode::Sampled { lambda }, true, rng)?;
        let loss = ctx.tape.cross_entropy_logits(trace.logits, labels)?;
        let loss_val = ctx.tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Numerical(format!(
                "loss {loss_val} at step {step_idx}, lambda {lambda}, batch {bsz}; aborting before update"
            )));
        }
        ctx.tape.backward(loss)?;
        debug_assert_eq!(ctx.tape.backward_runs(), 1, "one backward per step");
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
            "gradient norm {grad_norm} at step {step_idx}, lambda {lambda}, loss {loss_val}; aborting before update"
        )));
    }
    if let Some((table, eta, mc_samples)) = cost {
        if eta > 0.0 {
            let cg = mc_cost_grad(table, spec, alpha, mc_samples, rng)?;
            for (dst, src) in arch_grads
                .normal
                .iter_mut()
                .chain(arch_grads.reduce.iter_mut())
                .zip(cg.normal.iter().chain(cg.reduce.iter()))
            {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += eta * s;
                }
            }
        }
    }
    sgd.step(store, &theta_grads, step_idx);
    adam.step(alpha, &arch_grads);
    Ok(StepOutcome {
        loss: loss_val,
        theta_grad_norm: grad_norm,
    })
}

fn _side(images: &[f64], bsz: usize, channels: usize) -> usize {
    ((images.len() / (bsz * channels)) as f64).sqrt().round() as usize
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Accuracy of the derived child graph; sequential fixed-size batches so
/// batch statistics are reproducible.
pub fn evaluate_genotype(
    spec: &NetworkSpec,
    genotype: &Genotype,
    store: &mut ParamStore<f64>,
    ds: &Dataset,
    batch: usize,
) -> Result<f64, Error> {
    eval_inner(ds, batch, |tape, imgs, bsz| {
        let mut ctx = Ctx::new(tape, store, false);
        let x = ctx.tape.leaf(&[bsz, ds.channels, ds.height, ds.height], imgs, false)?;
        genotype_forward(&mut ctx, spec, x, genotype)
    })
}

/// Accuracy of the masked supernet with softmax expectation masks.
pub fn evaluate_expectation(
    spec: &NetworkSpec,
    alpha: &ArchParams,
    store: &mut ParamStore<f64>,
    ds: &Dataset,
    batch: usize,
) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    eval_inner(ds, batch, |tape, imgs, bsz| {
        let mut ctx = Ctx::new(tape, store, false);
        let x = ctx.tape.leaf(&[bsz, ds.channels, ds.height, ds.height], imgs, false)?;
        let trace = network_forward(&mut ctx, spec, x, alpha, MaskMode::Expectation, false, &mut rng)?;
        Ok(trace.logits)
    })
}

/// Accuracy of the masked supernet with concrete masks sampled at `lambda`;
/// this is the network the sampling-based search actually trains.
pub fn evaluate_sampled(
    spec: &NetworkSpec,
    alpha: &ArchParams,
    store: &mut ParamStore<f64>,
    ds: &Dataset,
    batch: usize,
    lambda: f64,
    seed: u64,
) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eval_inner(ds, batch, |tape, imgs, bsz| {
        let mut ctx = Ctx::new(tape, store, false);
        let x = ctx.tape.leaf(&[bsz, ds.channels, ds.height, ds.height], imgs, false)?;
        let trace =
            network_forward(&mut ctx, spec, x, alpha, MaskMode::Sampled { lambda }, false, &mut rng)?;
        Ok(trace.logits)
    })
}

fn eval_inner<F>(ds: &Dataset, batch: usize, mut forward: F) -> Result<f64, Error>
where
    F: FnMut(&mut Tape<f64>, Vec<f64>, usize) -> Result<crate::tensor::TensorId, crate::error::TensorError>,
{
    let mut correct = 0usize;
    let sz = ds.channels * ds.height * ds.height;
    let mut start = 0;
    while start < ds.n {
        let end = (start + batch).min(ds.n);
        let bsz = end - start;
        let mut tape = Tape::<f64>::new();
        let logits = forward(&mut tape, ds.images[start * sz..end * sz].to_vec(), bsz)?;
        let data = tape.data(logits);
        let classes = tape.shape(logits)[1];
        for b in 0..bsz {
            let pred = arch::argmax(&data[b * classes..(b + 1) * classes]);
            if pred == ds.labels[start + b] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / ds.n as f64)
}

// ── Search loop ─────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str =
    "epoch,train_loss,search_val_acc,child_val_acc,mean_entropy,expected_cost,temperature,wall_s";

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub search_val_acc: f64,
    pub child_val_acc: f64,
    pub mean_entropy: f64,
    pub expected_cost: f64,
    pub temperature: f64,
    pub wall_s: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch,
            self.train_loss,
            self.search_val_acc,
            self.child_val_acc,
            self.mean_entropy,
            self.expected_cost,
            self.temperature,
            self.wall_s
        )
    }
}

#[derive(Debug)]
pub struct SearchOutput {
    pub alpha: ArchParams,
    pub genotype: Genotype,
    pub store: ParamStore<f64>,
    pub metrics: Vec<EpochMetrics>,
    /// Derived genotype after each epoch.
    pub epoch_genotypes: Vec<Genotype>,
}

fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.random::<f64>() * (i + 1) as f64) as usize % (i + 1);
        idx.swap(i, j);
    }
    idx
}

fn write_manifest(path: &Path, spec: &NetworkSpec, cfg: &TrainConfig, mode: SearchMode) -> Result<(), Error> {
    let ops: Vec<&str> = spec.candidates.iter().map(|o| o.name()).collect();
    let text = format!(
        "mode = {}\nnum_cells = {}\nnum_intermediate = {}\ninit_channels = {}\nin_channels = {}\nnum_classes = {}\nuse_reduction = {}\ncandidates = {}\nepochs = {}\nbatch_size = {}\ntheta_lr = {}\ntheta_momentum = {}\ntheta_wd = {}\nclip_norm = {}\nalpha_lr = {}\nalpha_beta1 = {}\nalpha_beta2 = {}\nalpha_wd = {}\nlambda0 = {}\nlambda_min = {}\neta = {}\ncost_w_params = {}\ncost_w_flops = {}\ncost_w_mac = {}\ncost_mc_samples = {}\nholdout_frac = {}\naugment = {}\nseed = {}\n",
        mode.name(),
        spec.num_cells,
        spec.num_intermediate,
        spec.init_channels,
        spec.in_channels,
        spec.num_classes,
        spec.use_reduction,
        ops.join("|"),
        cfg.epochs,
        cfg.batch_size,
        cfg.theta_lr,
        cfg.theta_momentum,
        cfg.theta_wd,
        cfg.clip_norm,
        cfg.alpha_lr,
        cfg.alpha_beta1,
        cfg.alpha_beta2,
        cfg.alpha_wd,
        cfg.lambda0,
        cfg.lambda_min,
        cfg.resource.eta,
        cfg.resource.w_params,
        cfg.resource.w_flops,
        cfg.resource.w_mac,
        cfg.cost_mc_samples,
        cfg.holdout_frac,
        cfg.augment,
        cfg.seed
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_checkpoint(path: &Path, store: &ParamStore<f64>, alpha: &ArchParams, epoch: usize) -> Result<(), Error> {
    let mut archive = store.to_archive();
    alpha.to_archive(&mut archive);
    archive.insert(
        "meta.epoch",
        vec![1],
        crate::checkpoint::ArrayValue::F64(vec![epoch as f64]),
    );
    archive.write(path)
}

/// Full architecture search: joint updates each epoch, validation metrics,
/// atomic checkpoint, CSV row. Writes manifest.txt, metrics.csv,
/// checkpoint.bin, and genotype.txt under `out_dir` when given.
pub fn run_search(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    mode: SearchMode,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SearchOutput, Error> {
    cfg.resource.validate()?;
    let graph = spec.graph();
    let (train, val) = data.split(cfg.holdout_frac);
    if train.n == 0 || val.n == 0 {
        return Err(Error::Config(format!(
            "holdout {} leaves train {} / val {}",
            cfg.holdout_frac, train.n, val.n
        )));
    }
    let steps_per_epoch = train.n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut store = ParamStore::<f64>::new(cfg.seed);
    let mut alpha = ArchParams::uniform(graph.num_edges(), graph.candidates.len());
    let mut sgd = Sgd::new(cfg.theta_lr, cfg.theta_momentum, cfg.theta_wd, cfg.clip_norm, total_steps);
    let mut adam = Adam::new(
        cfg.alpha_lr,
        cfg.alpha_beta1,
        cfg.alpha_beta2,
        cfg.alpha_wd,
        graph.num_edges(),
        graph.candidates.len(),
    );
    let schedule = TemperatureSchedule::linear(cfg.lambda0, cfg.lambda_min, cfg.epochs);
    let table = if cfg.resource.eta > 0.0 {
        Some(CostTable::build(spec, train.height, &cfg.resource)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e41_c0de);
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_manifest(&dir.join("manifest.txt"), spec, cfg, mode)?;
            let path = dir.join("metrics.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut reinforce = ReinforceState::new(cfg.reinforce_alpha_lr, cfg.reinforce_baseline_momentum);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut epoch_genotypes = Vec::with_capacity(cfg.epochs);
    let mut step_idx = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lambda = schedule.at(epoch);
        let order = shuffled_indices(train.n, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = gather_batch(&train, chunk);
            if cfg.augment {
                images = augment(&images, chunk.len(), train.channels, train.height, &mut rng);
            }
            let out = match mode {
                SearchMode::Snas => train_step(
                    spec,
                    &mut alpha,
                    &mut store,
                    &images,
                    &labels,
                    lambda,
                    &mut sgd,
                    &mut adam,
                    step_idx,
                    table.as_ref().map(|t| (t, cfg.resource.eta, cfg.cost_mc_samples)),
                    &mut rng,
                )?,
                SearchMode::DartsAttention => darts_train_step(
                    spec, &mut alpha, &mut store, &images, &labels, &mut sgd, &mut adam, step_idx,
                )?,
                SearchMode::ReinforceConstant => {
                    // reward minibatch drawn fresh from the holdout
                    let n_val = cfg.batch_size.min(val.n);
                    let pick: Vec<usize> = shuffled_indices(val.n, &mut rng)[..n_val].to_vec();
                    let (vi, vl) = gather_batch(&val, &pick);
                    let val_mb = Dataset {
                        images: vi,
                        labels: vl,
                        n: n_val,
                        channels: val.channels,
                        height: val.height,
                        num_classes: val.num_classes,
                        norm: val.norm.clone(),
                    };
                    reinforce_constant_step(
                        spec,
                        &mut alpha,
                        &mut store,
                        &images,
                        &labels,
                        &val_mb,
                        &mut sgd,
                        &mut reinforce,
                        step_idx,
                        &mut rng,
                    )?
                }
            };
            loss_sum += out.loss * labels.len() as f64;
            step_idx += 1;
        }
        let genotype = derive_genotype(&alpha, &graph);
        // The search model is evaluated as trained: sampled concrete masks for
        // the sampling modes, the deterministic mixture for attention mode.
        let search_val_acc = match mode {
            SearchMode::DartsAttention => {
                evaluate_expectation(spec, &alpha, &mut store, &val, cfg.batch_size)?
            }
            _ => evaluate_sampled(
                spec,
                &alpha,
                &mut store,
                &val,
                cfg.batch_size,
                lambda,
                cfg.seed ^ (0xe7a1 + epoch as u64),
            )?,
        };
        let child_val_acc = evaluate_genotype(spec, &genotype, &mut store, &val, cfg.batch_size)?;
        let exp_cost = match &table {
            Some(t) => expected_cost(t, spec, &alpha),
            None => 0.0,
        };
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.n as f64,
            search_val_acc,
            child_val_acc,
            mean_entropy: alpha.mean_entropy(),
            expected_cost: exp_cost,
            temperature: lambda,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(&*path, e))?;
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
        metrics.push(row);
        epoch_genotypes.push(genotype);
        if let Some(dir) = out_dir {
            write_checkpoint(&dir.join("checkpoint.bin"), &store, &alpha, epoch)?;
        }
    }
    let genotype = derive_genotype(&alpha, &graph);
    if let Some(dir) = out_dir {
        let path = dir.join("genotype.txt");
        std::fs::write(&path, genotype.render(&graph)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SearchOutput {
        alpha,
        genotype,
        store,
        metrics,
        epoch_genotypes,
    })
}

/// Train only the operation weights of a fixed child graph; returns the
/// trained store and per-epoch validation accuracy.
pub fn train_child(
    spec: &NetworkSpec,
    genotype: &Genotype,
    cfg: &TrainConfig,
    data: &Dataset,
) -> Result<(ParamStore<f64>, Vec<f64>), Error> {
    let (train, val) = data.split(cfg.holdout_frac);
    if train.n == 0 || val.n == 0 {
        return Err(Error::Config(format!(
            "holdout {} leaves train {} / val {}",
            cfg.holdout_frac, train.n, val.n
        )));
    }
    let steps_per_epoch = train.n.div_ceil(cfg.batch_size);
    let mut store = ParamStore::<f64>::new(cfg.seed);
    let mut sgd = Sgd::new(cfg.theta_lr, cfg.theta_momentum, cfg.theta_wd, cfg.clip_norm, cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc41d);
    let mut accs = Vec::with_capacity(cfg.epochs);
    let mut step_idx = 0usize;
    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.n, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = gather_batch(&train, chunk);
            if cfg.augment {
                images = augment(&images, chunk.len(), train.channels, train.height, &mut rng);
            }
            let bsz = labels.len();
            let mut tape = Tape::<f64>::new();
            let theta_grads = {
                let mut ctx = Ctx::new(&mut tape, &mut store, true);
                let x = ctx
                    .tape
                    .leaf(&[bsz, train.channels, train.height, train.height], images, false)?;
                let logits = genotype_forward(&mut ctx, spec, x, genotype)?;
                let loss = ctx.tape.cross_entropy_logits(logits, &labels)?;
                let loss_val = ctx.tape.scalar_value(loss);
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!("loss {loss_val} at step {step_idx}")));
                }
                ctx.tape.backward(loss)?;
                ctx.grads()
            };
            sgd.step(&mut store, &theta_grads, step_idx);
            step_idx += 1;
        }
        accs.push(evaluate_genotype(spec, genotype, &mut store, &val, cfg.batch_size)?);
    }
    Ok((store, accs))
}
