//! Dataset ingestion: CIFAR-10 binary files with optional box downsampling,
//! training-time augmentation, and synthetic planted-architecture tasks.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::cell::{genotype_forward, Genotype, NetworkSpec};
use crate::error::Error;
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tape;

/// Images stored as (n, c, h, w) row-major; normalization applied exactly
/// once at load.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Per-channel (mean, std) used for normalization, for the manifest.
    pub norm: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.channels * self.height * self.height;
        &self.images[i * sz..(i + 1) * sz]
    }

    /// First `n - holdout` samples for training, the rest for validation.
    pub fn split(&self, holdout_frac: f64) -> (Dataset, Dataset) {
        let n_val = ((self.n as f64) * holdout_frac).round() as usize;
        let n_train = self.n - n_val;
        let sz = self.channels * self.height * self.height;
        let make = |range: std::ops::Range<usize>| Dataset {
            images: self.images[range.start * sz..range.end * sz].to_vec(),
            labels: self.labels[range.clone()].to_vec(),
            n: range.end - range.start,
            channels: self.channels,
            height: self.height,
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        };
        (make(0..n_train), make(n_train..self.n))
    }
}

const CIFAR_DIM: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_DIM * CIFAR_DIM;

/// Read the first `take` records across the given files; each record is one
/// label byte then 3072 channel-planar pixel bytes. `resize_to` must be 32,
/// 16, or 8 (repeated 2x2 box averaging); normalization uses the loaded
/// subset's per-channel statistics.
pub fn load_cifar_binary(paths: &[PathBuf], take: usize, resize_to: usize) -> Result<Dataset, Error> {
    if !matches!(resize_to, 8 | 16 | 32) {
        return Err(Error::Config(format!("resize {resize_to} not in {{8, 16, 32}}")));
    }
    let mut raw: Vec<u8> = Vec::new();
    let mut labels = Vec::with_capacity(take);
    'outer: for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::Data {
                path: path.clone(),
                detail: format!("{} bytes is not a whole number of {RECORD_BYTES}-byte records", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(RECORD_BYTES) {
            labels.push(rec[0] as usize);
            raw.extend_from_slice(&rec[1..]);
            if labels.len() == take {
                break 'outer;
            }
        }
    }
    if labels.len() < take {
        return Err(Error::Data {
            path: paths.last().cloned().unwrap_or_default(),
            detail: format!("{} records available, {take} requested", labels.len()),
        });
    }
    let mut images: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let mut dim = CIFAR_DIM;
    while dim > resize_to {
        images = box_downsample(&images, take, CIFAR_CHANNELS, dim);
        dim /= 2;
    }
    let norm = normalize_per_channel(&mut images, take, CIFAR_CHANNELS, dim);
    Ok(Dataset {
        images,
        labels,
        n: take,
        channels: CIFAR_CHANNELS,
        height: dim,
        num_classes: 10,
        norm,
    })
}

/// Synthetic-fixture writer in the same binary layout.
pub fn write_cifar_binary(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<(), Error> {
    let per = CIFAR_CHANNELS * CIFAR_DIM * CIFAR_DIM;
    let mut out = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&pixels[i * per..(i + 1) * per]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn box_downsample(images: &[f64], n: usize, c: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; n * c * half * half];
    for i in 0..n {
        for ch in 0..c {
            for y in 0..half {
                for x in 0..half {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += images[((i * c + ch) * dim + 2 * y + dy) * dim + 2 * x + dx];
                        }
                    }
                    out[((i * c + ch) * half + y) * half + x] = s / 4.0;
                }
            }
        }
    }
    out
}

fn normalize_per_channel(images: &mut [f64], n: usize, c: usize, dim: usize) -> Vec<(f64, f64)> {
    let per = dim * dim;
    let mut norm = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            for p in 0..per {
                let v = images[(i * c + ch) * per + p];
                sum += v;
                sum_sq += v * v;
            }
        }
        let count = (n * per) as f64;
        let mean = sum / count;
        let std = (sum_sq / count - mean * mean).sqrt().max(1e-8);
        for i in 0..n {
            for p in 0..per {
                let v = &mut images[(i * c + ch) * per + p];
                *v = (*v - mean) / std;
            }
        }
        norm.push((mean, std));
    }
    norm
}

// ── Augmentation ────────────────────────────────────────────────────────

/// Zero-pad, random crop back, 0.5-probability horizontal flip. The pad of 4
/// at 32x32 scales proportionally with resolution (minimum 1).
pub fn augment<R: Rng>(batch: &[f64], n: usize, c: usize, dim: usize, rng: &mut R) -> Vec<f64> {
    let pad = (4 * dim / 32).max(1);
    let padded = dim + 2 * pad;
    let mut out = vec![0.0; batch.len()];
    for i in 0..n {
        let ox = (rng.random::<f64>() * (2 * pad + 1) as f64) as usize % (2 * pad + 1);
        let oy = (rng.random::<f64>() * (2 * pad + 1) as f64) as usize % (2 * pad + 1);
        let flip = rng.random::<f64>() < 0.5;
        for ch in 0..c {
            for y in 0..dim {
                for x in 0..dim {
                    // crop window (oy, ox) of the padded image
                    let sy = y + oy;
                    let sx = x + ox;
                    let v = if sy >= pad && sy < pad + dim && sx >= pad && sx < pad + dim {
                        let src_x = if flip { dim - 1 - (sx - pad) } else { sx - pad };
                        batch[((i * c + ch) * dim + (sy - pad)) * dim + src_x]
                    } else {
                        0.0
                    };
                    out[((i * c + ch) * dim + y) * dim + x] = v;
                }
            }
        }
        let _ = padded;
    }
    out
}

// ── Planted tasks ───────────────────────────────────────────────────────

/// A teacher child network with frozen random weights defines the labels, so
/// the task is solvable exactly by the planted architecture.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub genotype: Genotype,
    pub teacher: ParamStore<f64>,
    pub seed: u64,
    /// Fraction of labels randomly reassigned.
    pub noise_level: f64,
    /// Labels are produced in sequential batches of this size because batch
    /// normalization uses per-batch statistics; evaluation must batch the
    /// same way to reproduce them exactly.
    pub label_batch: usize,
}

/// Teacher logits over `images` in sequential `label_batch` batches; returns
/// per-sample (argmax, margin to the runner-up).
fn teacher_label_pass(
    spec: &NetworkSpec,
    genotype: &Genotype,
    teacher: &mut ParamStore<f64>,
    images: &[f64],
    n: usize,
    height: usize,
    label_batch: usize,
) -> Result<Vec<(usize, f64)>, Error> {
    let sz = spec.in_channels * height * height;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + label_batch).min(n);
        let bsz = end - start;
        let mut tape = Tape::<f64>::new();
        let mut ctx = Ctx::new(&mut tape, teacher, false);
        let x = ctx
            .tape
            .leaf(&[bsz, spec.in_channels, height, height], images[start * sz..end * sz].to_vec(), false)
            .map_err(crate::error::Error::from)?;
        let logits = genotype_forward(&mut ctx, spec, x, genotype).map_err(crate::error::Error::from)?;
        let data = ctx.tape.data(logits);
        for b in 0..bsz {
            let row = &data[b * spec.num_classes..(b + 1) * spec.num_classes];
            let top = crate::arch::argmax(row);
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != top)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            out.push((top, row[top] - runner_up));
        }
        start = end;
    }
    Ok(out)
}

/// Label `n` random input images with a frozen random teacher built from
/// `genotype` in the given search space.
///
/// Inputs are oversampled and the `n` with the widest teacher decision
/// margins kept, so the labeling is robust to small weight perturbations and
/// the task is learnable; the kept set is then relabeled under its own batch
/// partition so the teacher scores exactly 1.0 on the final dataset.
pub fn make_planted_task(
    spec: &NetworkSpec,
    genotype: &Genotype,
    seed: u64,
    n: usize,
    height: usize,
    label_batch: usize,
    noise_level: f64,
) -> Result<(PlantedTask, Dataset), Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = spec.in_channels * height * height;
    let pool_n = 4 * n;
    let pool: Vec<f64> = (0..pool_n * sz).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut teacher = ParamStore::<f64>::new(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let scored = teacher_label_pass(spec, genotype, &mut teacher, &pool, pool_n, height, label_batch)?;
    let mut by_margin: Vec<usize> = (0..pool_n).collect();
    by_margin.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    let mut keep: Vec<usize> = by_margin[..n].to_vec();
    keep.sort_unstable();
    let images: Vec<f64> = keep.iter().flat_map(|&i| pool[i * sz..(i + 1) * sz].to_vec()).collect();
    let mut labels: Vec<usize> =
        teacher_label_pass(spec, genotype, &mut teacher, &images, n, height, label_batch)?
            .into_iter()
            .map(|(l, _)| l)
            .collect();
    for l in labels.iter_mut() {
        if noise_level > 0.0 && rng.random::<f64>() < noise_level {
            *l = (rng.random::<f64>() * spec.num_classes as f64) as usize % spec.num_classes;
        }
    }
    let task = PlantedTask {
        genotype: genotype.clone(),
        teacher,
        seed,
        noise_level,
        label_batch,
    };
    let dataset = Dataset {
        images,
        labels,
        n,
        channels: spec.in_channels,
        height,
        num_classes: spec.num_classes,
        norm: vec![(0.0, 1.0); spec.in_channels],
    };
    Ok((task, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::reduced_candidates;
    use crate::ops::OpKind;

    fn fixture(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|_| (rng.random::<f64>() * 10.0) as u8 % 10).collect();
        let pixels: Vec<u8> = (0..n * 3072).map(|_| (rng.random::<f64>() * 256.0) as u8).collect();
        let path = dir.join("data_batch_1.bin");
        write_cifar_binary(&path, &labels, &pixels).unwrap();
        (path, labels, pixels)
    }

    #[test]
    fn roundtrip_is_bit_identical_pre_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (path, labels, pixels) = fixture(dir.path(), 5, 1);
        let ds = load_cifar_binary(&[path], 5, 32).unwrap();
        assert_eq!(ds.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
        // undo normalization; raw bytes must reproduce exactly
        let per = 32 * 32;
        for i in 0..5 {
            for ch in 0..3 {
                let (mean, std) = ds.norm[ch];
                for p in 0..per {
                    let v = ds.images[(i * 3 + ch) * per + p] * std + mean;
                    let byte = (v * 255.0).round() as u8;
                    assert_eq!(byte, pixels[i * 3072 + ch * per + p]);
                }
            }
        }
    }

    #[test]
    fn take_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (path, labels, _) = fixture(dir.path(), 120, 2);
        let ds = load_cifar_binary(&[path.clone()], 100, 32).unwrap();
        assert_eq!(ds.n, 100);
        // label of record r sits at byte offset 3073*r
        let bytes = std::fs::read(&path).unwrap();
        for r in [0usize, 7, 99] {
            assert_eq!(bytes[3073 * r] as usize, labels[r] as usize);
            assert_eq!(ds.labels[r], labels[r] as usize);
        }
        assert!(load_cifar_binary(&[path], 200, 32).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3073 * 2 + 5]).unwrap();
        let err = load_cifar_binary(&[path], 2, 32).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn all_zero_record_normalizes_to_minus_mean_over_std() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = vec![1u8, 2];
        let mut pixels: Vec<u8> = (0..2 * 3072).map(|_| (rng.random::<f64>() * 256.0) as u8).collect();
        for p in pixels.iter_mut().take(3072) {
            *p = 0;
        }
        let path = dir.path().join("b.bin");
        write_cifar_binary(&path, &labels, &pixels).unwrap();
        let ds = load_cifar_binary(&[path], 2, 32).unwrap();
        for ch in 0..3 {
            let (mean, std) = ds.norm[ch];
            let v = ds.images[ch * 1024];
            assert!((v - (-mean / std)).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let labels = vec![0u8];
        // channel 0: constant 100, others 0
        let mut pixels = vec![0u8; 3072];
        for p in pixels.iter_mut().take(1024) {
            *p = 100;
        }
        let path = dir.path().join("c.bin");
        write_cifar_binary(&path, &labels, &pixels).unwrap();
        let ds = load_cifar_binary(&[path], 1, 8).unwrap();
        assert_eq!(ds.height, 8);
        // constant channel stays constant; with one record std collapses to
        // the epsilon floor and values normalize to 0
        for p in 0..64 {
            assert!(ds.images[p].abs() < 1e-6);
        }
    }

    #[test]
    fn augment_shape_and_centered_crop() {
        let n = 1;
        let dim = 8;
        let img: Vec<f64> = (0..3 * dim * dim).map(|i| i as f64).collect();
        // rng driving (ox, oy, flip): force centered crop, no flip
        struct Fixed(Vec<f64>, usize);
        impl rand::RngCore for Fixed {
            fn next_u32(&mut self) -> u32 {
                self.next_u64() as u32
            }
            fn next_u64(&mut self) -> u64 {
                let v = self.0[self.1 % self.0.len()];
                self.1 += 1;
                (v * (u64::MAX as f64)) as u64
            }
            fn fill_bytes(&mut self, dest: &mut [u8]) {
                for b in dest.iter_mut() {
                    *b = 0;
                }
            }
        }
        // pad = 1 at dim 8; offsets in 0..=2; u=0.5 → offset 1 (centered), last draw ≥ 0.5 → no flip
        let mut rng = Fixed(vec![0.5, 0.5, 0.9], 0);
        let out = augment(&img, n, 3, dim, &mut rng);
        assert_eq!(out.len(), img.len());
        assert_eq!(out, img, "centered crop without flip is identity");
    }

    #[test]
    fn double_flip_is_identity() {
        let dim = 8;
        let img: Vec<f64> = (0..3 * dim * dim).map(|i| (i as f64).sin()).collect();
        let flip = |data: &[f64]| -> Vec<f64> {
            let mut out = data.to_vec();
            for ch in 0..3 {
                for y in 0..dim {
                    for x in 0..dim {
                        out[(ch * dim + y) * dim + x] = data[(ch * dim + y) * dim + (dim - 1 - x)];
                    }
                }
            }
            out
        };
        assert_eq!(flip(&flip(&img)), img);
    }

    fn planted_spec() -> NetworkSpec {
        NetworkSpec {
            num_cells: 1,
            num_intermediate: 2,
            init_channels: 4,
            in_channels: 3,
            num_classes: 4,
            candidates: reduced_candidates(),
            use_reduction: false,
        }
    }

    #[test]
    fn teacher_labels_its_own_dataset_perfectly() {
        let spec = planted_spec();
        let genotype = Genotype {
            normal: vec![OpKind::SepConv3x3, OpKind::Skip, OpKind::Zero, OpKind::Skip, OpKind::AvgPool3x3],
            reduce: vec![OpKind::Zero; 5],
        };
        let (task, ds) = make_planted_task(&spec, &genotype, 7, 64, 6, 16, 0.0).unwrap();
        // relabel with the stored teacher, same batching: must agree exactly
        let mut teacher = task.teacher.clone();
        let sz = spec.in_channels * ds.height * ds.height;
        let mut got = Vec::new();
        let mut start = 0;
        while start < ds.n {
            let end = (start + task.label_batch).min(ds.n);
            let mut tape = Tape::<f64>::new();
            let mut ctx = Ctx::new(&mut tape, &mut teacher, false);
            let x = ctx
                .tape
                .leaf(&[end - start, 3, 6, 6], ds.images[start * sz..end * sz].to_vec(), false)
                .unwrap();
            let logits = genotype_forward(&mut ctx, &spec, x, &genotype).unwrap();
            let d = ctx.tape.data(logits);
            for b in 0..end - start {
                got.push(crate::arch::argmax(&d[b * 4..(b + 1) * 4]));
            }
            start = end;
        }
        assert_eq!(got, ds.labels);
        assert!(ds.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn different_seeds_give_different_teachers() {
        let spec = planted_spec();
        let genotype = Genotype {
            normal: vec![OpKind::Skip; 5],
            reduce: vec![OpKind::Zero; 5],
        };
        let (_t1, d1) = make_planted_task(&spec, &genotype, 1, 32, 6, 16, 0.0).unwrap();
        let (_t2, d2) = make_planted_task(&spec, &genotype, 2, 32, 6, 16, 0.0).unwrap();
        assert_ne!(d1.labels, d2.labels);
        assert_ne!(d1.images, d2.images);
    }

    #[test]
    fn split_preserves_counts_and_order() {
        let spec = planted_spec();
        let genotype = Genotype {
            normal: vec![OpKind::Skip; 5],
            reduce: vec![OpKind::Zero; 5],
        };
        let (_t, ds) = make_planted_task(&spec, &genotype, 3, 50, 6, 16, 0.0).unwrap();
        let (train, val) = ds.split(0.2);
        assert_eq!(train.n, 40);
        assert_eq!(val.n, 10);
        assert_eq!(val.labels[..], ds.labels[40..]);
        assert_eq!(train.image(0), ds.image(0));
    }
}
