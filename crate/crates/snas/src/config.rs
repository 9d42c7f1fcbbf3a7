//! Flat-key run configuration: one `key = value` per line, `#` comments,
//! environment overrides with the `SNAS_` prefix, then CLI overrides.
//! Unknown keys are rejected so typos fail fast.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baselines::SearchMode;
use crate::cell::{Genotype, NetworkSpec};
use crate::data::{load_cifar_binary, make_planted_task, Dataset};
use crate::error::Error;
use crate::ops::{full_candidates, reduced_candidates, topology_candidates, OpKind};
use crate::resource::{CostPreset, ResourceConfig};
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "SNAS_";

fn defaults() -> BTreeMap<String, String> {
    let pairs: &[(&str, &str)] = &[
        ("mode", "snas"),
        ("seed", "0"),
        ("epochs", "50"),
        ("batch_size", "64"),
        ("theta_lr", "0.025"),
        ("theta_momentum", "0.9"),
        ("theta_wd", "0.0003"),
        ("clip_norm", "5"),
        ("alpha_lr", "0.0003"),
        ("alpha_beta1", "0.5"),
        ("alpha_beta2", "0.999"),
        ("alpha_wd", "0.001"),
        ("lambda0", "1.0"),
        ("lambda_min", "0.03"),
        ("cost_preset", "none"),
        ("eta", ""),
        ("cost_w_params", "1"),
        ("cost_w_flops", "1"),
        ("cost_w_mac", "1"),
        ("cost_mc_samples", "256"),
        ("holdout_frac", "0.2"),
        ("augment", "false"),
        ("reinforce_alpha_lr", "0.1"),
        ("reinforce_baseline_momentum", "0.9"),
        ("num_cells", "2"),
        ("num_intermediate", "2"),
        ("init_channels", "8"),
        ("num_classes", "4"),
        ("use_reduction", "false"),
        ("op_set", "reduced"),
        ("data", "planted"),
        ("data_dir", ""),
        ("take", "512"),
        ("resize", "16"),
        ("planted_seed", "7"),
        ("planted_n", "256"),
        ("planted_height", "8"),
        ("planted_ops", ""),
        ("planted_noise", "0.0"),
        ("label_batch", "0"),
        ("out_dir", ""),
    ];
    pairs.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect()
}

fn parse_line(line: &str) -> Result<Option<(String, String)>, Error> {
    let stripped = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let stripped = stripped.trim();
    if stripped.is_empty() {
        return Ok(None);
    }
    let (k, v) = stripped
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{stripped}`")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Planted {
        seed: u64,
        n: usize,
        height: usize,
        ops: String,
        noise: f64,
        label_batch: usize,
    },
    Cifar {
        dir: PathBuf,
        take: usize,
        resize: usize,
    },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: SearchMode,
    pub train: TrainConfig,
    pub num_cells: usize,
    pub num_intermediate: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub use_reduction: bool,
    pub op_set: String,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
    /// Fully resolved key table, echoed into the run's config snapshot.
    pub resolved: BTreeMap<String, String>,
}

impl RunConfig {
    /// Resolution order: defaults, config file, `SNAS_*` environment
    /// variables, explicit CLI overrides. Unknown keys fail at every layer.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Error> {
        let mut map = defaults();
        let known: Vec<String> = map.keys().cloned().collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for line in text.lines() {
                if let Some((k, v)) = parse_line(line)? {
                    if !map.contains_key(&k) {
                        return Err(Error::Config(format!("unknown config key `{k}`")));
                    }
                    map.insert(k, v);
                }
            }
        }
        for k in &known {
            let var = format!("{ENV_PREFIX}{}", k.to_uppercase());
            if let Ok(v) = std::env::var(&var) {
                map.insert(k.clone(), v);
            }
        }
        for (k, v) in overrides {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self, Error> {
        let get = |k: &str| map.get(k).cloned().unwrap_or_default();
        let num = |k: &str| -> Result<f64, Error> {
            get(k)
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("key `{k}`: `{}` is not a number", get(k))))
        };
        let int = |k: &str| -> Result<usize, Error> {
            get(k)
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("key `{k}`: `{}` is not an integer", get(k))))
        };
        let boolean = |k: &str| -> Result<bool, Error> {
            match get(k).as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::Config(format!("key `{k}`: `{other}` is not true/false"))),
            }
        };

        let mode = SearchMode::parse(&get("mode"))
            .ok_or_else(|| Error::Config(format!("unknown mode `{}`", get("mode"))))?;
        let preset = CostPreset::parse(&get("cost_preset"))
            .ok_or_else(|| Error::Config(format!("unknown cost_preset `{}`", get("cost_preset"))))?;
        let eta = if get("eta").is_empty() { preset.eta() } else { num("eta")? };
        let resource = ResourceConfig {
            eta,
            w_params: num("cost_w_params")?,
            w_flops: num("cost_w_flops")?,
            w_mac: num("cost_w_mac")?,
        };
        resource.validate()?;
        let batch_size = int("batch_size")?;
        let train = TrainConfig {
            epochs: int("epochs")?,
            batch_size,
            theta_lr: num("theta_lr")?,
            theta_momentum: num("theta_momentum")?,
            theta_wd: num("theta_wd")?,
            clip_norm: num("clip_norm")?,
            alpha_lr: num("alpha_lr")?,
            alpha_beta1: num("alpha_beta1")?,
            alpha_beta2: num("alpha_beta2")?,
            alpha_wd: num("alpha_wd")?,
            lambda0: num("lambda0")?,
            lambda_min: num("lambda_min")?,
            resource,
            cost_mc_samples: int("cost_mc_samples")?,
            holdout_frac: num("holdout_frac")?,
            augment: boolean("augment")?,
            seed: int("seed")? as u64,
            reinforce_alpha_lr: num("reinforce_alpha_lr")?,
            reinforce_baseline_momentum: num("reinforce_baseline_momentum")?,
        };
        let op_set = get("op_set");
        match op_set.as_str() {
            "full" | "reduced" | "topology" => {}
            other => return Err(Error::Config(format!("unknown op_set `{other}`"))),
        }
        let data = match get("data").as_str() {
            "planted" => DataSource::Planted {
                seed: int("planted_seed")? as u64,
                n: int("planted_n")?,
                height: int("planted_height")?,
                ops: get("planted_ops"),
                noise: num("planted_noise")?,
                label_batch: match int("label_batch")? {
                    0 => batch_size,
                    b => b,
                },
            },
            "cifar" => {
                if get("data_dir").is_empty() {
                    return Err(Error::Config("data = cifar requires data_dir".into()));
                }
                DataSource::Cifar {
                    dir: PathBuf::from(get("data_dir")),
                    take: int("take")?,
                    resize: int("resize")?,
                }
            }
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
        let out_dir = match get("out_dir").as_str() {
            "" => None,
            d => Some(PathBuf::from(d)),
        };
        let num_classes = int("num_classes")?;
        if matches!(data, DataSource::Cifar { .. }) && num_classes != 10 {
            return Err(Error::Config(format!("data = cifar requires num_classes = 10, got {num_classes}")));
        }
        Ok(RunConfig {
            mode,
            train,
            num_cells: int("num_cells")?,
            num_intermediate: int("num_intermediate")?,
            init_channels: int("init_channels")?,
            num_classes,
            use_reduction: boolean("use_reduction")?,
            op_set,
            data,
            out_dir,
            resolved: map,
        })
    }

    pub fn candidates(&self) -> Vec<OpKind> {
        match self.op_set.as_str() {
            "full" => full_candidates(),
            "topology" => topology_candidates(),
            _ => reduced_candidates(),
        }
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            num_cells: self.num_cells,
            num_intermediate: self.num_intermediate,
            init_channels: self.init_channels,
            in_channels: 3,
            num_classes: self.num_classes,
            candidates: self.candidates(),
            use_reduction: self.use_reduction,
        }
    }

    /// Default planted architecture when `planted_ops` is empty: skip on every
    /// normal edge, zero on every reduce edge.
    pub fn planted_genotype(&self) -> Result<Option<Genotype>, Error> {
        let DataSource::Planted { ops, .. } = &self.data else {
            return Ok(None);
        };
        let spec = self.spec();
        let graph = spec.graph();
        let normal: Vec<OpKind> = if ops.is_empty() {
            vec![OpKind::Skip; graph.num_edges()]
        } else {
            ops.split(',')
                .map(|name| {
                    OpKind::parse(name.trim())
                        .ok_or_else(|| Error::Config(format!("unknown op `{}` in planted_ops", name.trim())))
                })
                .collect::<Result<_, _>>()?
        };
        if normal.len() != graph.num_edges() {
            return Err(Error::Config(format!(
                "planted_ops has {} ops, cell has {} edges",
                normal.len(),
                graph.num_edges()
            )));
        }
        for op in &normal {
            if !graph.candidates.contains(op) {
                return Err(Error::Config(format!("planted op {} not in op_set {}", op.name(), self.op_set)));
            }
        }
        Ok(Some(Genotype {
            normal,
            reduce: vec![OpKind::Zero; graph.num_edges()],
        }))
    }

    pub fn load_dataset(&self) -> Result<Dataset, Error> {
        match &self.data {
            DataSource::Planted {
                seed,
                n,
                height,
                noise,
                label_batch,
                ..
            } => {
                let genotype = self.planted_genotype()?.expect("planted source");
                let (_task, ds) =
                    make_planted_task(&self.spec(), &genotype, *seed, *n, *height, *label_batch, *noise)?;
                Ok(ds)
            }
            DataSource::Cifar { dir, take, resize } => {
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::data(dir, format!("cannot list data_dir: {e}")))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(Error::data(dir, "no .bin files in data_dir"));
                }
                load_cifar_binary(&paths, *take, *resize)
            }
        }
    }

    /// Echo of the fully resolved configuration, written into the run dir.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
