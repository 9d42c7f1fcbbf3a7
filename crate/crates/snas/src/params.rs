//! Named parameter storage and the per-step forward context.
//!
//! Parameters live outside the tape as master arrays; each training step lifts
//! the ones it touches onto a fresh tape as requires-grad leaves. Initialization
//! is seeded per name, so creation order never changes the values.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Archive, ArrayValue, NamedArray};
use crate::error::TensorError;
use crate::tensor::{Element, Tape, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2/fan_in)).
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Param<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

/// Master copies of all operation parameters, keyed by hierarchical name.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    seed: u64,
    entries: BTreeMap<String, Param<E>>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Box-Muller standard normal draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<E>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<E>)> {
        self.entries.iter_mut()
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<&Param<E>> {
        if !self.entries.contains_key(name) {
            let n: usize = shape.iter().product();
            let data: Vec<E> = match init {
                Init::Zeros => vec![E::zero(); n],
                Init::Ones => vec![E::one(); n],
                Init::HeNormal { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| E::from_f64(normal(&mut rng) * std)).collect()
                }
            };
            self.entries.insert(
                name.to_string(),
                Param {
                    shape: shape.to_vec(),
                    data,
                },
            );
        }
        let param = self.entries.get(name).unwrap();
        if param.shape != shape {
            return Err(TensorError::shape(
                "param",
                format!("{name}: stored {:?} vs requested {:?}", param.shape, shape),
            ));
        }
        Ok(param)
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut archive = Archive::new();
        for (name, p) in &self.entries {
            let value = match E::DTYPE {
                crate::tensor::Dtype::F32 => {
                    ArrayValue::F32(p.data.iter().map(|&x| Element::to_f64(x) as f32).collect())
                }
                crate::tensor::Dtype::F64 => ArrayValue::F64(p.data.iter().map(|&x| Element::to_f64(x)).collect()),
            };
            archive.insert(name.clone(), p.shape.clone(), value);
        }
        archive
    }

    pub fn load_archive(&mut self, archive: &Archive, prefix: &str) {
        for (name, arr) in &archive.entries {
            if let Some(stripped) = name.strip_prefix(prefix) {
                self.entries.insert(
                    stripped.to_string(),
                    Param {
                        shape: arr.shape.clone(),
                        data: arr.value.to_f64_vec().iter().map(|&x| E::from_f64(x)).collect(),
                    },
                );
            }
        }
    }

    pub fn from_archive(archive: &Archive, prefix: &str, seed: u64) -> Self {
        let mut store = Self::new(seed);
        store.load_archive(archive, prefix);
        store
    }
}

impl<E: Element> ParamStore<E> {
    pub fn insert_raw(&mut self, name: &str, shape: Vec<usize>, data: Vec<E>) {
        self.entries.insert(name.to_string(), Param { shape, data });
    }
}

pub fn named_array_from_param<E: Element>(p: &Param<E>) -> NamedArray {
    let value = match E::DTYPE {
        crate::tensor::Dtype::F32 => ArrayValue::F32(p.data.iter().map(|&x| Element::to_f64(x) as f32).collect()),
        crate::tensor::Dtype::F64 => ArrayValue::F64(p.data.iter().map(|&x| Element::to_f64(x)).collect()),
    };
    NamedArray {
        shape: p.shape.clone(),
        value,
    }
}

/// Per-step forward context: tape plus the parameters lifted onto it so far.
pub struct Ctx<'a, E: Element> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a mut ParamStore<E>,
    pub lifted: HashMap<String, TensorId>,
    /// When false, parameters are lifted without gradients (evaluation mode).
    pub trainable: bool,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, store: &'a mut ParamStore<E>, trainable: bool) -> Self {
        Ctx {
            tape,
            store,
            lifted: HashMap::new(),
            trainable,
        }
    }

    /// Lift a (lazily created) parameter onto the tape, once per step.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<TensorId> {
        if let Some(&id) = self.lifted.get(name) {
            return Ok(id);
        }
        let p = self.store.get_or_init(name, shape, init)?;
        let data = p.data.clone();
        let id = self.tape.leaf(shape, data, self.trainable)?;
        self.lifted.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gradients of all lifted parameters after a backward pass, by name.
    pub fn grads(&self) -> BTreeMap<String, Vec<E>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.lifted {
            if let Some(g) = self.tape.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}
