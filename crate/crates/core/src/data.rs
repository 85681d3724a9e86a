//! Task families and N-way n-shot episode sampling.
//!
//! A [`TaskFamily`] is either a generator (fresh samples drawn per episode)
//! or a finite dataset loaded from an `FSDT` file. Classes are partitioned
//! into disjoint train/val/test ranges.
//!
//! Every random draw is keyed by `(global_seed, index)` through a ChaCha
//! stream, so episodes can be sampled in any order or in parallel and still
//! come out identical.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::codec::{FormatError, Reader, Writer};

const DATASET_MAGIC: &[u8; 4] = b"FSDT";
const DATASET_VERSION: u8 = 1;

/// Default queries per episode class.
pub const DEFAULT_QUERY_PER_CLASS: usize = 15;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("split sizes {split:?} do not sum to the class count {classes}")]
    InconsistentSplit { split: [usize; 3], classes: usize },
    #[error("invalid family spec: {0}")]
    InvalidSpec(String),
    #[error("split has {have} classes, episode needs {need}")]
    InsufficientClasses { need: usize, have: usize },
    #[error("class {class} has {have} examples, episode needs {need}")]
    InsufficientExamples {
        class: usize,
        need: usize,
        have: usize,
    },
    #[error("dataset format: {0}")]
    Format(#[from] FormatError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Counter-based generator for stream `index` of `global_seed`.
pub fn stream_rng(global_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(index);
    rng
}

/// Derives an independent seed for a named purpose (training batches,
/// validation, test, ...).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // splitmix64 over the tag bytes
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = h.wrapping_add(b as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    GaussianMixture,
    RingMixture,
}

/// Generator configuration.
///
/// Inputs of dimension `input_dim` are split into `cell_signal.len()` (or
/// `cell_noise.len()`) contiguous cells; the per-cell multipliers scale the
/// class-mean spread and the within-class spread respectively. Empty lists
/// mean uniform cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: GeneratorKind,
    pub classes: usize,
    pub input_dim: usize,
    /// Class counts for train / val / test.
    pub split: [usize; 3],
    /// Standard deviation of the isotropic prior on class means.
    #[serde(default = "one")]
    pub mean_std: f64,
    /// Within-class standard deviation.
    #[serde(default = "one")]
    pub within_std: f64,
    #[serde(default)]
    pub cell_signal: Vec<f64>,
    #[serde(default)]
    pub cell_noise: Vec<f64>,
    /// Ring radius around the class center (ring-mixture only).
    #[serde(default = "one")]
    pub ring_radius: f64,
    /// When ≥ 1, every class draws one mean pattern of length
    /// `input_dim / tied_cells` and repeats it in each cell (scaled by
    /// `cell_signal`), so all cells carry the same class evidence.
    #[serde(default)]
    pub tied_cells: usize,
    /// Standard deviation of a class-independent offset shared by all
    /// class means.
    #[serde(default)]
    pub offset_std: f64,
    /// When ≥ 1, class `c` belongs to superclass `c % superclasses`; its
    /// mean is the superclass center (spread `mean_std`) plus a private
    /// offset of spread `sub_std`, so sibling classes are correlated.
    #[serde(default)]
    pub superclasses: usize,
    #[serde(default)]
    pub sub_std: f64,
}

fn one() -> f64 {
    1.0
}

impl FamilySpec {
    pub fn gaussian(classes: usize, input_dim: usize, split: [usize; 3]) -> Self {
        Self {
            kind: GeneratorKind::GaussianMixture,
            classes,
            input_dim,
            split,
            mean_std: 1.0,
            within_std: 1.0,
            cell_signal: Vec::new(),
            cell_noise: Vec::new(),
            ring_radius: 1.0,
            tied_cells: 0,
            offset_std: 0.0,
            superclasses: 0,
            sub_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Generator {
        spec: FamilySpec,
        /// `[classes, input_dim]` class centers.
        means: Vec<f64>,
        /// Per-dimension within-class std.
        noise: Vec<f64>,
        seed: u64,
    },
    Finite {
        /// `[n_examples, input_dim]`, stored at file precision.
        inputs: Vec<f32>,
        labels: Vec<u32>,
        by_class: Vec<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    classes: usize,
    input_dim: usize,
    split: [usize; 3],
    source: Source,
}

fn cell_multipliers(mult: &[f64], dim: usize) -> Result<Vec<f64>, DataError> {
    if mult.is_empty() {
        return Ok(vec![1.0; dim]);
    }
    if dim % mult.len() != 0 {
        return Err(DataError::InvalidSpec(format!(
            "{} cells do not divide input_dim {dim}",
            mult.len()
        )));
    }
    let width = dim / mult.len();
    Ok((0..dim).map(|d| mult[d / width]).collect())
}

/// Builds a generator family; the class means are fixed by `seed`.
pub fn generate_family(spec: &FamilySpec, seed: u64) -> Result<TaskFamily, DataError> {
    if spec.input_dim == 0 || spec.classes == 0 {
        return Err(DataError::InvalidSpec("classes and input_dim must be ≥ 1".into()));
    }
    if spec.split.iter().sum::<usize>() != spec.classes {
        return Err(DataError::InconsistentSplit {
            split: spec.split,
            classes: spec.classes,
        });
    }
    if spec.mean_std < 0.0 || spec.within_std < 0.0 || spec.ring_radius < 0.0 {
        return Err(DataError::InvalidSpec("spreads must be non-negative".into()));
    }
    let signal = cell_multipliers(&spec.cell_signal, spec.input_dim)?;
    let noise: Vec<f64> = cell_multipliers(&spec.cell_noise, spec.input_dim)?
        .into_iter()
        .map(|m| m * spec.within_std)
        .collect();
    if spec.tied_cells > 0 && spec.input_dim % spec.tied_cells != 0 {
        return Err(DataError::InvalidSpec(format!(
            "{} tied cells do not divide input_dim {}",
            spec.tied_cells, spec.input_dim
        )));
    }
    if spec.offset_std < 0.0 {
        return Err(DataError::InvalidSpec("offset_std must be non-negative".into()));
    }
    let mut offset_rng = stream_rng(derive_seed(seed, "shared-offset"), 0);
    let offset: Vec<f64> = (0..spec.input_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut offset_rng);
            z * spec.offset_std
        })
        .collect();
    let pattern_len = match spec.tied_cells {
        0 => spec.input_dim,
        t => spec.input_dim / t,
    };
    if spec.sub_std < 0.0 {
        return Err(DataError::InvalidSpec("sub_std must be non-negative".into()));
    }
    let draw_pattern = |tag: &str, index: usize, std: f64| -> Vec<f64> {
        let mut rng = stream_rng(derive_seed(seed, tag), index as u64);
        (0..pattern_len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect()
    };
    let centers: Vec<Vec<f64>> = (0..spec.superclasses)
        .map(|s| draw_pattern("superclass-means", s, spec.mean_std))
        .collect();
    let mut means = Vec::with_capacity(spec.classes * spec.input_dim);
    for c in 0..spec.classes {
        let pattern = match spec.superclasses {
            0 => draw_pattern("class-means", c, spec.mean_std),
            k => draw_pattern("class-means", c, spec.sub_std)
                .iter()
                .zip(&centers[c % k])
                .map(|(own, center)| own + center)
                .collect(),
        };
        for (d, s) in signal.iter().enumerate() {
            means.push(pattern[d % pattern_len] * s + offset[d]);
        }
    }
    Ok(TaskFamily {
        classes: spec.classes,
        input_dim: spec.input_dim,
        split: spec.split,
        source: Source::Generator {
            spec: spec.clone(),
            means,
            noise,
            seed,
        },
    })
}

impl TaskFamily {
    /// Finite family from explicit examples; splits are contiguous class
    /// ranges.
    pub fn from_examples(
        input_dim: usize,
        classes: usize,
        split: [usize; 3],
        inputs: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self, DataError> {
        if split.iter().sum::<usize>() != classes {
            return Err(DataError::InconsistentSplit { split, classes });
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(DataError::InvalidSpec(format!(
                "{} inputs for {} labels of dim {input_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(DataError::InvalidSpec(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            by_class[l].push(i);
        }
        Ok(Self {
            classes,
            input_dim,
            split,
            source: Source::Finite {
                inputs,
                labels,
                by_class,
            },
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        self.split
    }

    pub fn is_generator(&self) -> bool {
        matches!(self.source, Source::Generator { .. })
    }

    /// Dataset-global class ids belonging to `split`.
    pub fn split_classes(&self, split: Split) -> Range<usize> {
        let [tr, va, te] = self.split;
        match split {
            Split::Train => 0..tr,
            Split::Val => tr..tr + va,
            Split::Test => tr + va..tr + va + te,
        }
    }

    /// Draws `count` examples of `class`, writing rows into `out`.
    fn draw(
        &self,
        class: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
        out: &mut Vec<f64>,
    ) -> Result<(), DataError> {
        match &self.source {
            Source::Generator {
                spec, means, noise, ..
            } => {
                let mean = &means[class * self.input_dim..(class + 1) * self.input_dim];
                for _ in 0..count {
                    match spec.kind {
                        GeneratorKind::GaussianMixture => {
                            for (m, s) in mean.iter().zip(noise) {
                                let z: f64 = StandardNormal.sample(rng);
                                out.push(m + s * z);
                            }
                        }
                        GeneratorKind::RingMixture => {
                            let dir: Vec<f64> =
                                (0..self.input_dim).map(|_| StandardNormal.sample(rng)).collect();
                            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                            for ((m, s), u) in mean.iter().zip(noise).zip(&dir) {
                                let z: f64 = StandardNormal.sample(rng);
                                out.push(m + spec.ring_radius * u / norm + s * z);
                            }
                        }
                    }
                }
                Ok(())
            }
            Source::Finite {
                inputs, by_class, ..
            } => {
                let pool = &by_class[class];
                if pool.len() < count {
                    return Err(DataError::InsufficientExamples {
                        class,
                        need: count,
                        have: pool.len(),
                    });
                }
                for i in sample(rng, pool.len(), count).into_iter() {
                    let row = pool[i];
                    out.extend(
                        inputs[row * self.input_dim..(row + 1) * self.input_dim]
                            .iter()
                            .map(|&x| x as f64),
                    );
                }
                Ok(())
            }
        }
    }

    /// Finite copy with `per_class` examples of every class.
    pub fn materialize(&self, per_class: usize, seed: u64) -> Result<TaskFamily, DataError> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut buf = Vec::new();
        for c in 0..self.classes {
            let mut rng = stream_rng(derive_seed(seed, "materialize"), c as u64);
            buf.clear();
            self.draw(c, per_class, &mut rng, &mut buf)?;
            inputs.extend(buf.iter().map(|&x| x as f32));
            labels.extend(std::iter::repeat_n(c as u32, per_class));
        }
        TaskFamily::from_examples(self.input_dim, self.classes, self.split, inputs, labels)
    }
}

/// One N-way n-shot task. Support and query rows are class-major; labels
/// are episode-local in `0..ways`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    /// Episode-local class `c` is dataset class `classes[c]`.
    pub classes: Vec<usize>,
    pub support_x: Tensor<f64>,
    pub support_y: Vec<usize>,
    pub query_x: Tensor<f64>,
    pub query_y: Vec<usize>,
    pub seed: u64,
    pub index: u64,
}

impl Episode {
    pub fn support_len(&self) -> usize {
        self.support_y.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_y.len()
    }

    /// Relabels episode classes by `perm` (new label of old class `c` is
    /// `perm[c]`), reordering rows so they stay class-major.
    pub fn permuted(&self, perm: &[usize]) -> Episode {
        let mut inverse = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            inverse[new] = old;
        }
        let reorder = |x: &Tensor<f64>, y: &[usize], per: usize| {
            let dim = x.cols();
            let mut data = Vec::with_capacity(x.len());
            let mut labels = Vec::with_capacity(y.len());
            for (new, &old) in inverse.iter().enumerate() {
                for r in old * per..(old + 1) * per {
                    data.extend_from_slice(x.row(r));
                    labels.push(new);
                }
            }
            (Tensor::matrix(y.len(), dim, data).expect("same size"), labels)
        };
        let (support_x, support_y) = reorder(&self.support_x, &self.support_y, self.shots);
        let qpc = self.query_y.len() / self.ways.max(1);
        let (query_x, query_y) = reorder(&self.query_x, &self.query_y, qpc);
        Episode {
            classes: inverse.iter().map(|&old| self.classes[old]).collect(),
            support_x,
            support_y,
            query_x,
            query_y,
            ..self.clone()
        }
    }
}

/// Samples episode `index` of the stream keyed by `global_seed`.
pub fn sample_episode(
    family: &TaskFamily,
    split: Split,
    ways: usize,
    shots: usize,
    query_per_class: usize,
    global_seed: u64,
    index: u64,
) -> Result<Episode, DataError> {
    let pool = family.split_classes(split);
    if ways == 0 || pool.len() < ways {
        return Err(DataError::InsufficientClasses {
            need: ways.max(1),
            have: pool.len(),
        });
    }
    let mut rng = stream_rng(global_seed, index);
    let chosen: Vec<usize> = sample(&mut rng, pool.len(), ways)
        .into_iter()
        .map(|i| pool.start + i)
        .collect();

    let dim = family.input_dim;
    let mut support = Vec::with_capacity(ways * shots * dim);
    let mut query = Vec::with_capacity(ways * query_per_class * dim);
    let mut buf = Vec::with_capacity((shots + query_per_class) * dim);
    for &class in &chosen {
        buf.clear();
        family.draw(class, shots + query_per_class, &mut rng, &mut buf)?;
        support.extend_from_slice(&buf[..shots * dim]);
        query.extend_from_slice(&buf[shots * dim..]);
    }
    let support_y = (0..ways).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let query_y = (0..ways)
        .flat_map(|c| std::iter::repeat_n(c, query_per_class))
        .collect();
    Ok(Episode {
        ways,
        shots,
        classes: chosen,
        support_x: Tensor::matrix(ways * shots, dim, support).expect("sized"),
        support_y,
        query_x: Tensor::matrix(ways * query_per_class, dim, query).expect("sized"),
        query_y,
        seed: global_seed,
        index,
    })
}

/// Serializes a finite family into `FSDT` bytes.
pub fn encode_dataset(family: &TaskFamily) -> Result<Vec<u8>, DataError> {
    let Source::Finite { inputs, labels, .. } = &family.source else {
        return Err(DataError::InvalidSpec(
            "generator families must be materialized before saving".into(),
        ));
    };
    let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
    w.u32(labels.len() as u32);
    w.u32(family.input_dim as u32);
    w.u32(family.classes as u32);
    for s in family.split {
        w.u32(s as u32);
    }
    for &x in inputs {
        w.f32(x);
    }
    for &l in labels {
        w.u32(l);
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TaskFamily, DataError> {
    let mut r = Reader::open(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let split = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let expected = n
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(n * 4))
        .ok_or_else(|| FormatError::Invalid("header sizes overflow".into()))?;
    if r.remaining() < expected {
        return Err(FormatError::Truncated {
            offset: bytes.len() - 4 - r.remaining(),
            needed: expected - r.remaining(),
        }
        .into());
    }
    let inputs = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    r.expect_end()?;
    TaskFamily::from_examples(dim, classes, split, inputs, labels)
}

pub fn save_dataset(family: &TaskFamily, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_dataset(family)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TaskFamily, DataError> {
    decode_dataset(&fs::read(path)?)
}

/// Uniformly random permutation of `0..n` from `rng`.
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample(rng, n, n).into_vec()
}
