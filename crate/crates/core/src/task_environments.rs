//! Few-shot episode samplers.
//!
//! Feature container layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "SIMPAFEA"
//! version  u32      1
//! classes  u64
//! dim      u64
//! per class:
//!   count  u64
//!   data   count × dim f64, row-major
//! ```
//!
//! An optional sidecar `<file>.json` holds `{"classes": [names...]}`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const X_RANGE: (f64, f64) = (-5.0, 5.0);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const PHASE_RANGE: (f64, f64) = (0.0, PI);
pub const LINEAR_RANGE: (f64, f64) = (-5.0, 5.0);
pub const NOISE_SIGMA: f64 = 0.3;

const FEATURE_MAGIC: &[u8; 8] = b"SIMPAFEA";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sinusoid,
    Linear,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs `[m, d]` with matching targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Targets,
}

impl Split {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        let (rows, _) = x.dims2();
        if x.shape().len() != 2 || rows != y.len() {
            return Err(Error::InvalidArgument(format!("{} inputs for {} targets", rows, y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub kind: TaskKind,
    pub support: Split,
    pub query: Split,
    pub oracle_query: Option<Split>,
    pub n_classes: Option<usize>,
    pub spec: Option<RegressionTaskSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressionFunction {
    Sinusoid { amplitude: f64, phase: f64 },
    Linear { slope: f64, intercept: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTaskSpec {
    pub function: RegressionFunction,
    pub noise_sigma: f64,
}

impl RegressionTaskSpec {
    pub fn new(function: RegressionFunction, noise_sigma: f64) -> Result<Self> {
        let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let ok = match function {
            RegressionFunction::Sinusoid { amplitude, phase } => inside(amplitude, AMPLITUDE_RANGE) && inside(phase, PHASE_RANGE),
            RegressionFunction::Linear { slope, intercept } => inside(slope, LINEAR_RANGE) && inside(intercept, LINEAR_RANGE),
        };
        if !ok || !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("regression task {function:?} with noise {noise_sigma} out of range")));
        }
        Ok(Self { function, noise_sigma })
    }

    pub fn sample(rng: &mut impl Rng, noise_sigma: f64) -> Self {
        Self::sample_from(TaskMix::Mixed, rng, noise_sigma)
    }

    pub fn sample_from(mix: TaskMix, rng: &mut impl Rng, noise_sigma: f64) -> Self {
        let sinusoid = match mix {
            TaskMix::Mixed => rng.random_bool(0.5),
            TaskMix::Sinusoid => true,
            TaskMix::Linear => false,
        };
        let function = if sinusoid {
            RegressionFunction::Sinusoid {
                amplitude: rng.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
                phase: rng.random_range(PHASE_RANGE.0..=PHASE_RANGE.1),
            }
        } else {
            RegressionFunction::Linear {
                slope: rng.random_range(LINEAR_RANGE.0..=LINEAR_RANGE.1),
                intercept: rng.random_range(LINEAR_RANGE.0..=LINEAR_RANGE.1),
            }
        };
        Self { function, noise_sigma }
    }

    pub fn kind(&self) -> TaskKind {
        match self.function {
            RegressionFunction::Sinusoid { .. } => TaskKind::Sinusoid,
            RegressionFunction::Linear { .. } => TaskKind::Linear,
        }
    }

    /// Noise-free target.
    pub fn mean(&self, x: f64) -> f64 {
        match self.function {
            RegressionFunction::Sinusoid { amplitude, phase } => amplitude * (x + phase).sin(),
            RegressionFunction::Linear { slope, intercept } => slope * x + intercept,
        }
    }

    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Split {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(X_RANGE.0..=X_RANGE.1)).collect();
        let ys = xs
            .iter()
            .map(|&x| {
                let eps: f64 = StandardNormal.sample(rng);
                self.mean(x) + self.noise_sigma * eps
            })
            .collect();
        Split { x: Tensor::matrix(n, 1, xs).expect("n × 1"), y: Targets::Values(ys) }
    }
}

/// Which regression families an environment draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    /// Sinusoid or linear with probability ½ each.
    #[default]
    Mixed,
    Sinusoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionEnv {
    pub m_t: usize,
    pub m_v: usize,
    pub noise_sigma: f64,
    pub mix: TaskMix,
    /// Size of the hidden query set attached to each episode, if any.
    pub oracle_points: Option<usize>,
}

impl Default for RegressionEnv {
    fn default() -> Self {
        Self { m_t: 5, m_v: 15, noise_sigma: NOISE_SIGMA, mix: TaskMix::Mixed, oracle_points: None }
    }
}

impl RegressionEnv {
    pub fn sample_task(&self, rng: &mut impl Rng) -> TaskBatch {
        let spec = RegressionTaskSpec::sample_from(self.mix, rng, self.noise_sigma);
        self.sample_task_with(spec, rng)
    }

    pub fn sample_task_with(&self, spec: RegressionTaskSpec, rng: &mut impl Rng) -> TaskBatch {
        let support = spec.draw(self.m_t, rng);
        let query = spec.draw(self.m_v, rng);
        let oracle_query = self.oracle_points.map(|n| spec.draw(n, rng));
        TaskBatch { kind: spec.kind(), support, query, oracle_query, n_classes: None, spec: Some(spec) }
    }
}

/// `sample_regression_task` with the usual 5-shot, 15-query episode.
pub fn sample_regression_task(rng: &mut impl Rng, m_t: usize, m_v: usize, oracle_points: Option<usize>) -> TaskBatch {
    RegressionEnv { m_t, m_v, noise_sigma: NOISE_SIGMA, mix: TaskMix::Mixed, oracle_points }.sample_task(rng)
}

/// Gaussian-blob classification episodes: per task, `N` centers drawn from
/// `N(0, center_scale² I)` (redrawn until pairwise separated by at least
/// `min_center_distance`), unit-covariance points around each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEnv {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_v_per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub min_center_distance: f64,
    pub point_std: f64,
}

impl Default for BlobEnv {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 1, m_v_per_class: 15, dim: 16, center_scale: 4.0, min_center_distance: 0.0, point_std: 1.0 }
    }
}

impl BlobEnv {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidArgument(format!("{}-way episodes need at least 2 classes", self.n_way)));
        }
        if self.k_shot < 1 || self.m_v_per_class < 1 || self.dim < 1 {
            return Err(Error::InvalidArgument("k_shot, m_v_per_class and dim must be positive".into()));
        }
        if !(self.center_scale >= 0.0 && self.point_std >= 0.0 && self.min_center_distance >= 0.0) {
            return Err(Error::InvalidArgument("blob scales must be non-negative".into()));
        }
        Ok(())
    }

    fn centers(&self, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        for _ in 0..10_000 {
            let c: Vec<Vec<f64>> = (0..self.n_way)
                .map(|_| (0..self.dim).map(|_| self.center_scale * std_normal(rng)).collect::<Vec<f64>>())
                .collect();
            let separated = (0..self.n_way).all(|a| {
                (a + 1..self.n_way).all(|b| euclidean(&c[a], &c[b]) >= self.min_center_distance)
            });
            if separated {
                return Ok(c);
            }
        }
        Err(Error::InvalidArgument(format!("could not place {} centers {} apart", self.n_way, self.min_center_distance)))
    }

    pub fn sample_task(&self, rng: &mut impl Rng) -> Result<TaskBatch> {
        self.validate()?;
        let centers = self.centers(rng)?;
        self.sample_task_with_centers(&centers, rng)
    }

    pub fn sample_task_with_centers(&self, centers: &[Vec<f64>], rng: &mut impl Rng) -> Result<TaskBatch> {
        self.validate()?;
        if centers.len() != self.n_way || centers.iter().any(|c| c.len() != self.dim) {
            return Err(Error::InvalidArgument("center count or width does not match the environment".into()));
        }
        let mut labels: Vec<usize> = (0..self.n_way).collect();
        labels.shuffle(rng);
        let draw = |per_class: usize, rng: &mut dyn rand::RngCore| -> Split {
            let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(per_class * self.n_way);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..per_class {
                    let p = center.iter().map(|&m| m + self.point_std * std_normal(rng)).collect::<Vec<f64>>();
                    rows.push((p, labels[c]));
                }
            }
            rows.shuffle(rng);
            let n = rows.len();
            let x = rows.iter().flat_map(|(p, _)| p.iter().copied()).collect();
            Split { x: Tensor::matrix(n, self.dim, x).expect("n × dim"), y: Targets::Classes(rows.into_iter().map(|(_, l)| l).collect()) }
        };
        let support = draw(self.k_shot, rng);
        let query = draw(self.m_v_per_class, rng);
        Ok(TaskBatch { kind: TaskKind::Classification, support, query, oracle_query: None, n_classes: Some(self.n_way), spec: None })
    }
}

pub fn sample_blob_classification_task(rng: &mut impl Rng, n_way: usize, k_shot: usize, m_v_per_class: usize, dim: usize) -> Result<TaskBatch> {
    BlobEnv { n_way, k_shot, m_v_per_class, dim, ..BlobEnv::default() }.sample_task(rng)
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    classes: Vec<String>,
}

/// Class-indexed feature vectors loaded from a feature container.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub names: Vec<String>,
    pub classes: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn count(&self, class: usize) -> usize {
        self.classes[class].len() / self.dim
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `classes` (each `count × dim`, row-major) atomically.
pub fn write_feature_file(path: &Path, dim: usize, classes: &[Vec<f64>], names: Option<&[String]>) -> Result<()> {
    if dim == 0 || classes.iter().any(|c| c.len() % dim != 0) {
        return Err(Error::FeatureFile("class blocks must be whole multiples of dim".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(classes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dim as u64).to_le_bytes());
    for c in classes {
        buf.extend_from_slice(&((c.len() / dim) as u64).to_le_bytes());
        for v in c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    if let Some(names) = names {
        let json = serde_json::to_vec_pretty(&Sidecar { classes: names.to_vec() })?;
        write_atomic(&sidecar_path(path), &json)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::FeatureFile(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != FEATURE_MAGIC {
        return Err(Error::FeatureFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::FeatureFile(format!("unsupported version {version}")));
    }
    let n_classes = r.u64("class count")? as usize;
    let dim = r.u64("dim")? as usize;
    if n_classes == 0 || dim == 0 {
        return Err(Error::FeatureFile("class count and dim must be positive".into()));
    }
    let mut classes = Vec::with_capacity(n_classes.min(1 << 16));
    for c in 0..n_classes {
        let count = r.u64("class size")? as usize;
        let len = count.checked_mul(dim).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::FeatureFile(format!("class {c} too large")))?;
        let block = r.take(len, "class block")?;
        let data: Vec<f64> = block.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::FeatureFile(format!("class {c} holds non-finite features")));
        }
        classes.push(data);
    }
    if r.pos != bytes.len() {
        return Err(Error::FeatureFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let side = sidecar_path(path);
    let names = if side.exists() {
        let s: Sidecar = serde_json::from_slice(&fs::read(&side)?)?;
        if s.classes.len() != n_classes {
            return Err(Error::FeatureFile(format!("sidecar names {} classes, file holds {n_classes}", s.classes.len())));
        }
        s.classes
    } else {
        (0..n_classes).map(|c| format!("class_{c}")).collect()
    };
    Ok(FeatureSet { dim, names, classes })
}

/// N-way k-shot episodes drawn from a [`FeatureSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEpisodes {
    pub set: FeatureSet,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_v_per_class: usize,
}

impl FeatureEpisodes {
    pub fn new(set: FeatureSet, n_way: usize, k_shot: usize, m_v_per_class: usize) -> Result<Self> {
        if n_way < 2 || k_shot < 1 || m_v_per_class < 1 {
            return Err(Error::InvalidArgument(format!("invalid {n_way}-way {k_shot}-shot episode shape")));
        }
        if set.classes.len() < n_way {
            return Err(Error::FeatureFile(format!("{} classes for {n_way}-way episodes", set.classes.len())));
        }
        let need = k_shot + m_v_per_class;
        for c in 0..set.classes.len() {
            if set.count(c) < need {
                return Err(Error::FeatureFile(format!("class `{}` has {} examples, needs {need}", set.names[c], set.count(c))));
            }
        }
        Ok(Self { set, n_way, k_shot, m_v_per_class })
    }

    pub fn load(path: &Path, n_way: usize, k_shot: usize, m_v_per_class: usize) -> Result<Self> {
        Self::new(read_feature_file(path)?, n_way, k_shot, m_v_per_class)
    }

    /// Returns the episode and, per split, the `(class, row)` indices drawn.
    pub fn sample_indexed(&self, rng: &mut impl Rng) -> (TaskBatch, Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let dim = self.set.dim;
        let chosen = index::sample(rng, self.set.classes.len(), self.n_way).into_vec();
        let mut sup = Vec::new();
        let mut qry = Vec::new();
        for (label, &c) in chosen.iter().enumerate() {
            let rows = index::sample(rng, self.set.count(c), self.k_shot + self.m_v_per_class).into_vec();
            sup.extend(rows[..self.k_shot].iter().map(|&r| (c, r, label)));
            qry.extend(rows[self.k_shot..].iter().map(|&r| (c, r, label)));
        }
        sup.shuffle(rng);
        qry.shuffle(rng);
        let build = |items: &[(usize, usize, usize)]| {
            let x = items.iter().flat_map(|&(c, r, _)| self.set.classes[c][r * dim..(r + 1) * dim].iter().copied()).collect();
            Split { x: Tensor::matrix(items.len(), dim, x).expect("n × dim"), y: Targets::Classes(items.iter().map(|t| t.2).collect()) }
        };
        let task = TaskBatch {
            kind: TaskKind::Classification,
            support: build(&sup),
            query: build(&qry),
            oracle_query: None,
            n_classes: Some(self.n_way),
            spec: None,
        };
        let strip = |v: Vec<(usize, usize, usize)>| v.into_iter().map(|(c, r, _)| (c, r)).collect();
        (task, strip(sup), strip(qry))
    }

    pub fn sample_task(&self, rng: &mut impl Rng) -> TaskBatch {
        self.sample_indexed(rng).0
    }
}

pub fn load_feature_episodes(path: &Path, n_way: usize, k_shot: usize, m_v_per_class: usize) -> Result<FeatureEpisodes> {
    FeatureEpisodes::load(path, n_way, k_shot, m_v_per_class)
}

/// Any of the episode sources, as selected by configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Regression(RegressionEnv),
    Blobs(BlobEnv),
    Features(FeatureEpisodes),
}

impl Environment {
    pub fn sample_task(&self, rng: &mut impl Rng) -> Result<TaskBatch> {
        match self {
            Environment::Regression(e) => Ok(e.sample_task(rng)),
            Environment::Blobs(e) => e.sample_task(rng),
            Environment::Features(e) => Ok(e.sample_task(rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Environment::Regression(_) => 1,
            Environment::Blobs(e) => e.dim,
            Environment::Features(e) => e.set.dim,
        }
    }

    /// Width of the base network's output layer.
    pub fn output_dim(&self) -> usize {
        match self {
            Environment::Regression(_) => 1,
            Environment::Blobs(e) => e.n_way,
            Environment::Features(e) => e.n_way,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, Environment::Regression(_))
    }

    pub fn query_size(&self) -> usize {
        match self {
            Environment::Regression(e) => e.m_v,
            Environment::Blobs(e) => e.m_v_per_class * e.n_way,
            Environment::Features(e) => e.m_v_per_class * e.n_way,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn noiseless_linear_is_identity() {
        let spec = RegressionTaskSpec::new(RegressionFunction::Linear { slope: 1.0, intercept: 0.0 }, 0.0).unwrap();
        let s = spec.draw(50, &mut rng(1));
        let Targets::Values(y) = &s.y else { panic!() };
        assert_eq!(s.x.data(), &y[..]);
    }

    #[test]
    fn sinusoid_peak() {
        let spec = RegressionTaskSpec::new(RegressionFunction::Sinusoid { amplitude: 1.0, phase: 0.0 }, 0.0).unwrap();
        assert!((spec.mean(PI / 2.0) - 1.0).abs() < 1e-15);
        assert!(RegressionTaskSpec::new(RegressionFunction::Sinusoid { amplitude: 6.0, phase: 0.0 }, 0.0).is_err());
    }

    #[test]
    fn episode_shapes_and_oracle() {
        let t = sample_regression_task(&mut rng(2), 5, 15, Some(10_000));
        assert_eq!(t.support.len(), 5);
        assert_eq!(t.query.len(), 15);
        assert_eq!(t.oracle_query.as_ref().unwrap().len(), 10_000);
        assert!(t.support.x.data().iter().all(|x| (-5.0..=5.0).contains(x)));
    }

    #[test]
    fn kind_frequency_and_ranges() {
        let mut r = rng(3);
        let mut sin = 0;
        for _ in 0..10_000 {
            let s = RegressionTaskSpec::sample(&mut r, NOISE_SIGMA);
            match s.function {
                RegressionFunction::Sinusoid { amplitude, phase } => {
                    sin += 1;
                    assert!((0.1..=5.0).contains(&amplitude) && (0.0..=PI).contains(&phase));
                }
                RegressionFunction::Linear { slope, intercept } => {
                    assert!((-5.0..=5.0).contains(&slope) && (-5.0..=5.0).contains(&intercept));
                }
            }
        }
        assert!((sin as f64 / 1e4 - 0.5).abs() < 0.015);
    }

    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn parameter_marginals_are_uniform() {
        let mut r = rng(4);
        let (mut amp, mut ph, mut sl, mut ic) = (vec![], vec![], vec![], vec![]);
        while amp.len() < 10_000 || sl.len() < 10_000 {
            match RegressionTaskSpec::sample(&mut r, NOISE_SIGMA).function {
                RegressionFunction::Sinusoid { amplitude, phase } if amp.len() < 10_000 => {
                    amp.push(amplitude);
                    ph.push(phase);
                }
                RegressionFunction::Linear { slope, intercept } if sl.len() < 10_000 => {
                    sl.push(slope);
                    ic.push(intercept);
                }
                _ => {}
            }
        }
        let crit = 1.628 / 100.0;
        assert!(ks_uniform(amp, 0.1, 5.0) < crit);
        assert!(ks_uniform(ph, 0.0, PI) < crit);
        assert!(ks_uniform(sl, -5.0, 5.0) < crit);
        assert!(ks_uniform(ic, -5.0, 5.0) < crit);
    }

    fn nearest_centroid_accuracy(t: &TaskBatch) -> f64 {
        let n = t.n_classes.unwrap();
        let d = t.support.dim();
        let Targets::Classes(sl) = &t.support.y else { panic!() };
        let Targets::Classes(ql) = &t.query.y else { panic!() };
        let mut cent = vec![vec![0.0; d]; n];
        let mut cnt = vec![0.0; n];
        for (i, &l) in sl.iter().enumerate() {
            for (c, v) in cent[l].iter_mut().zip(t.support.row(i)) {
                *c += v;
            }
            cnt[l] += 1.0;
        }
        for (c, k) in cent.iter_mut().zip(&cnt) {
            c.iter_mut().for_each(|v| *v /= k);
        }
        let correct = ql
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let best = (0..n).min_by(|&a, &b| euclidean(&cent[a], t.query.row(i)).total_cmp(&euclidean(&cent[b], t.query.row(i)))).unwrap();
                best == l
            })
            .count();
        correct as f64 / ql.len() as f64
    }

    #[test]
    fn separated_blobs_are_trivially_classified() {
        let env = BlobEnv { n_way: 2, k_shot: 1, m_v_per_class: 15, dim: 3, center_scale: 1.0, min_center_distance: 0.0, point_std: 1.0 };
        let centers = vec![vec![0.0; 3], vec![100.0, 0.0, 0.0]];
        let t = env.sample_task_with_centers(&centers, &mut rng(5)).unwrap();
        assert_eq!(nearest_centroid_accuracy(&t), 1.0);
    }

    #[test]
    fn identical_blobs_are_chance() {
        let env = BlobEnv { n_way: 5, k_shot: 1, m_v_per_class: 15, dim: 2, center_scale: 0.0, min_center_distance: 0.0, point_std: 1.0 };
        let mut r = rng(6);
        let acc: f64 = (0..400).map(|_| nearest_centroid_accuracy(&env.sample_task(&mut r).unwrap())).sum::<f64>() / 400.0;
        assert!((acc - 0.2).abs() < 0.02, "{acc}");
    }

    #[test]
    fn blob_counts_and_validation() {
        let t = sample_blob_classification_task(&mut rng(7), 5, 1, 15, 4).unwrap();
        assert_eq!(t.support.len(), 5);
        assert_eq!(t.query.len(), 75);
        let Targets::Classes(l) = &t.support.y else { panic!() };
        assert_eq!(l.iter().copied().collect::<HashSet<_>>().len(), 5);
        assert!(sample_blob_classification_task(&mut rng(7), 1, 1, 15, 4).is_err());
        assert!(sample_blob_classification_task(&mut rng(7), 5, 0, 15, 4).is_err());
    }

    #[test]
    fn min_center_distance_is_respected() {
        let env = BlobEnv { n_way: 5, dim: 8, center_scale: 5.0, min_center_distance: 8.0, ..BlobEnv::default() };
        let mut r = rng(8);
        for _ in 0..20 {
            let c = env.centers(&mut r).unwrap();
            for a in 0..5 {
                for b in a + 1..5 {
                    assert!(euclidean(&c[a], &c[b]) >= 8.0);
                }
            }
        }
    }

    fn toy_file(dir: &Path) -> PathBuf {
        let mut r = rng(9);
        let classes: Vec<Vec<f64>> = (0..2).map(|c| (0..80).map(|_| c as f64 * 10.0 + r.random::<f64>()).collect()).collect();
        let path = dir.join("toy.feat");
        write_feature_file(&path, 4, &classes, Some(&["cat".into(), "dog".into()])).unwrap();
        path
    }

    #[test]
    fn feature_file_round_trip_and_episode() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_file(dir.path());
        let src = load_feature_episodes(&path, 2, 1, 15).unwrap();
        assert_eq!(src.set.names, vec!["cat", "dog"]);
        assert_eq!(src.set.count(0), 20);
        let t = src.sample_task(&mut rng(10));
        assert_eq!(t.support.dim(), 4);
        assert_eq!(t.support.len(), 2);
        assert_eq!(t.query.len(), 30);
    }

    #[test]
    fn feature_sampling_reproducible_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = toy_file(dir.path());
        let a = load_feature_episodes(&path, 2, 3, 15).unwrap();
        let b = load_feature_episodes(&path, 2, 3, 15).unwrap();
        assert_eq!(a.sample_task(&mut rng(11)), b.sample_task(&mut rng(11)));
        let mut r = rng(12);
        for _ in 0..50 {
            let (_, sup, qry) = a.sample_indexed(&mut r);
            let s: HashSet<_> = sup.into_iter().collect();
            assert!(qry.iter().all(|q| !s.contains(q)));
        }
    }

    #[test]
    fn malformed_feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.feat");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(read_feature_file(&empty), Err(Error::FeatureFile(_))));
        let path = toy_file(dir.path());
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feature_file(&path), Err(Error::FeatureFile(_))));
        let path = toy_file(dir.path());
        assert!(matches!(load_feature_episodes(&path, 2, 10, 15), Err(Error::FeatureFile(_))));
    }
}
