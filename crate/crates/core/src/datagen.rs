//! Synthetic multi-domain data with an invariant and a spurious block.
//!
//! Every sample is `x = (z_inv, z_sup)`:
//!
//! * `z_inv ~ N(class_means[y], σ_inv² I)`, identical across domains;
//! * `z_sup ~ N(s · dir(y′), scale² I)` where the spurious cluster `y′`
//!   equals `y` with probability `(1 + ρ) / 2` and is otherwise a uniformly
//!   chosen different class. `ρ` (the domain's spurious correlation) and
//!   `scale` vary per domain.
//!
//! Trainers never see domain ids: they consume a [`TrainingView`].

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor2;
use crate::rng::{standard_normals, stream, Purpose};

pub const DATASET_MAGIC: [u8; 4] = *b"DRMD";
pub const DATASET_VERSION: u32 = 1;

/// Shared generator parameters: everything that does not change with the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// Per-class means of the invariant block.
    pub class_means: Vec<Vec<f64>>,
    pub inv_std: f64,
    /// Per-class unit directions of the spurious block.
    pub spurious_dirs: Vec<Vec<f64>>,
    /// Distance of each spurious cluster centre from the origin.
    pub spurious_offset: f64,
}

impl GeneratorParams {
    /// Two classes in a 2 + 2 dimensional latent space.
    pub fn default_benchmark() -> Self {
        Self {
            class_means: vec![vec![-0.5, 0.0], vec![0.5, 0.0]],
            inv_std: 0.5,
            spurious_dirs: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            spurious_offset: 3.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn layout(&self) -> FeatureLayout {
        let inv = self.class_means.first().map_or(0, Vec::len);
        let sup = self.spurious_dirs.first().map_or(0, Vec::len);
        FeatureLayout {
            invariant_start: 0,
            invariant_len: inv,
            spurious_start: inv,
            spurious_len: sup,
        }
    }

    fn validate(&self) -> Result<()> {
        let c = self.class_means.len();
        if c == 0 {
            return Err(Error::arg("class_means must not be empty"));
        }
        if c < 2 {
            return Err(Error::arg("need at least 2 classes"));
        }
        let d_inv = self.class_means[0].len();
        if d_inv == 0 || self.class_means.iter().any(|m| m.len() != d_inv) {
            return Err(Error::arg("class means must share one positive dimension"));
        }
        for i in 0..c {
            for j in i + 1..c {
                if self.class_means[i] == self.class_means[j] {
                    return Err(Error::arg(format!("class means {i} and {j} coincide")));
                }
            }
        }
        if self.spurious_dirs.len() != c {
            return Err(Error::arg(format!(
                "{} spurious directions for {c} classes",
                self.spurious_dirs.len()
            )));
        }
        let d_sup = self.spurious_dirs[0].len();
        if self.spurious_dirs.iter().any(|d| d.len() != d_sup) {
            return Err(Error::arg("spurious directions must share one dimension"));
        }
        if !(self.inv_std > 0.0) || !(self.spurious_offset >= 0.0) {
            return Err(Error::arg("inv_std must be positive and spurious_offset nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    /// In `[−1, 1]`; the spurious cluster agrees with the label with probability `(1 + ρ) / 2`.
    pub spurious_correlation: f64,
    pub spurious_scale: f64,
    pub sample_count: usize,
}

impl DomainSpec {
    pub fn new(domain_id: u32, spurious_correlation: f64, spurious_scale: f64, sample_count: usize) -> Result<Self> {
        let spec = Self {
            domain_id,
            spurious_correlation,
            spurious_scale,
            sample_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.spurious_correlation.abs() <= 1.0) {
            return Err(Error::arg(format!(
                "spurious correlation {} outside [-1, 1]",
                self.spurious_correlation
            )));
        }
        if !(self.spurious_scale > 0.0 && self.spurious_scale.is_finite()) {
            return Err(Error::arg(format!("spurious scale {} must be positive", self.spurious_scale)));
        }
        Ok(())
    }
}

/// Index ranges of the two latent blocks inside `x`. Recorded for oracle
/// evaluation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub invariant_start: usize,
    pub invariant_len: usize,
    pub spurious_start: usize,
    pub spurious_len: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        (self.invariant_start + self.invariant_len).max(self.spurious_start + self.spurious_len)
    }

    pub fn invariant<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.invariant_start..self.invariant_start + self.invariant_len]
    }

    pub fn spurious<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.spurious_start..self.spurious_start + self.spurious_len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain_id: u32,
}

/// The generator state behind one domain, kept so mixtures can resample it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainOrigin {
    pub spec: DomainSpec,
    pub params: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    classes: usize,
    layout: FeatureLayout,
    samples: Vec<Sample>,
    origins: Vec<DomainOrigin>,
}

impl DomainDataset {
    pub fn new(classes: usize, layout: FeatureLayout, samples: Vec<Sample>) -> Result<Self> {
        let dim = layout.dim();
        for (i, s) in samples.iter().enumerate() {
            if s.y >= classes {
                return Err(Error::arg(format!("sample {i}: label {} ≥ {classes}", s.y)));
            }
            if s.x.len() != dim {
                return Err(Error::dim(format!("{dim} features"), format!("sample {i} with {}", s.x.len())));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} has a non-finite feature")));
            }
        }
        Ok(Self {
            classes,
            layout,
            samples,
            origins: Vec::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layout(&self) -> FeatureLayout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn origins(&self) -> &[DomainOrigin] {
        &self.origins
    }

    /// Sorted distinct domain ids present.
    pub fn domain_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.domain_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn filter_domain(&self, domain_id: u32) -> DomainDataset {
        self.subset_by(|s| s.domain_id == domain_id)
    }

    pub fn subset_by(&self, keep: impl Fn(&Sample) -> bool) -> DomainDataset {
        DomainDataset {
            classes: self.classes,
            layout: self.layout,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            origins: self.origins.clone(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            classes: self.classes,
            layout: self.layout,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            origins: self.origins.clone(),
        }
    }

    /// Concatenates datasets that share class count and layout.
    pub fn merge(parts: &[DomainDataset]) -> Result<DomainDataset> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to merge"))?;
        let mut samples = Vec::new();
        let mut origins: Vec<DomainOrigin> = Vec::new();
        for p in parts {
            if p.classes != first.classes || p.layout != first.layout {
                return Err(Error::arg("merged datasets must share classes and feature layout"));
            }
            samples.extend(p.samples.iter().cloned());
            for o in &p.origins {
                if !origins.iter().any(|e| e.spec.domain_id == o.spec.domain_id) {
                    origins.push(o.clone());
                }
            }
        }
        Ok(DomainDataset {
            classes: first.classes,
            layout: first.layout,
            samples,
            origins,
        })
    }

    /// Label-only view for training. Domain ids do not cross this boundary.
    pub fn training_view(&self) -> TrainingView {
        TrainingView {
            classes: self.classes,
            dim: self.dim(),
            xs: self.samples.iter().flat_map(|s| s.x.iter().copied()).collect(),
            labels: self.samples.iter().map(|s| s.y).collect(),
        }
    }
}

/// Features and labels without domain information.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    classes: usize,
    dim: usize,
    xs: Vec<f64>,
    labels: Vec<usize>,
}

impl TrainingView {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given rows into a feature matrix and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor2, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        let x = Tensor2::new(indices.len(), self.dim, data).expect("rows have dim entries");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn select(&self, indices: &[usize]) -> TrainingView {
        let (x, labels) = self.batch(indices);
        TrainingView {
            classes: self.classes,
            dim: self.dim,
            xs: x.into_data(),
            labels,
        }
    }
}

fn draw_sample(params: &GeneratorParams, spec: &DomainSpec, rng: &mut impl Rng) -> Sample {
    let c = params.classes();
    let y = rng.gen_range(0..c);
    let agree = rng.gen_bool(((1.0 + spec.spurious_correlation) / 2.0).clamp(0.0, 1.0));
    let y_sup = if agree {
        y
    } else {
        let other = rng.gen_range(0..c - 1);
        if other >= y {
            other + 1
        } else {
            other
        }
    };
    let inv_noise = standard_normals(rng, params.class_means[y].len());
    let sup_noise = standard_normals(rng, params.spurious_dirs[y_sup].len());
    let mut x: Vec<f64> = params.class_means[y]
        .iter()
        .zip(inv_noise)
        .map(|(m, e)| m + params.inv_std * e)
        .collect();
    x.extend(
        params.spurious_dirs[y_sup]
            .iter()
            .zip(sup_noise)
            .map(|(d, e)| params.spurious_offset * d + spec.spurious_scale * e),
    );
    Sample {
        x,
        y,
        domain_id: spec.domain_id,
    }
}

/// Draws `spec.sample_count` samples; deterministic in `(spec, params, seed)`.
pub fn generate_domain(spec: &DomainSpec, params: &GeneratorParams, seed: u64) -> Result<DomainDataset> {
    params.validate()?;
    spec.validate()?;
    let mut rng = stream(seed, Purpose::DataGen, &[spec.domain_id as u64]);
    let samples = (0..spec.sample_count).map(|_| draw_sample(params, spec, &mut rng)).collect();
    let mut ds = DomainDataset::new(params.classes(), params.layout(), samples)?;
    ds.origins.push(DomainOrigin {
        spec: spec.clone(),
        params: params.clone(),
    });
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    pub weights: Vec<f64>,
    pub dataset: DomainDataset,
    /// Index into the source list that generated each sample.
    pub components: Vec<usize>,
}

/// Draws `n` samples, each from the generator of source `i ~ π`.
pub fn generate_mixture_target(
    sources: &[DomainDataset],
    weights: &[f64],
    n: usize,
    seed: u64,
) -> Result<MixtureTarget> {
    if sources.is_empty() || sources.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} sources but {} mixture weights",
            sources.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg("mixture weights must be nonnegative and sum to 1"));
    }
    let mut origins = Vec::with_capacity(sources.len());
    for (i, s) in sources.iter().enumerate() {
        if s.classes != sources[0].classes || s.layout != sources[0].layout {
            return Err(Error::arg(format!("source {i} is incompatible with source 0")));
        }
        match s.origins.as_slice() {
            [one] => origins.push(one),
            _ => {
                return Err(Error::arg(format!(
                    "source {i} must carry exactly one generator origin"
                )))
            }
        }
    }
    let dist = rand::distributions::WeightedIndex::new(weights)
        .map_err(|e| Error::arg(format!("mixture weights: {e}")))?;
    let mut rng = stream(seed, Purpose::Mixture, &[]);
    let mut samples = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.sample(&dist);
        samples.push(draw_sample(&origins[i].params, &origins[i].spec, &mut rng));
        components.push(i);
    }
    let mut dataset = DomainDataset::new(sources[0].classes, sources[0].layout, samples)?;
    dataset.origins = origins.into_iter().cloned().collect();
    Ok(MixtureTarget {
        weights: weights.to_vec(),
        dataset,
        components,
    })
}

/// Default desk-scale benchmark: three sources with decreasing spurious
/// agreement and one anti-correlated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub params: GeneratorParams,
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
}

pub const DEFAULT_SOURCE_CORRELATIONS: [f64; 3] = [0.9, 0.8, 0.7];
pub const DEFAULT_TARGET_CORRELATION: f64 = -0.9;
pub const DEFAULT_SPURIOUS_SCALE: f64 = 1.5;
pub const DEFAULT_SAMPLES_PER_DOMAIN: usize = 2000;

impl Benchmark {
    pub fn default_specs() -> (Vec<DomainSpec>, DomainSpec) {
        let sources = DEFAULT_SOURCE_CORRELATIONS
            .iter()
            .enumerate()
            .map(|(i, &r)| DomainSpec {
                domain_id: i as u32,
                spurious_correlation: r,
                spurious_scale: DEFAULT_SPURIOUS_SCALE,
                sample_count: DEFAULT_SAMPLES_PER_DOMAIN,
            })
            .collect();
        let target = DomainSpec {
            domain_id: DEFAULT_SOURCE_CORRELATIONS.len() as u32,
            spurious_correlation: DEFAULT_TARGET_CORRELATION,
            spurious_scale: DEFAULT_SPURIOUS_SCALE,
            sample_count: DEFAULT_SAMPLES_PER_DOMAIN,
        };
        (sources, target)
    }

    pub fn generate(params: GeneratorParams, sources: &[DomainSpec], target: &DomainSpec, seed: u64) -> Result<Self> {
        let sources = sources
            .iter()
            .map(|s| generate_domain(s, &params, seed))
            .collect::<Result<Vec<_>>>()?;
        let target = generate_domain(target, &params, seed)?;
        Ok(Self { params, sources, target })
    }

    pub fn default_with_seed(seed: u64) -> Result<Self> {
        let (sources, target) = Self::default_specs();
        Self::generate(GeneratorParams::default_benchmark(), &sources, &target, seed)
    }

    pub fn merged_sources(&self) -> DomainDataset {
        DomainDataset::merge(&self.sources).expect("sources share layout")
    }

    /// All domains in one dataset, target last.
    pub fn all(&self) -> DomainDataset {
        let mut parts = self.sources.clone();
        parts.push(self.target.clone());
        DomainDataset::merge(&parts).expect("domains share layout")
    }
}

/// Seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64, purpose: Purpose, key: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, purpose, key));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub classes: usize,
    pub dim: usize,
    pub layout: FeatureLayout,
    pub samples: usize,
    pub domain_counts: Vec<(u32, usize)>,
    pub origins: Vec<DomainOrigin>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn header_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::arg(format!("{what} = {v} does not fit the header")))
}

pub fn encode_dataset(ds: &DomainDataset) -> Result<Vec<u8>> {
    let dim = ds.dim();
    let mut out = Vec::with_capacity(40 + ds.len() * (dim * 8 + 8));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for (v, what) in [
        (ds.classes, "classes"),
        (dim, "dim"),
        (ds.layout.invariant_start, "invariant_start"),
        (ds.layout.invariant_len, "invariant_len"),
        (ds.layout.spurious_start, "spurious_start"),
        (ds.layout.spurious_len, "spurious_len"),
    ] {
        out.extend_from_slice(&header_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for s in &ds.samples {
        for v in &s.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&header_u32(s.y, "label")?.to_le_bytes());
        out.extend_from_slice(&s.domain_id.to_le_bytes());
    }
    Ok(out)
}

/// Writes the binary dataset and its JSON manifest (`<path>.json`).
pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = encode_dataset(ds)?;
    fs::File::create(path)?.write_all(&bytes)?;
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for id in ds.domain_ids() {
        counts.push((id, ds.samples.iter().filter(|s| s.domain_id == id).count()));
    }
    let manifest = DatasetManifest {
        magic: String::from_utf8_lossy(&DATASET_MAGIC).into_owned(),
        version: DATASET_VERSION,
        classes: ds.classes,
        dim: ds.dim(),
        layout: ds.layout,
        samples: ds.len(),
        domain_counts: counts,
        origins: ds.origins.clone(),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn parse_err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.parse_err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a dataset file (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let classes = r.u32("classes")? as usize;
    let dim = r.u32("dim")? as usize;
    let layout = FeatureLayout {
        invariant_start: r.u32("layout")? as usize,
        invariant_len: r.u32("layout")? as usize,
        spurious_start: r.u32("layout")? as usize,
        spurious_len: r.u32("layout")? as usize,
    };
    if layout.dim() != dim {
        return Err(r.parse_err(format!("layout spans {} features, header says {dim}", layout.dim())));
    }
    let n = r.u64("sample count")?;
    let mut samples = Vec::new();
    for i in 0..n {
        let at = r.offset();
        let x = r.f64s(dim, "features")?;
        let y = r.u32("label")? as usize;
        let domain_id = r.u32("domain id")?;
        if y >= classes || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                offset: at,
                message: format!("row {i} is invalid"),
            });
        }
        samples.push(Sample { x, y, domain_id });
    }
    r.finish()?;
    DomainDataset::new(classes, layout, samples)
}

/// Reads a dataset; generator origins are restored from the manifest when present.
pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut ds = decode_dataset(&bytes)?;
    match fs::read_to_string(manifest_path(path)) {
        Ok(text) => {
            let manifest: DatasetManifest = serde_json::from_str(&text)?;
            ds.origins = manifest.origins;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    Ok(ds)
}
