//! Heterogeneous-category-set data: class partitions, samples with optional
//! modalities, the seeded synthetic benchmark, feature CSV I/O, and the
//! evaluation scenarios.
//!
//! Training samples are unimodal: a modality-A training sample always carries a
//! class from `seen_A`, and likewise for B. Test samples may carry either or
//! both modalities and any label.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::{norm, Matrix};
use crate::osrs::derive_seed;
use crate::semantic_space::ClassCatalog;
use crate::{Error, Modality, Result};

/// Which classes each modality observed during training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    classes: usize,
    seen_a: Vec<usize>,
    seen_b: Vec<usize>,
}

impl ClassPartition {
    /// Seen sets may overlap but must jointly cover `0..classes`.
    pub fn new(classes: usize, mut seen_a: Vec<usize>, mut seen_b: Vec<usize>) -> Result<Self> {
        seen_a.sort_unstable();
        seen_b.sort_unstable();
        for (m, set) in [("A", &seen_a), ("B", &seen_b)] {
            if set.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidArgument(format!("seen set of {m} has duplicates")));
            }
            if let Some(c) = set.iter().find(|&&c| c >= classes) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {classes} classes"
                )));
            }
        }
        let p = ClassPartition {
            classes,
            seen_a,
            seen_b,
        };
        if let Some(c) = (0..classes).find(|&c| !p.is_seen(Modality::A, c) && !p.is_seen(Modality::B, c)) {
            return Err(Error::InvalidArgument(format!("class {c} is seen by neither modality")));
        }
        Ok(p)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seen(&self, m: Modality) -> &[usize] {
        match m {
            Modality::A => &self.seen_a,
            Modality::B => &self.seen_b,
        }
    }

    pub fn unseen(&self, m: Modality) -> Vec<usize> {
        (0..self.classes).filter(|&c| !self.is_seen(m, c)).collect()
    }

    pub fn is_seen(&self, m: Modality, class: usize) -> bool {
        self.seen(m).binary_search(&class).is_ok()
    }

    pub fn is_disjoint(&self) -> bool {
        self.seen_a.iter().all(|c| !self.is_seen(Modality::B, *c))
    }
}

/// Seeded shuffle of `0..n`; the first `⌈n/2⌉` classes go to A, the rest to B.
pub fn split_classes(n: usize, seed: u64) -> Result<ClassPartition> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = n.div_ceil(2);
    ClassPartition::new(n, order[..half].to_vec(), order[half..].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Provenance tag carried as the id prefix, e.g. `train-000012-A`.
    pub fn of_id(id: &str) -> Option<Split> {
        if id.starts_with("train-") {
            Some(Split::Train)
        } else if id.starts_with("test-") {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: String,
    pub label: usize,
    pub feat_a: Option<Vec<f64>>,
    pub feat_b: Option<Vec<f64>>,
}

impl MultimodalSample {
    pub fn feature(&self, m: Modality) -> Option<&[f64]> {
        match m {
            Modality::A => self.feat_a.as_deref(),
            Modality::B => self.feat_b.as_deref(),
        }
    }

    pub fn has(&self, m: Modality) -> bool {
        self.feature(m).is_some()
    }

    pub fn is_complete(&self) -> bool {
        self.feat_a.is_some() && self.feat_b.is_some()
    }
}

/// A sample with both feature vectors materialized; absent modalities are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    pub id: String,
    pub label: usize,
    pub feat_a: Vec<f64>,
    pub feat_b: Vec<f64>,
    pub present_a: bool,
    pub present_b: bool,
}

impl PaddedSample {
    pub fn feature(&self, m: Modality) -> &[f64] {
        match m {
            Modality::A => &self.feat_a,
            Modality::B => &self.feat_b,
        }
    }

    pub fn present(&self, m: Modality) -> bool {
        match m {
            Modality::A => self.present_a,
            Modality::B => self.present_b,
        }
    }
}

pub fn pad_missing(sample: &MultimodalSample, dim_a: usize, dim_b: usize) -> PaddedSample {
    PaddedSample {
        id: sample.id.clone(),
        label: sample.label,
        feat_a: sample.feat_a.clone().unwrap_or_else(|| vec![0.0; dim_a]),
        feat_b: sample.feat_b.clone().unwrap_or_else(|| vec![0.0; dim_b]),
        present_a: sample.feat_a.is_some(),
        present_b: sample.feat_b.is_some(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmhclDataset {
    pub dim_a: usize,
    pub dim_b: usize,
    pub partition: ClassPartition,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub seed: Option<u64>,
}

impl MmhclDataset {
    /// Validates dims, labels, presence, provenance tags and the seen-class
    /// constraint on training samples.
    pub fn new(
        dim_a: usize,
        dim_b: usize,
        partition: ClassPartition,
        train: Vec<MultimodalSample>,
        test: Vec<MultimodalSample>,
        seed: Option<u64>,
    ) -> Result<Self> {
        let ds = MmhclDataset {
            dim_a,
            dim_b,
            partition,
            train,
            test,
            seed,
        };
        for (split, samples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
            for s in samples {
                ds.check_sample(s, split)?;
            }
        }
        Ok(ds)
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.dim_a,
            Modality::B => self.dim_b,
        }
    }

    fn check_sample(&self, s: &MultimodalSample, split: Split) -> Result<()> {
        if Split::of_id(&s.id) != Some(split) {
            return Err(Error::InvalidArgument(format!(
                "sample `{}` lacks the `{}-` provenance prefix",
                s.id,
                split.tag()
            )));
        }
        if s.label >= self.partition.classes() {
            return Err(Error::InvalidArgument(format!(
                "sample `{}` has out-of-range label {}",
                s.id, s.label
            )));
        }
        if s.feat_a.is_none() && s.feat_b.is_none() {
            return Err(Error::InvalidArgument(format!("sample `{}` has no modality", s.id)));
        }
        for m in Modality::BOTH {
            if let Some(f) = s.feature(m) {
                if f.len() != self.dim(m) {
                    return Err(Error::InvalidArgument(format!(
                        "sample `{}` modality {m} has dim {}, expected {}",
                        s.id,
                        f.len(),
                        self.dim(m)
                    )));
                }
                if split == Split::Train && !self.partition.is_seen(m, s.label) {
                    return Err(Error::InvalidArgument(format!(
                        "training sample `{}` carries modality {m} but its class {} is not seen by {m}",
                        s.id, s.label
                    )));
                }
            }
        }
        if split == Split::Train && s.is_complete() {
            return Err(Error::InvalidArgument(format!(
                "training sample `{}` carries both modalities",
                s.id
            )));
        }
        Ok(())
    }

    /// Training samples of one modality, in stored order.
    pub fn train_stream(&self, m: Modality) -> Vec<&MultimodalSample> {
        self.train.iter().filter(|s| s.has(m)).collect()
    }
}

/// Parameters of the synthetic class embeddings. Classes are drawn around
/// `groups` random prototypes so that the similarity matrix has structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSpec {
    /// Dimension of the latent space the embeddings are drawn in before a
    /// random linear lift to `semantic_dim`; 0 draws directly in `semantic_dim`.
    pub latent_dim: usize,
    pub groups: usize,
    /// Relative size of a class's offset from its group prototype.
    pub within_group: f64,
}

impl Default for CatalogSpec {
    fn default() -> Self {
        CatalogSpec {
            latent_dim: LATENT,
            groups: GROUPS,
            within_group: WITHIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub semantic_dim: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub train_per_class: usize,
    /// Test samples per class for each presence pattern (A only, B only, both).
    pub test_per_class: usize,
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// How strongly cluster centers follow the class embeddings, in `[0, 1]`.
    pub rho: f64,
    pub seed: u64,
    /// Typical per-coordinate magnitude of the cluster centers.
    pub center_scale: f64,
    pub catalog: CatalogSpec,
}

impl Default for SyntheticSpec {
    /// The standard desk-scale benchmark.
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            semantic_dim: 32,
            dim_a: 48,
            dim_b: 64,
            train_per_class: 50,
            test_per_class: 20,
            sigma_a: 0.3,
            sigma_b: 0.3,
            rho: 0.9,
            seed: 0,
            center_scale: CENTER_SCALE,
            catalog: CatalogSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.classes,
            self.semantic_dim,
            self.dim_a,
            self.dim_b,
            self.train_per_class,
            self.test_per_class,
            self.catalog.groups,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(format!("synthetic sample counts must be ≥ 1: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic benchmark needs at least 2 classes".into()));
        }
        if !(self.sigma_a >= 0.0 && self.sigma_b >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::Config("center_scale must be positive".into()));
        }
        if !(self.catalog.within_group >= 0.0) {
            return Err(Error::Config("within-group spread must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, m: Modality) -> f64 {
        match m {
            Modality::A => self.sigma_a,
            Modality::B => self.sigma_b,
        }
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.dim_a,
            Modality::B => self.dim_b,
        }
    }
}

const LATENT: usize = 8;
const GROUPS: usize = 5;
const WITHIN: f64 = 2.0;
const CENTER_SCALE: f64 = 3.0;

// seed streams
const STREAM_CATALOG: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_PROJECTION: u64 = 3;
const STREAM_RANDOM_CENTER: u64 = 5;
const STREAM_TRAIN: u64 = 7;
const STREAM_TEST: u64 = 11;

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        for x in &mut v {
            *x /= n;
        }
    }
    v
}

/// Unit-norm class embeddings clustered around random group prototypes.
pub fn synthetic_catalog(spec: &SyntheticSpec) -> Result<ClassCatalog> {
    spec.validate()?;
    let d = spec.semantic_dim;
    let r = match spec.catalog.latent_dim {
        0 => d,
        l => l.min(d),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_CATALOG));
    let lift = (r < d).then(|| gaussian_vec(&mut rng, d * r, 1.0));
    let protos: Vec<Vec<f64>> = (0..spec.catalog.groups)
        .map(|_| unit(gaussian_vec(&mut rng, r, 1.0)))
        .collect();
    let mut data = Vec::with_capacity(spec.classes * d);
    for c in 0..spec.classes {
        let proto = &protos[c % protos.len()];
        let offset = unit(gaussian_vec(&mut rng, r, 1.0));
        let mut z: Vec<f64> = proto
            .iter()
            .zip(&offset)
            .map(|(p, o)| p + spec.catalog.within_group * o)
            .collect();
        if norm(&z) == 0.0 {
            z = offset;
        }
        let v = match &lift {
            Some(g) => (0..d).map(|i| (0..r).map(|j| g[i * r + j] * z[j]).sum()).collect(),
            None => z,
        };
        data.extend(unit(v));
    }
    ClassCatalog::new(
        (0..spec.classes).map(|c| format!("class{c:03}")).collect(),
        Matrix::from_vec(spec.classes, d, data)?,
    )
}

/// Cluster centers `μ_M(c) = ρ·P_M·c + (1−ρ)·g_M(c)`, one row per class, for
/// both modalities. `P_M` has i.i.d. `N(0, s²/d_s)` entries with
/// `s = center_scale`; `g_M(c)` is Gaussian with the marginal scale of `P_M·c`.
pub fn cluster_centers(spec: &SyntheticSpec, catalog: &ClassCatalog) -> Result<[Matrix; 2]> {
    spec.validate()?;
    if catalog.len() != spec.classes || catalog.embedding_dim() != spec.semantic_dim {
        return Err(Error::InvalidArgument(format!(
            "catalog is {}x{}, synthetic settings expect {}x{}",
            catalog.len(),
            catalog.embedding_dim(),
            spec.classes,
            spec.semantic_dim
        )));
    }
    let d_s = spec.semantic_dim;
    let centers = Modality::BOTH.map(|m| {
        let d_m = spec.dim(m);
        let stream = m.index() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_PROJECTION + 100 * stream));
        let proj = gaussian_vec(&mut rng, d_m * d_s, spec.center_scale / (d_s as f64).sqrt());
        let mut rng_g = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_RANDOM_CENTER + 100 * stream));
        let mut out = Matrix::zeros(spec.classes, d_m);
        for c in 0..spec.classes {
            let emb = catalog.embeddings().row(c);
            let scale = spec.center_scale * norm(emb) / (d_s as f64).sqrt();
            let g = gaussian_vec(&mut rng_g, d_m, scale);
            for r in 0..d_m {
                let pc: f64 = (0..d_s).map(|j| proj[r * d_s + j] * emb[j]).sum();
                out.set(c, r, spec.rho * pc + (1.0 - spec.rho) * g[r]);
            }
        }
        out
    });
    Ok(centers)
}

/// Generates the training streams and the test pool. Training carries, for
/// every class seen by a modality, `train_per_class` unimodal samples; the
/// test pool carries `test_per_class` samples per class for each presence
/// pattern (A only, B only, both).
pub fn synthesize(spec: &SyntheticSpec, catalog: &ClassCatalog) -> Result<MmhclDataset> {
    let centers = cluster_centers(spec, catalog)?;
    let partition = split_classes(spec.classes, derive_seed(spec.seed, STREAM_PARTITION))?;
    let noise = Modality::BOTH.map(|m| Normal::new(0.0, spec.sigma(m)).expect("validated sigma"));
    let draw = |rng: &mut ChaCha8Rng, m: Modality, class: usize| -> Vec<f64> {
        centers[m.index()]
            .row(class)
            .iter()
            .map(|&mu| mu + noise[m.index()].sample(rng))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TRAIN));
    let mut train = Vec::new();
    for m in Modality::BOTH {
        for &c in partition.seen(m) {
            for _ in 0..spec.train_per_class {
                let f = draw(&mut rng, m, c);
                let id = format!("train-{:06}-{m}", train.len());
                let (feat_a, feat_b) = match m {
                    Modality::A => (Some(f), None),
                    Modality::B => (None, Some(f)),
                };
                train.push(MultimodalSample {
                    id,
                    label: c,
                    feat_a,
                    feat_b,
                });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TEST));
    let mut test = Vec::new();
    for (tag, a, b) in [("A", true, false), ("B", false, true), ("AB", true, true)] {
        for c in 0..spec.classes {
            for _ in 0..spec.test_per_class {
                let feat_a = a.then(|| draw(&mut rng, Modality::A, c));
                let feat_b = b.then(|| draw(&mut rng, Modality::B, c));
                test.push(MultimodalSample {
                    id: format!("test-{:06}-{tag}", test.len()),
                    label: c,
                    feat_a,
                    feat_b,
                });
            }
        }
    }
    MmhclDataset::new(spec.dim_a, spec.dim_b, partition, train, test, Some(spec.seed))
}

/// Writes one modality's features CSV (`id,label,f0,...`) for the samples that
/// carry that modality.
pub fn write_features(samples: &[MultimodalSample], m: Modality, dim: usize, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("id,label");
    for j in 0..dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for s in samples {
        if let Some(f) = s.feature(m) {
            let mut line = format!("{},{}", s.id, s.label);
            for v in f {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct FeatureRows {
    dim: usize,
    rows: Vec<(String, Option<usize>, Vec<f64>)>,
}

fn read_features(path: &Path) -> Result<FeatureRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    let header = reader.headers().map_err(|e| Error::load(path, e.to_string()))?.clone();
    if header.get(0) != Some("id") || header.get(1) != Some("label") {
        return Err(Error::load(path, "header must start with `id,label`"));
    }
    let dim = header.len() - 2;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let line = i + 2;
        if rec.len() != dim + 2 {
            return Err(Error::load(
                path,
                format!(
                    "row {line} has {} features, header declares {dim}",
                    rec.len().saturating_sub(2)
                ),
            ));
        }
        let label = match rec[1].trim() {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::load(path, format!("row {line}: bad label `{s}`")))?,
            ),
        };
        let feats = rec
            .iter()
            .skip(2)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::load(path, format!("row {line}: cannot parse `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), label, feats));
    }
    Ok(FeatureRows { dim, rows })
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut out = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::load(path, "labels file rows must be `id,label`"));
        }
        let label = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::load(path, format!("bad label `{}`", &rec[1])))?;
        out.insert(rec[0].to_string(), label);
    }
    Ok(out)
}

/// Joins a pair of per-modality feature files on sample id; samples come back
/// sorted by id. Labels come from
/// the `label` column, or from `labels` when given (they must agree when both
/// are present). Returns the samples and the two inferred feature dims.
pub fn load_split(
    path_a: &Path,
    path_b: &Path,
    labels: Option<&Path>,
) -> Result<(Vec<MultimodalSample>, usize, usize)> {
    let fa = read_features(path_a)?;
    let fb = read_features(path_b)?;
    let label_map = labels.map(read_labels).transpose()?;
    let mut by_id: BTreeMap<String, MultimodalSample> = BTreeMap::new();
    for (m, rows, path) in [(Modality::A, fa.rows, path_a), (Modality::B, fb.rows, path_b)] {
        for (id, label, feats) in rows {
            let label = match (label, label_map.as_ref().and_then(|l| l.get(&id)).copied()) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::load(
                        path,
                        format!("sample `{id}`: label {a} disagrees with labels file {b}"),
                    ))
                }
                (Some(a), _) | (None, Some(a)) => a,
                (None, None) => return Err(Error::load(path, format!("sample `{id}` has no label"))),
            };
            let entry = by_id.entry(id.clone()).or_insert_with(|| MultimodalSample {
                id: id.clone(),
                label,
                feat_a: None,
                feat_b: None,
            });
            if entry.label != label {
                return Err(Error::load(
                    path,
                    format!("sample `{id}` has different labels across modalities"),
                ));
            }
            let slot = match m {
                Modality::A => &mut entry.feat_a,
                Modality::B => &mut entry.feat_b,
            };
            if slot.is_some() {
                return Err(Error::load(path, format!("duplicate sample id `{id}`")));
            }
            *slot = Some(feats);
        }
    }
    Ok((by_id.into_values().collect(), fa.dim, fb.dim))
}

/// File locations of an exported dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFiles {
    pub train_a: PathBuf,
    pub train_b: PathBuf,
    pub test_a: PathBuf,
    pub test_b: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl FeatureFiles {
    pub fn in_dir(dir: &Path) -> Self {
        FeatureFiles {
            train_a: dir.join("train_a.csv"),
            train_b: dir.join("train_b.csv"),
            test_a: dir.join("test_a.csv"),
            test_b: dir.join("test_b.csv"),
            labels: None,
        }
    }

    pub fn resolve(&self, base: &Path) -> FeatureFiles {
        FeatureFiles {
            train_a: base.join(&self.train_a),
            train_b: base.join(&self.train_b),
            test_a: base.join(&self.test_a),
            test_b: base.join(&self.test_b),
            labels: self.labels.as_ref().map(|p| base.join(p)),
        }
    }
}

pub fn load_features(files: &FeatureFiles, partition: ClassPartition, seed: Option<u64>) -> Result<MmhclDataset> {
    let labels = files.labels.as_deref();
    let (train, ta, tb) = load_split(&files.train_a, &files.train_b, labels)?;
    let (test, sa, sb) = load_split(&files.test_a, &files.test_b, labels)?;
    if ta != sa || tb != sb {
        return Err(Error::load(
            &files.test_a,
            format!("test dims ({sa}, {sb}) differ from training dims ({ta}, {tb})"),
        ));
    }
    MmhclDataset::new(ta, tb, partition, train, test, seed).map_err(|e| Error::load(&files.train_a, e.to_string()))
}

pub fn export_features(ds: &MmhclDataset, files: &FeatureFiles) -> Result<()> {
    write_features(&ds.train, Modality::A, ds.dim_a, &files.train_a)?;
    write_features(&ds.train, Modality::B, ds.dim_b, &files.train_b)?;
    write_features(&ds.test, Modality::A, ds.dim_a, &files.test_a)?;
    write_features(&ds.test, Modality::B, ds.dim_b, &files.test_b)
}

/// Describes an exported dataset. Relative paths are resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dim_a: usize,
    pub dim_b: usize,
    pub partition: ClassPartition,
    #[serde(default)]
    pub seed: Option<u64>,
    pub catalog: PathBuf,
    pub files: FeatureFiles,
    #[serde(default)]
    pub scenario_counts: BTreeMap<Scenario, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    /// Every file the manifest points at, resolved.
    pub fn input_paths(&self, base: &Path) -> Vec<PathBuf> {
        let f = self.files.resolve(base);
        let mut v = vec![base.join(&self.catalog), f.train_a, f.train_b, f.test_a, f.test_b];
        v.extend(f.labels);
        v
    }

    /// Loads the dataset and its catalog; `path` is the manifest file.
    pub fn open(path: &Path) -> Result<(MmhclDataset, ClassCatalog)> {
        let m = Self::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let catalog = ClassCatalog::load(base.join(&m.catalog))?;
        if catalog.len() != m.partition.classes() {
            return Err(Error::load(
                path,
                format!(
                    "catalog has {} classes, partition {}",
                    catalog.len(),
                    m.partition.classes()
                ),
            ));
        }
        let ds = load_features(&m.files.resolve(base), m.partition.clone(), m.seed)?;
        if (ds.dim_a, ds.dim_b) != (m.dim_a, m.dim_b) {
            return Err(Error::load(
                path,
                format!(
                    "feature files have dims ({}, {}), manifest declares ({}, {})",
                    ds.dim_a, ds.dim_b, m.dim_a, m.dim_b
                ),
            ));
        }
        Ok((ds, catalog))
    }
}

/// Writes catalog, feature files and manifest into `dir`; returns the written
/// file names relative to `dir`.
pub fn export_dataset(
    ds: &MmhclDataset,
    catalog: &ClassCatalog,
    spec: Option<&SyntheticSpec>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let files = FeatureFiles::in_dir(Path::new(""));
    export_features(ds, &files.resolve(dir))?;
    let catalog_name = PathBuf::from("catalog.csv");
    catalog.save(dir.join(&catalog_name))?;
    let manifest = DatasetManifest {
        dim_a: ds.dim_a,
        dim_b: ds.dim_b,
        partition: ds.partition.clone(),
        seed: ds.seed,
        catalog: catalog_name.clone(),
        files: files.clone(),
        scenario_counts: make_eval_scenarios(ds)?.counts(),
        spec: spec.cloned(),
    };
    let path = dir.join(DATASET_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(vec![
        catalog_name,
        files.train_a,
        files.train_b,
        files.test_a,
        files.test_b,
        PathBuf::from(DATASET_MANIFEST),
    ])
}

/// Evaluation scenarios. The first six are pooled into [`Scenario::Mix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "A_s")]
    ASeen,
    #[serde(rename = "B_s")]
    BSeen,
    #[serde(rename = "A_u")]
    AUnseen,
    #[serde(rename = "B_u")]
    BUnseen,
    #[serde(rename = "A_s+B_u")]
    ASeenBUnseen,
    #[serde(rename = "A_u+B_s")]
    AUnseenBSeen,
    #[serde(rename = "A_all+B_all")]
    AllComplete,
    #[serde(rename = "acc_mix")]
    Mix,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::ASeen,
        Scenario::BSeen,
        Scenario::AUnseen,
        Scenario::BUnseen,
        Scenario::ASeenBUnseen,
        Scenario::AUnseenBSeen,
        Scenario::AllComplete,
        Scenario::Mix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ASeen => "A_s",
            Scenario::BSeen => "B_s",
            Scenario::AUnseen => "A_u",
            Scenario::BUnseen => "B_u",
            Scenario::ASeenBUnseen => "A_s+B_u",
            Scenario::AUnseenBSeen => "A_u+B_s",
            Scenario::AllComplete => "A_all+B_all",
            Scenario::Mix => "acc_mix",
        }
    }

    pub fn from_name(name: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scenarios a test sample belongs to, from its presence pattern and label alone.
pub fn scenario_membership(sample: &MultimodalSample, partition: &ClassPartition) -> Vec<Scenario> {
    let seen_a = partition.is_seen(Modality::A, sample.label);
    let seen_b = partition.is_seen(Modality::B, sample.label);
    let mut out = Vec::new();
    let primary = match (sample.has(Modality::A), sample.has(Modality::B)) {
        (true, false) => Some(if seen_a { Scenario::ASeen } else { Scenario::AUnseen }),
        (false, true) => Some(if seen_b { Scenario::BSeen } else { Scenario::BUnseen }),
        (true, true) => match (seen_a, seen_b) {
            (true, false) => Some(Scenario::ASeenBUnseen),
            (false, true) => Some(Scenario::AUnseenBSeen),
            _ => None,
        },
        (false, false) => None,
    };
    if let Some(p) = primary {
        out.push(p);
    }
    if sample.is_complete() {
        out.push(Scenario::AllComplete);
    }
    if primary.is_some() {
        out.push(Scenario::Mix);
    }
    out.sort();
    out
}

/// Test-sample indices per scenario. Every scenario appears as a key, possibly
/// with an empty list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenarios {
    pub members: BTreeMap<Scenario, Vec<usize>>,
}

impl Scenarios {
    pub fn get(&self, s: Scenario) -> &[usize] {
        self.members.get(&s).map_or(&[], Vec::as_slice)
    }

    pub fn counts(&self) -> BTreeMap<Scenario, usize> {
        self.members.iter().map(|(k, v)| (*k, v.len())).collect()
    }

    pub fn empty(&self) -> Vec<Scenario> {
        self.members
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(k, _)| *k)
            .collect()
    }
}

pub fn make_eval_scenarios(ds: &MmhclDataset) -> Result<Scenarios> {
    if ds.test.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test samples".into()));
    }
    let mut members: BTreeMap<Scenario, Vec<usize>> = Scenario::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for (i, s) in ds.test.iter().enumerate() {
        for sc in scenario_membership(s, &ds.partition) {
            members.get_mut(&sc).expect("all scenarios present").push(i);
        }
    }
    for (sc, v) in &members {
        if v.is_empty() {
            log::warn!("scenario {sc} has no test samples; it is excluded from reports");
        }
    }
    Ok(Scenarios { members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 6,
            semantic_dim: 5,
            dim_a: 4,
            dim_b: 7,
            train_per_class: 3,
            test_per_class: 2,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn split_cardinalities() {
        let p = split_classes(4, 1).unwrap();
        assert_eq!(p.seen(Modality::A).len(), 2);
        assert_eq!(p.seen(Modality::B).len(), 2);
        assert!(p.is_disjoint());
        assert_eq!(p.unseen(Modality::A), p.seen(Modality::B).to_vec());
        let p = split_classes(5, 1).unwrap();
        assert_eq!((p.seen(Modality::A).len(), p.seen(Modality::B).len()), (3, 2));
        assert!(split_classes(1, 0).is_err());
    }

    #[test]
    fn split_determinism() {
        assert_eq!(split_classes(20, 5).unwrap(), split_classes(20, 5).unwrap());
        let differs = (6..40).any(|s| split_classes(20, s).unwrap() != split_classes(20, 5).unwrap());
        assert!(differs);
        for s in 0..10 {
            let p = split_classes(20, s).unwrap();
            assert_eq!(p.seen(Modality::A).len(), 10);
        }
    }

    #[test]
    fn partition_validation() {
        assert!(ClassPartition::new(3, vec![0], vec![1]).is_err());
        assert!(ClassPartition::new(3, vec![0, 0], vec![1, 2]).is_err());
        assert!(ClassPartition::new(3, vec![0, 3], vec![1, 2]).is_err());
        let overlap = ClassPartition::new(3, vec![0, 1], vec![1, 2]).unwrap();
        assert!(!overlap.is_disjoint());
    }

    #[test]
    fn noiseless_aligned_samples_equal_mapped_embedding() {
        let spec = SyntheticSpec {
            sigma_a: 0.0,
            sigma_b: 0.0,
            rho: 1.0,
            ..small_spec(3)
        };
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let centers = cluster_centers(&spec, &cat).unwrap();
        for s in &ds.train {
            for m in Modality::BOTH {
                if let Some(f) = s.feature(m) {
                    assert_eq!(f, centers[m.index()].row(s.label));
                }
            }
        }
        // every sample of one class is identical
        let a: Vec<_> = ds.train.iter().filter(|s| s.has(Modality::A)).collect();
        let first = a[0];
        for s in a.iter().filter(|s| s.label == first.label) {
            assert_eq!(s.feat_a, first.feat_a);
        }
    }

    #[test]
    fn empirical_means_near_centers() {
        let spec = SyntheticSpec {
            train_per_class: 400,
            sigma_a: 0.5,
            sigma_b: 0.5,
            ..small_spec(9)
        };
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let centers = cluster_centers(&spec, &cat).unwrap();
        let bound = 3.0 * 0.5 / (400f64).sqrt();
        for m in Modality::BOTH {
            for &c in ds.partition.seen(m) {
                let rows: Vec<&[f64]> = ds
                    .train
                    .iter()
                    .filter(|s| s.label == c)
                    .filter_map(|s| s.feature(m))
                    .collect();
                assert_eq!(rows.len(), 400);
                for j in 0..spec.dim(m) {
                    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / 400.0;
                    // 3σ per coordinate; with ~60 coordinates a rare excursion is allowed
                    assert!(
                        (mean - centers[m.index()].get(c, j)).abs() < 1.5 * bound,
                        "class {c} dim {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_valid() {
        let spec = small_spec(4);
        let cat = synthetic_catalog(&spec).unwrap();
        let a = synthesize(&spec, &cat).unwrap();
        let b = synthesize(&spec, &cat).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 6 * 3);
        assert_eq!(a.test.len(), 6 * 2 * 3);
        for s in &a.train {
            for m in Modality::BOTH {
                if s.has(m) {
                    assert!(a.partition.is_seen(m, s.label));
                }
            }
        }
        let other = synthesize(&small_spec(5), &cat).unwrap();
        assert_ne!(a.test, other.test);
    }

    #[test]
    fn catalog_is_unit_norm() {
        let cat = synthetic_catalog(&SyntheticSpec::default()).unwrap();
        assert_eq!(cat.len(), 20);
        for r in cat.embeddings().row_iter() {
            assert_abs_diff_eq!(norm(r), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn padding() {
        let s = MultimodalSample {
            id: "test-x".into(),
            label: 1,
            feat_a: Some(vec![1.0, 2.0]),
            feat_b: None,
        };
        let p = pad_missing(&s, 2, 3);
        assert_eq!(p.feat_b, vec![0.0; 3]);
        assert!(p.present_a && !p.present_b);
        let full = MultimodalSample {
            feat_b: Some(vec![3.0, 4.0, 5.0]),
            ..s
        };
        let p = pad_missing(&full, 2, 3);
        assert_eq!((p.feat_a, p.feat_b), (vec![1.0, 2.0], vec![3.0, 4.0, 5.0]));
    }

    #[test]
    fn dataset_rejects_violations() {
        let p = ClassPartition::new(2, vec![0], vec![1]).unwrap();
        let bad = MultimodalSample {
            id: "train-1".into(),
            label: 1,
            feat_a: Some(vec![0.0]),
            feat_b: None,
        };
        let err = MmhclDataset::new(1, 1, p.clone(), vec![bad], vec![], None).unwrap_err();
        assert!(err.to_string().contains("not seen by A"), "{err}");
        let untagged = MultimodalSample {
            id: "x".into(),
            label: 0,
            feat_a: Some(vec![0.0]),
            feat_b: None,
        };
        assert!(MmhclDataset::new(1, 1, p, vec![untagged], vec![], None).is_err());
    }

    #[test]
    fn load_matching_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "id,label,f0,f1\ntest-1,0,1,2\ntest-2,1,3,4\ntest-3,1,5,6\n").unwrap();
        std::fs::write(&b, "id,label,f0\ntest-1,0,0.5\ntest-2,1,0.25\ntest-3,1,-1\n").unwrap();
        let (samples, da, db) = load_split(&a, &b, None).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!((da, db), (2, 1));
        assert!(samples.iter().all(MultimodalSample::is_complete));

        std::fs::write(&b, "id,label,f0\ntest-1,1,0.5\n").unwrap();
        assert!(load_split(&a, &b, None).is_err());
    }

    #[test]
    fn load_labels_file() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let l = dir.path().join("labels.csv");
        std::fs::write(&a, "id,label,f0\ntest-1,,1\n").unwrap();
        std::fs::write(&b, "id,label,f0\n").unwrap();
        assert!(load_split(&a, &b, None).is_err());
        std::fs::write(&l, "id,label\ntest-1,2\n").unwrap();
        let (s, _, _) = load_split(&a, &b, Some(&l)).unwrap();
        assert_eq!(s[0].label, 2);
        assert!(s[0].feat_b.is_none());
    }

    #[test]
    fn load_rejects_unseen_training_class() {
        let dir = tempfile::tempdir().unwrap();
        let files = FeatureFiles::in_dir(dir.path());
        std::fs::write(&files.train_a, "id,label,f0\ntrain-1,1,0.3\n").unwrap();
        std::fs::write(&files.train_b, "id,label,f0\n").unwrap();
        std::fs::write(&files.test_a, "id,label,f0\ntest-1,0,0.1\n").unwrap();
        std::fs::write(&files.test_b, "id,label,f0\n").unwrap();
        let p = ClassPartition::new(2, vec![0], vec![1]).unwrap();
        let err = load_features(&files, p, None).unwrap_err();
        assert!(err.to_string().contains("not seen by A"), "{err}");
    }

    #[test]
    fn export_import_round_trip() {
        let spec = small_spec(8);
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = FeatureFiles::in_dir(dir.path());
        export_features(&ds, &files).unwrap();
        let back = load_features(&files, ds.partition.clone(), ds.seed).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn manifest_round_trip() {
        let spec = small_spec(12);
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = export_dataset(&ds, &cat, Some(&spec), dir.path()).unwrap();
        assert_eq!(written.len(), 6);
        let (back, cat_back) = DatasetManifest::open(&dir.path().join(DATASET_MANIFEST)).unwrap();
        assert_eq!(back, ds);
        assert_eq!(cat_back, cat);
        let m = DatasetManifest::read(&dir.path().join(DATASET_MANIFEST)).unwrap();
        assert_eq!(
            m.scenario_counts[&Scenario::ASeen],
            ds.partition.seen(Modality::A).len() * 2
        );
        assert_eq!(m.spec, Some(spec));
    }

    #[test]
    fn scenario_definitions() {
        let p = ClassPartition::new(4, vec![0, 1], vec![2, 3]).unwrap();
        let audio_seen = MultimodalSample {
            id: "test-1".into(),
            label: 0,
            feat_a: Some(vec![]),
            feat_b: None,
        };
        assert_eq!(
            scenario_membership(&audio_seen, &p),
            vec![Scenario::ASeen, Scenario::Mix]
        );
        let complete_b = MultimodalSample {
            id: "test-2".into(),
            label: 2,
            feat_a: Some(vec![]),
            feat_b: Some(vec![]),
        };
        assert_eq!(
            scenario_membership(&complete_b, &p),
            vec![Scenario::AUnseenBSeen, Scenario::AllComplete, Scenario::Mix]
        );
    }

    #[test]
    fn scenario_sizes_match_recount() {
        let spec = small_spec(2);
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let sc = make_eval_scenarios(&ds).unwrap();
        // brute-force recount straight from presence and label
        let mut counts = BTreeMap::new();
        for s in &ds.test {
            let sa = ds.partition.is_seen(Modality::A, s.label);
            let key = match (s.feat_a.is_some(), s.feat_b.is_some()) {
                (true, false) if sa => "A_s",
                (true, false) => "A_u",
                (false, true) if !sa => "B_s",
                (false, true) => "B_u",
                _ if sa => "A_s+B_u",
                _ => "A_u+B_s",
            };
            *counts.entry(key).or_insert(0usize) += 1;
            if s.is_complete() {
                *counts.entry("A_all+B_all").or_insert(0usize) += 1;
            }
        }
        for sc_name in ["A_s", "B_s", "A_u", "B_u", "A_s+B_u", "A_u+B_s", "A_all+B_all"] {
            assert_eq!(
                sc.get(Scenario::from_name(sc_name).unwrap()).len(),
                counts[sc_name],
                "{sc_name}"
            );
        }
        let six: usize = Scenario::ALL[..6].iter().map(|s| sc.get(*s).len()).sum();
        assert_eq!(sc.get(Scenario::Mix).len(), six);
        assert_eq!(sc.get(Scenario::ASeen).len(), 3 * 2);
        assert!(sc.empty().is_empty());
    }
}
