//! Joint training of both modality ensembles, the inference chain, the
//! fully-connected baseline, and checkpoints.
//!
//! The per-sample objective sums, for each modality, the mean cross-entropy of
//! the individual modules and the cross-entropy of the mean-logit prediction:
//!
//! ```text
//! L = Σ_M [ (1/K)·Σ_i CE(p_i, y) + CE(p*, y) ]
//! ```
//!
//! Gradients flow through softmax, the `γ²` cosine scaling and the mapper.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csmf::{similarity_reweight, FusionDecision, FusionStrategy};
use crate::dataset::{pad_missing, ClassPartition, MmhclDataset, MultimodalSample, Split};
use crate::dmss::{assess, PerModality};
use crate::numerics::{
    argmax, dot, norm, softmax, Activation, AdamConfig, AdamState, Dense, Matrix, MlpGrads, MlpParams,
};
use crate::osrs::{
    absent_bundle, default_architectures, derive_seed, ensemble_predict, scaled_cosine_logits, ModalityEnsemble,
    OsrsModule, PredictionBundle,
};
use crate::semantic_space::{class_similarity, prune_topk, ClassCatalog, PruneScope, SimilarityMatrix};
use crate::{Error, Execution, Modality, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Mapper modules per modality.
    pub modules: usize,
    /// Logits are scaled by `gamma²`.
    pub gamma: f64,
    pub top_k: usize,
    pub seed: u64,
    pub use_osrs: bool,
    pub use_dmss: bool,
    pub use_csmf: bool,
    pub prune_scope: PruneScope,
    pub row_normalize: bool,
    /// With exactly one modality present, make it dominant regardless of `u`.
    pub force_dominant_on_missing: bool,
    /// Hidden widths per module, cycled when there are more modules than entries.
    pub architectures: Vec<Vec<usize>>,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 256,
            modules: 4,
            gamma: 5.0,
            top_k: 5,
            seed: 0,
            use_osrs: true,
            use_dmss: true,
            use_csmf: true,
            prune_scope: PruneScope::All,
            row_normalize: false,
            force_dominant_on_missing: false,
            architectures: default_architectures(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.modules < 2 {
            return Err(Error::Config(format!(
                "modules must be ≥ 2 for the ensemble entropy spread, got {}",
                self.modules
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be ≥ 1".into()));
        }
        if self.architectures.is_empty() || self.architectures.iter().flatten().any(|&w| w == 0) {
            return Err(Error::Config(
                "architectures must be non-empty with positive widths".into(),
            ));
        }
        if (self.use_csmf && !self.use_dmss) || (self.use_dmss && !self.use_osrs) {
            return Err(Error::Config(format!(
                "ablation flags must chain csmf → dmss → osrs, got osrs={} dmss={} csmf={}",
                self.use_osrs, self.use_dmss, self.use_csmf
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Short ablation label: `B`, `B+O`, `B+O+D` or `B+O+D+C`.
    pub fn label(&self) -> &'static str {
        match (self.use_osrs, self.use_dmss, self.use_csmf) {
            (false, _, _) => "B",
            (true, false, _) => "B+O",
            (true, true, false) => "B+O+D",
            (true, true, true) => "B+O+D+C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_total: f64,
}

pub fn write_loss_log(log: &[EpochLoss], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss_A,loss_B,loss_total\n");
    for e in log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss_a, e.loss_b, e.loss_total));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-modality terms of the objective, each a mean over that modality's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_modality: PerModality<f64>,
    /// `(1/K)·Σ_i CE(p_i, y)` part.
    pub module_term: PerModality<f64>,
    /// `CE(p*, y)` part.
    pub mean_term: PerModality<f64>,
}

fn ce(probs: &[f64], label: usize) -> f64 {
    -probs[label].ln()
}

fn modality_terms(bundles: &[PredictionBundle], labels: &[usize]) -> Result<(f64, f64)> {
    if bundles.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} bundles but {} labels",
            bundles.len(),
            labels.len()
        )));
    }
    if bundles.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut module_term, mut mean_term) = (0.0, 0.0);
    for (b, &y) in bundles.iter().zip(labels) {
        if y >= b.class_count() {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                b.class_count()
            )));
        }
        module_term += b.probs.iter().map(|p| ce(p, y)).sum::<f64>() / b.probs.len() as f64;
        mean_term += ce(&b.mean_probs, y);
    }
    let n = bundles.len() as f64;
    Ok((module_term / n, mean_term / n))
}

pub fn total_loss(
    bundles_a: &[PredictionBundle],
    bundles_b: &[PredictionBundle],
    labels_a: &[usize],
    labels_b: &[usize],
) -> Result<LossBreakdown> {
    let (ma, pa) = modality_terms(bundles_a, labels_a)?;
    let (mb, pb) = modality_terms(bundles_b, labels_b)?;
    Ok(LossBreakdown {
        total: ma + pa + mb + pb,
        per_modality: PerModality { a: ma + pa, b: mb + pb },
        module_term: PerModality { a: ma, b: mb },
        mean_term: PerModality { a: pa, b: pb },
    })
}

struct ModuleForward {
    logits: Matrix,
    semantic: Matrix,
    cache: crate::numerics::ForwardCache,
}

fn module_forward(module: &OsrsModule, catalog: &ClassCatalog, x: &Matrix) -> Result<ModuleForward> {
    let (semantic, cache) = module.mapper.forward(x)?;
    let mut logits = Matrix::zeros(x.rows(), catalog.len());
    for r in 0..x.rows() {
        let lo = scaled_cosine_logits(semantic.row(r), catalog, module.gamma)?;
        logits.row_mut(r).copy_from_slice(&lo.logits);
    }
    Ok(ModuleForward {
        logits,
        semantic,
        cache,
    })
}

fn check_labels(labels: &[usize], x: &Matrix, classes: usize) -> Result<()> {
    if labels.len() != x.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} rows",
            labels.len(),
            x.rows()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean objective of one modality over a batch.
pub fn ensemble_batch_loss(
    ensemble: &ModalityEnsemble,
    catalog: &ClassCatalog,
    x: &Matrix,
    labels: &[usize],
) -> Result<f64> {
    check_labels(labels, x, catalog.len())?;
    let fwd = ensemble
        .modules()
        .iter()
        .map(|m| module_forward(m, catalog, x))
        .collect::<Result<Vec<_>>>()?;
    let mut bundles = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let logits = fwd.iter().map(|f| f.logits.row(r).to_vec()).collect();
        bundles.push(PredictionBundle::from_logits(logits, false)?);
    }
    let (m, p) = modality_terms(&bundles, labels)?;
    Ok(m + p)
}

/// Mean objective of one modality over a batch and its gradient with respect
/// to every module's parameters.
pub fn ensemble_batch_gradients(
    ensemble: &ModalityEnsemble,
    catalog: &ClassCatalog,
    x: &Matrix,
    labels: &[usize],
    exec: Execution,
) -> Result<(f64, Vec<MlpGrads>)> {
    check_labels(labels, x, catalog.len())?;
    let k = ensemble.len();
    let (rows, n) = (x.rows(), catalog.len());
    let fwd = exec
        .map(ensemble.modules(), |m| module_forward(m, catalog, x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    // shared per-sample quantities: p* and the loss
    let mut mean_probs = Matrix::zeros(rows, n);
    let mut module_probs: Vec<Matrix> = vec![Matrix::zeros(rows, n); k];
    let mut loss = 0.0;
    for r in 0..rows {
        let mut mean = vec![0.0; n];
        for (i, f) in fwd.iter().enumerate() {
            let p = softmax(f.logits.row(r))?;
            loss += ce(&p, labels[r]) / k as f64;
            module_probs[i].row_mut(r).copy_from_slice(&p);
            for (m, v) in mean.iter_mut().zip(f.logits.row(r)) {
                *m += v / k as f64;
            }
        }
        let p_star = softmax(&mean)?;
        loss += ce(&p_star, labels[r]);
        mean_probs.row_mut(r).copy_from_slice(&p_star);
    }
    loss /= rows as f64;

    let scale = 1.0 / (k as f64 * rows as f64);
    let unit = catalog.unit_embeddings();
    let grads = exec
        .map_range(k, |i| {
            let module = &ensemble.modules()[i];
            let f = &fwd[i];
            let g2 = module.gamma * module.gamma;
            let mut d_sem = Matrix::zeros(rows, f.semantic.cols());
            for r in 0..rows {
                let s = f.semantic.row(r);
                let len = norm(s);
                if len == 0.0 {
                    continue;
                }
                // dL/dlo_i = [(p_i − y) + (p* − y)] / (K·B)
                let mut du = vec![0.0; s.len()];
                for c in 0..n {
                    let y = if c == labels[r] { 1.0 } else { 0.0 };
                    let dlo = scale * ((module_probs[i].get(r, c) - y) + (mean_probs.get(r, c) - y));
                    let dcos = g2 * dlo;
                    for (d, e) in du.iter_mut().zip(unit.row(c)) {
                        *d += dcos * e;
                    }
                }
                let u: Vec<f64> = s.iter().map(|v| v / len).collect();
                let proj = dot(&u, &du);
                for (j, d) in d_sem.row_mut(r).iter_mut().enumerate() {
                    *d = (du[j] - u[j] * proj) / len;
                }
            }
            module.mapper.backward(&f.cache, &d_sem)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grads))
}

/// A trained model plus the fusion matrices derived from its catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub ensemble_a: ModalityEnsemble,
    pub ensemble_b: ModalityEnsemble,
    pub catalog: ClassCatalog,
    pub partition: ClassPartition,
    pub s_a: SimilarityMatrix,
    pub s_b: SimilarityMatrix,
    pub config: TrainConfig,
    pub log: Vec<EpochLoss>,
}

/// Top-k pruned similarity used to reweight modality `m`'s auxiliary logits.
pub fn fusion_similarity(
    catalog: &ClassCatalog,
    partition: &ClassPartition,
    m: Modality,
    top_k: usize,
    scope: PruneScope,
    row_normalize: bool,
) -> Result<SimilarityMatrix> {
    let k = top_k.min(catalog.len());
    if k < top_k {
        log::warn!("top_k {top_k} exceeds {} classes; using {k}", catalog.len());
    }
    let mut s = prune_topk(&class_similarity(catalog), k)?;
    if scope == PruneScope::SeenOnly {
        s = s.restrict_rows(partition.seen(m));
    }
    if row_normalize {
        s = s.row_normalized();
    }
    Ok(s)
}

impl ModelState {
    /// Initialized, untrained model.
    pub fn init(
        dim_a: usize,
        dim_b: usize,
        catalog: ClassCatalog,
        partition: ClassPartition,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if partition.classes() != catalog.len() {
            return Err(Error::InvalidArgument(format!(
                "partition covers {} classes, catalog has {}",
                partition.classes(),
                catalog.len()
            )));
        }
        let make = |m: Modality, d: usize| {
            ModalityEnsemble::init(
                m,
                d,
                catalog.embedding_dim(),
                config.modules,
                config.gamma,
                &config.architectures,
                config.seed,
            )
        };
        let ensemble_a = make(Modality::A, dim_a)?;
        let ensemble_b = make(Modality::B, dim_b)?;
        Self::assemble(ensemble_a, ensemble_b, catalog, partition, config, Vec::new())
    }

    fn assemble(
        ensemble_a: ModalityEnsemble,
        ensemble_b: ModalityEnsemble,
        catalog: ClassCatalog,
        partition: ClassPartition,
        config: TrainConfig,
        log: Vec<EpochLoss>,
    ) -> Result<Self> {
        let sim = |m| {
            fusion_similarity(
                &catalog,
                &partition,
                m,
                config.top_k,
                config.prune_scope,
                config.row_normalize,
            )
        };
        let s_a = sim(Modality::A)?;
        let s_b = sim(Modality::B)?;
        Ok(ModelState {
            ensemble_a,
            ensemble_b,
            catalog,
            partition,
            s_a,
            s_b,
            config,
            log,
        })
    }

    pub fn ensemble(&self, m: Modality) -> &ModalityEnsemble {
        match m {
            Modality::A => &self.ensemble_a,
            Modality::B => &self.ensemble_b,
        }
    }

    pub fn ensemble_mut(&mut self, m: Modality) -> &mut ModalityEnsemble {
        match m {
            Modality::A => &mut self.ensemble_a,
            Modality::B => &mut self.ensemble_b,
        }
    }

    pub fn similarity(&self, m: Modality) -> &SimilarityMatrix {
        match m {
            Modality::A => &self.s_a,
            Modality::B => &self.s_b,
        }
    }

    pub fn dim(&self, m: Modality) -> usize {
        self.ensemble(m).input_dim()
    }

    /// Same parameters with different inference-time settings; fusion
    /// matrices are rebuilt. Training-only fields of `config` are ignored.
    pub fn with_inference(&self, config: TrainConfig) -> Result<ModelState> {
        config.validate()?;
        Self::assemble(
            self.ensemble_a.clone(),
            self.ensemble_b.clone(),
            self.catalog.clone(),
            self.partition.clone(),
            config,
            self.log.clone(),
        )
    }

    pub fn bundles(&self, sample: &MultimodalSample) -> Result<PerModality<PredictionBundle>> {
        check_sample_dims(sample, self.dim(Modality::A), self.dim(Modality::B))?;
        let padded = pad_missing(sample, self.dim(Modality::A), self.dim(Modality::B));
        let bundle = |m: Modality| {
            if padded.present(m) {
                ensemble_predict(self.ensemble(m), padded.feature(m), &self.catalog)
            } else {
                absent_bundle(self.ensemble(m), &self.catalog)
            }
        };
        Ok(PerModality {
            a: bundle(Modality::A)?,
            b: bundle(Modality::B)?,
        })
    }
}

fn check_sample_dims(sample: &MultimodalSample, dim_a: usize, dim_b: usize) -> Result<()> {
    for (m, d) in [(Modality::A, dim_a), (Modality::B, dim_b)] {
        if let Some(f) = sample.feature(m) {
            if f.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "sample `{}` modality {m} has dim {}, model expects {d}",
                    sample.id,
                    f.len()
                )));
            }
        }
    }
    if !sample.has(Modality::A) && !sample.has(Modality::B) {
        return Err(Error::InvalidArgument(format!(
            "sample `{}` has no modality",
            sample.id
        )));
    }
    Ok(())
}

/// Anything that maps a sample to a fused decision.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict_sample(&self, sample: &MultimodalSample) -> Result<FusionDecision>;
}

/// Inference chain: pad, per-modality ensembles, uncertainty, fusion. The
/// ablation flags shorten the chain.
pub fn predict(model: &ModelState, sample: &MultimodalSample) -> Result<FusionDecision> {
    let bundles = model.bundles(sample)?;
    let cfg = &model.config;
    if !cfg.use_dmss {
        let half = |v: &[f64]| v.iter().map(|x| x / 2.0).collect::<Vec<_>>();
        return FusionDecision::assemble(
            FusionStrategy::Average,
            None,
            half(&bundles.a.mean_logits),
            half(&bundles.b.mean_logits),
        );
    }
    let report = assess(&bundles.a, &bundles.b)?;
    let mut dominant = report.dominant;
    if cfg.force_dominant_on_missing {
        match (sample.has(Modality::A), sample.has(Modality::B)) {
            (true, false) => dominant = Modality::A,
            (false, true) => dominant = Modality::B,
            _ => {}
        }
    }
    let aux = dominant.other();
    let lo_dom = bundles.get(dominant).mean_logits.clone();
    let decision = if cfg.use_csmf {
        let reweighted = similarity_reweight(model.similarity(aux), &bundles.get(aux).mean_logits)?;
        FusionDecision::assemble(FusionStrategy::Similarity, Some(dominant), lo_dom, reweighted)?
    } else {
        let zeros = vec![0.0; lo_dom.len()];
        FusionDecision::assemble(FusionStrategy::DominantOnly, Some(dominant), lo_dom, zeros)?
    };
    Ok(decision.with_uncertainty(report))
}

impl Predictor for ModelState {
    fn name(&self) -> String {
        self.config.label().to_string()
    }

    fn predict_sample(&self, sample: &MultimodalSample) -> Result<FusionDecision> {
        predict(self, sample)
    }
}

fn stream_matrix(ds: &MmhclDataset, m: Modality) -> Result<(Matrix, Vec<usize>)> {
    let samples = ds.train_stream(m);
    if let Some(s) = samples.iter().find(|s| Split::of_id(&s.id) != Some(Split::Train)) {
        return Err(Error::InvalidArgument(format!(
            "refusing to train on non-training sample `{}`",
            s.id
        )));
    }
    let dim = ds.dim(m);
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in &samples {
        data.extend_from_slice(s.feature(m).expect("filtered on presence"));
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((Matrix::from_vec(samples.len(), dim, data)?, labels))
}

const STREAM_SHUFFLE: u64 = 0x5348_5546;

/// Mini-batch schedule of one modality's training stream.
struct Stream {
    modality: Modality,
    x: Matrix,
    labels: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(ds: &MmhclDataset, m: Modality, seed: u64) -> Result<Self> {
        let (x, labels) = stream_matrix(ds, m)?;
        Ok(Stream {
            modality: m,
            x,
            labels,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE + m.index() as u64)),
        })
    }

    /// Shuffled batches for one epoch; the last short batch is kept.
    fn epoch_batches(&mut self, batch: usize) -> Vec<(Matrix, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(batch)
            .map(|idx| {
                let labels = idx.iter().map(|&i| self.labels[i]).collect();
                (self.x.select_rows(idx), labels)
            })
            .collect()
    }
}

struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    fn for_modules(adam: AdamConfig, modules: &[OsrsModule]) -> Self {
        Optimizer {
            states: modules.iter().map(|m| AdamState::new(adam, &m.mapper)).collect(),
        }
    }

    fn step(&mut self, ensemble: &mut ModalityEnsemble, grads: &[MlpGrads], exec: Execution) -> Result<()> {
        let mut work: Vec<_> = ensemble
            .modules_mut()
            .iter_mut()
            .zip(self.states.iter_mut())
            .zip(grads)
            .collect();
        exec.map_mut(&mut work, |((module, state), g)| state.step(&mut module.mapper, g))
            .into_iter()
            .collect()
    }
}

fn nonfinite(epoch: usize, batch: usize, m: Modality, loss: f64) -> Error {
    Error::Numeric(format!(
        "non-finite loss {loss} at epoch {epoch}, batch {batch}, modality {m}"
    ))
}

/// Alternating mini-batch training of both ensembles. Modality-A batches only
/// touch A's modules and vice versa.
pub fn train(ds: &MmhclDataset, catalog: &ClassCatalog, config: &TrainConfig) -> Result<ModelState> {
    if !config.use_osrs {
        return Err(Error::Config(
            "train needs use_osrs; the FC baseline has its own trainer".into(),
        ));
    }
    let mut model = ModelState::init(
        ds.dim_a,
        ds.dim_b,
        catalog.clone(),
        ds.partition.clone(),
        config.clone(),
    )?;
    let exec = config.execution;
    let mut streams = [
        Stream::new(ds, Modality::A, config.seed)?,
        Stream::new(ds, Modality::B, config.seed)?,
    ];
    let mut opts = Modality::BOTH.map(|m| Optimizer::for_modules(config.adam(), model.ensemble(m).modules()));

    for epoch in 0..config.epochs {
        let batches = streams.each_mut().map(|s| s.epoch_batches(config.batch_size));
        let mut sums = [0.0f64; 2];
        let rounds = batches[0].len().max(batches[1].len());
        for j in 0..rounds {
            for (s, stream) in streams.iter().enumerate() {
                let Some((x, labels)) = batches[s].get(j) else { continue };
                let m = stream.modality;
                let (loss, grads) = ensemble_batch_gradients(model.ensemble(m), catalog, x, labels, exec)?;
                if !loss.is_finite() {
                    return Err(nonfinite(epoch, j, m, loss));
                }
                sums[s] += loss * labels.len() as f64;
                opts[s]
                    .step(model.ensemble_mut(m), &grads, exec)
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {j}, modality {m}: {e}")))?;
            }
        }
        let mean = |s: usize| {
            let n = streams[s].labels.len();
            if n == 0 {
                0.0
            } else {
                sums[s] / n as f64
            }
        };
        let (loss_a, loss_b) = (mean(0), mean(1));
        log::debug!("epoch {epoch}: loss_A {loss_a:.6} loss_B {loss_b:.6}");
        model.log.push(EpochLoss {
            epoch,
            loss_a,
            loss_b,
            loss_total: loss_a + loss_b,
        });
    }
    Ok(model)
}

/// A single-modality ensemble trained on its own stream, used by the
/// confidence-max comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalModel {
    pub ensemble: ModalityEnsemble,
    pub catalog: ClassCatalog,
}

impl UnimodalModel {
    pub fn modality(&self) -> Modality {
        self.ensemble.modality()
    }

    pub fn predict_bundle(&self, x: &[f64]) -> Result<PredictionBundle> {
        ensemble_predict(&self.ensemble, x, &self.catalog)
    }
}

const STREAM_UNIMODAL: u64 = 0x554e_494d;

/// Trains one modality's ensemble alone, from its own initialization seed.
pub fn train_unimodal(
    ds: &MmhclDataset,
    catalog: &ClassCatalog,
    config: &TrainConfig,
    m: Modality,
) -> Result<UnimodalModel> {
    config.validate()?;
    let seed = derive_seed(config.seed, STREAM_UNIMODAL + m.index() as u64);
    let mut ensemble = ModalityEnsemble::init(
        m,
        ds.dim(m),
        catalog.embedding_dim(),
        config.modules,
        config.gamma,
        &config.architectures,
        seed,
    )?;
    let mut stream = Stream::new(ds, m, seed)?;
    let mut opt = Optimizer::for_modules(config.adam(), ensemble.modules());
    for epoch in 0..config.epochs {
        for (j, (x, labels)) in stream.epoch_batches(config.batch_size).iter().enumerate() {
            let (loss, grads) = ensemble_batch_gradients(&ensemble, catalog, x, labels, config.execution)?;
            if !loss.is_finite() {
                return Err(nonfinite(epoch, j, m, loss));
            }
            opt.step(&mut ensemble, &grads, config.execution)?;
        }
    }
    Ok(UnimodalModel {
        ensemble,
        catalog: catalog.clone(),
    })
}

/// Per-modality linear softmax classifiers over all classes, trained with
/// cross-entropy on each modality's seen classes only.
#[derive(Debug, Clone, PartialEq)]
pub struct FcBaselineState {
    pub head_a: MlpParams,
    pub head_b: MlpParams,
    pub classes: usize,
    pub log: Vec<EpochLoss>,
}

impl FcBaselineState {
    pub fn head(&self, m: Modality) -> &MlpParams {
        match m {
            Modality::A => &self.head_a,
            Modality::B => &self.head_b,
        }
    }

    pub fn logits(&self, m: Modality, x: &[f64]) -> Result<Vec<f64>> {
        self.head(m).forward_one(x)
    }
}

const STREAM_FC: u64 = 0x4643;

fn fc_batch_gradients(head: &MlpParams, x: &Matrix, labels: &[usize]) -> Result<(f64, MlpGrads)> {
    let (logits, cache) = head.forward(x)?;
    let rows = x.rows();
    let mut d = Matrix::zeros(rows, logits.cols());
    let mut loss = 0.0;
    for r in 0..rows {
        let p = softmax(logits.row(r))?;
        loss += ce(&p, labels[r]);
        for (c, v) in d.row_mut(r).iter_mut().enumerate() {
            let y = if c == labels[r] { 1.0 } else { 0.0 };
            *v = (p[c] - y) / rows as f64;
        }
    }
    Ok((loss / rows as f64, head.backward(&cache, &d)?))
}

pub fn train_fc_baseline(ds: &MmhclDataset, config: &TrainConfig) -> Result<FcBaselineState> {
    config.adam().validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be ≥ 1".into()));
    }
    let classes = ds.partition.classes();
    let mut heads = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_FC + 16 * m.index() as u64));
        heads.push(MlpParams::init(&[ds.dim(m), classes], &mut rng)?);
    }
    let mut streams = [
        Stream::new(ds, Modality::A, config.seed)?,
        Stream::new(ds, Modality::B, config.seed)?,
    ];
    let mut opts = [
        AdamState::new(config.adam(), &heads[0]),
        AdamState::new(config.adam(), &heads[1]),
    ];
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = streams.each_mut().map(|s| s.epoch_batches(config.batch_size));
        let mut sums = [0.0f64; 2];
        for j in 0..batches[0].len().max(batches[1].len()) {
            for s in 0..2 {
                let Some((x, labels)) = batches[s].get(j) else { continue };
                let (loss, grads) = fc_batch_gradients(&heads[s], x, labels)?;
                if !loss.is_finite() {
                    return Err(nonfinite(epoch, j, Modality::BOTH[s], loss));
                }
                sums[s] += loss * labels.len() as f64;
                opts[s].step(&mut heads[s], &grads)?;
            }
        }
        let mean = |s: usize| sums[s] / streams[s].labels.len().max(1) as f64;
        log.push(EpochLoss {
            epoch,
            loss_a: mean(0),
            loss_b: mean(1),
            loss_total: mean(0) + mean(1),
        });
    }
    let head_b = heads.pop().expect("two heads");
    let head_a = heads.pop().expect("two heads");
    Ok(FcBaselineState {
        head_a,
        head_b,
        classes,
        log,
    })
}

impl Predictor for FcBaselineState {
    fn name(&self) -> String {
        "B".into()
    }

    /// Mean of the present modalities' logits.
    fn predict_sample(&self, sample: &MultimodalSample) -> Result<FusionDecision> {
        check_sample_dims(sample, self.head_a.input_dim(), self.head_b.input_dim())?;
        let present: Vec<Vec<f64>> = Modality::BOTH
            .into_iter()
            .filter_map(|m| sample.feature(m).map(|x| self.logits(m, x)))
            .collect::<Result<_>>()?;
        let w = 1.0 / present.len() as f64;
        let scaled: Vec<Vec<f64>> = present.iter().map(|lo| lo.iter().map(|v| v * w).collect()).collect();
        let aux = scaled.get(1).cloned().unwrap_or_else(|| vec![0.0; self.classes]);
        FusionDecision::assemble(FusionStrategy::Average, None, scaled[0].clone(), aux)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMHCLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModuleShape {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    dim_a: usize,
    dim_b: usize,
    semantic_dim: usize,
    config: TrainConfig,
    class_names: Vec<String>,
    partition: ClassPartition,
    modules: PerModality<Vec<ModuleShape>>,
    log: Vec<EpochLoss>,
    blocks: Vec<BlockInfo>,
}

fn module_shape(m: &OsrsModule) -> ModuleShape {
    ModuleShape {
        dims: m.mapper.layer_dims(),
        activations: m.mapper.layers().iter().map(|l| l.activation).collect(),
        gamma: m.gamma,
    }
}

/// Serializes the model to the versioned container format.
pub fn checkpoint_bytes(model: &ModelState) -> Result<Vec<u8>> {
    let mut blocks = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for m in Modality::BOTH {
        for (i, module) in model.ensemble(m).modules().iter().enumerate() {
            for (l, layer) in module.mapper.layers().iter().enumerate() {
                blocks.push(BlockInfo {
                    name: format!("{m}/{i}/{l}/weight"),
                    len: layer.weight.as_slice().len(),
                });
                payload.extend_from_slice(layer.weight.as_slice());
                blocks.push(BlockInfo {
                    name: format!("{m}/{i}/{l}/bias"),
                    len: layer.bias.len(),
                });
                payload.extend_from_slice(&layer.bias);
            }
        }
    }
    blocks.push(BlockInfo {
        name: "catalog/embeddings".into(),
        len: model.catalog.embeddings().as_slice().len(),
    });
    payload.extend_from_slice(model.catalog.embeddings().as_slice());

    let header = CheckpointHeader {
        dim_a: model.dim(Modality::A),
        dim_b: model.dim(Modality::B),
        semantic_dim: model.catalog.embedding_dim(),
        config: model.config.clone(),
        class_names: model.catalog.names().to_vec(),
        partition: model.partition.clone(),
        modules: PerModality {
            a: model.ensemble_a.modules().iter().map(module_shape).collect(),
            b: model.ensemble_b.modules().iter().map(module_shape).collect(),
        },
        log: model.log.clone(),
        blocks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Corrupt(format!("{what} too large")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint: bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Corrupt("header length overflows".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;

    let mut blocks = header.blocks.iter();
    let mut next = |expect: &str, len: usize, r: &mut Reader| -> Result<Vec<f64>> {
        let b = blocks
            .next()
            .ok_or_else(|| Error::Corrupt(format!("missing block `{expect}`")))?;
        if b.name != expect || b.len != len {
            return Err(Error::Corrupt(format!(
                "block `{}` of {} values where `{expect}` of {len} was expected",
                b.name, b.len
            )));
        }
        r.floats(len, expect)
    };

    let mut ensembles = Vec::with_capacity(2);
    for m in Modality::BOTH {
        let mut modules = Vec::new();
        for (i, shape) in header.modules.get(m).iter().enumerate() {
            if shape.dims.len() != shape.activations.len() + 1 {
                return Err(Error::Corrupt(format!("module {m}/{i} shape is inconsistent")));
            }
            let mut layers = Vec::new();
            for (l, act) in shape.activations.iter().enumerate() {
                let (din, dout) = (shape.dims[l], shape.dims[l + 1]);
                let w = next(&format!("{m}/{i}/{l}/weight"), din * dout, &mut r)?;
                let b = next(&format!("{m}/{i}/{l}/bias"), dout, &mut r)?;
                layers.push(Dense {
                    weight: Matrix::from_vec(din, dout, w)?,
                    bias: b,
                    activation: *act,
                });
            }
            let mapper = MlpParams::from_layers(layers).map_err(|e| Error::Corrupt(e.to_string()))?;
            modules.push(OsrsModule::new(mapper, shape.gamma).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        ensembles.push(ModalityEnsemble::new(m, modules).map_err(|e| Error::Corrupt(e.to_string()))?);
    }
    let n = header.class_names.len();
    let emb = next("catalog/embeddings", n * header.semantic_dim, &mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last block",
            bytes.len() - r.pos
        )));
    }
    let catalog = ClassCatalog::new(header.class_names, Matrix::from_vec(n, header.semantic_dim, emb)?)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let ensemble_b = ensembles.pop().expect("two ensembles");
    let ensemble_a = ensembles.pop().expect("two ensembles");
    if ensemble_a.input_dim() != header.dim_a || ensemble_b.input_dim() != header.dim_b {
        return Err(Error::Corrupt("module input dims disagree with header".into()));
    }
    ModelState::assemble(
        ensemble_a,
        ensemble_b,
        catalog,
        header.partition,
        header.config,
        header.log,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Index of the most confident class of a probability vector with its probability.
pub fn confidence(probs: &[f64]) -> (usize, f64) {
    let i = argmax(probs);
    (i, probs[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, synthetic_catalog, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn tiny_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 6,
            semantic_dim: 8,
            dim_a: 5,
            dim_b: 7,
            train_per_class: 10,
            test_per_class: 3,
            seed,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            modules: 2,
            top_k: 3,
            architectures: vec![vec![], vec![6]],
            ..TrainConfig::default()
        }
    }

    fn tiny_setup(seed: u64) -> (MmhclDataset, ClassCatalog) {
        let spec = tiny_spec(seed);
        let cat = synthetic_catalog(&spec).unwrap();
        (synthesize(&spec, &cat).unwrap(), cat)
    }

    fn bundle(logits: Vec<Vec<f64>>) -> PredictionBundle {
        PredictionBundle::from_logits(logits, false).unwrap()
    }

    #[test]
    fn one_hot_predictions_give_zero_loss() {
        // softmax cannot be exactly one-hot, so build the bundle by hand
        let one_hot = PredictionBundle {
            logits: vec![vec![0.0; 3]; 2],
            probs: vec![vec![0.0, 1.0, 0.0]; 2],
            mean_logits: vec![0.0; 3],
            mean_probs: vec![0.0, 1.0, 0.0],
            degenerate: false,
        };
        let l = total_loss(&[one_hot.clone()], &[one_hot], &[1], &[1]).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn uniform_predictions_cost_two_ln_n() {
        let n = 7;
        let u = bundle(vec![vec![0.0; n]; 4]);
        let l = total_loss(&[u.clone(), u.clone()], &[u], &[0, 3], &[6]).unwrap();
        let ln_n = (n as f64).ln();
        assert_abs_diff_eq!(l.per_modality.a, 2.0 * ln_n, epsilon = 1e-12);
        assert_abs_diff_eq!(l.per_modality.b, 2.0 * ln_n, epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, 4.0 * ln_n, epsilon = 1e-12);
        assert!(total_loss(&[bundle(vec![vec![0.0; 2]; 2])], &[], &[2], &[]).is_err());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rand_bundle = |rng: &mut ChaCha8Rng| {
            bundle(
                (0..3)
                    .map(|_| (0..5).map(|_| rng.random_range(-5.0..5.0)).collect())
                    .collect(),
            )
        };
        let a: Vec<_> = (0..4).map(|_| rand_bundle(&mut rng)).collect();
        let b: Vec<_> = (0..3).map(|_| rand_bundle(&mut rng)).collect();
        let (la, lb) = (vec![0, 4, 2, 2], vec![1, 3, 0]);
        let got = total_loss(&a, &b, &la, &lb).unwrap();

        let scalar = |bs: &[PredictionBundle], ys: &[usize]| {
            let mut acc = 0.0;
            for (bd, &y) in bs.iter().zip(ys) {
                let mut per = 0.0;
                for lo in &bd.logits {
                    let z: f64 = lo.iter().map(|v| v.exp()).sum();
                    per += -(lo[y].exp() / z).ln();
                }
                let mean: Vec<f64> = (0..5)
                    .map(|c| bd.logits.iter().map(|lo| lo[c]).sum::<f64>() / 3.0)
                    .collect();
                let z: f64 = mean.iter().map(|v| v.exp()).sum();
                acc += per / 3.0 - (mean[y].exp() / z).ln();
            }
            acc / bs.len() as f64
        };
        assert_abs_diff_eq!(got.total, scalar(&a, &la) + scalar(&b, &lb), epsilon = 1e-12);
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let (ds, cat) = tiny_setup(1);
        let cfg = tiny_config();
        let model = ModelState::init(ds.dim_a, ds.dim_b, cat.clone(), ds.partition.clone(), cfg).unwrap();
        let (x, labels) = stream_matrix(&ds, Modality::A).unwrap();
        let x = x.select_rows(&[0, 5, 11, 17]);
        let labels = vec![labels[0], labels[5], labels[11], labels[17]];
        let ens = model.ensemble(Modality::A);
        let (loss, grads) = ensemble_batch_gradients(ens, &cat, &x, &labels, Execution::Sequential).unwrap();
        assert_abs_diff_eq!(
            loss,
            ensemble_batch_loss(ens, &cat, &x, &labels).unwrap(),
            epsilon = 1e-12
        );
        let h = 1e-5;
        for (i, g) in grads.iter().enumerate() {
            for (l, lg) in g.layers.iter().enumerate() {
                for j in (0..lg.weight.as_slice().len()).step_by(7) {
                    let mut plus = ens.clone();
                    plus.modules_mut()[i].mapper.layers_mut()[l].weight.as_mut_slice()[j] += h;
                    let mut minus = ens.clone();
                    minus.modules_mut()[i].mapper.layers_mut()[l].weight.as_mut_slice()[j] -= h;
                    let fd = (ensemble_batch_loss(&plus, &cat, &x, &labels).unwrap()
                        - ensemble_batch_loss(&minus, &cat, &x, &labels).unwrap())
                        / (2.0 * h);
                    let an = lg.weight.as_slice()[j];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                        "module {i} layer {l} w{j}: {fd} vs {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let (ds, cat) = tiny_setup(2);
        let model = ModelState::init(ds.dim_a, ds.dim_b, cat.clone(), ds.partition.clone(), tiny_config()).unwrap();
        let (x, labels) = stream_matrix(&ds, Modality::B).unwrap();
        let ens = model.ensemble(Modality::B);
        let s = ensemble_batch_gradients(ens, &cat, &x, &labels, Execution::Sequential).unwrap();
        let p = ensemble_batch_gradients(ens, &cat, &x, &labels, Execution::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (ds, cat) = tiny_setup(3);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let m = train(&ds, &cat, &cfg).unwrap();
        let init = ModelState::init(ds.dim_a, ds.dim_b, cat, ds.partition.clone(), cfg).unwrap();
        assert!(m == init);
        assert!(m.log.is_empty());
        assert!(predict(&m, &ds.test[0]).is_ok());
    }

    #[test]
    fn two_class_noiseless_loss_decreases() {
        let spec = SyntheticSpec {
            classes: 2,
            semantic_dim: 4,
            dim_a: 3,
            dim_b: 3,
            train_per_class: 8,
            test_per_class: 1,
            sigma_a: 0.0,
            sigma_b: 0.0,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            top_k: 2,
            ..tiny_config()
        };
        let m = train(&ds, &cat, &cfg).unwrap();
        assert_eq!(m.log.len(), 5);
        for w in m.log.windows(2) {
            assert!(w[1].loss_total < w[0].loss_total, "{:?}", m.log);
        }
    }

    #[test]
    fn training_is_deterministic_and_modalities_are_isolated() {
        let (ds, cat) = tiny_setup(5);
        let cfg = tiny_config();
        let a = train(&ds, &cat, &cfg).unwrap();
        let b = train(
            &ds,
            &cat,
            &TrainConfig {
                execution: Execution::Sequential,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert!(a.ensemble_a == b.ensemble_a && a.ensemble_b == b.ensemble_b && a.log == b.log);
        assert!(a == train(&ds, &cat, &cfg).unwrap());
        assert!(a.log.iter().all(|e| e.loss_total.is_finite()));

        // dropping every B sample leaves the B ensemble at its initialization
        let mut only_a = ds.clone();
        only_a.train.retain(|s| s.has(Modality::A));
        let m = train(&only_a, &cat, &cfg).unwrap();
        let init = ModelState::init(ds.dim_a, ds.dim_b, cat, ds.partition.clone(), cfg).unwrap();
        assert!(m.ensemble_b == init.ensemble_b);
        assert!(m.ensemble_a != init.ensemble_a);
        assert!(m.ensemble_a == a.ensemble_a);
    }

    #[test]
    fn refuses_test_samples_in_training() {
        let (mut ds, cat) = tiny_setup(6);
        ds.train[0].id = "test-leak".into();
        let err = train(&ds, &cat, &tiny_config()).unwrap_err();
        assert!(err.to_string().contains("test-leak"));
    }

    #[test]
    fn identity_similarity_prediction_adds_logits() {
        let n = 4;
        let cat = ClassCatalog::new((0..n).map(|i| format!("c{i}")).collect(), Matrix::identity(n)).unwrap();
        let p = ClassPartition::new(n, vec![0, 1], vec![2, 3]).unwrap();
        for k in 1..=n {
            let cfg = TrainConfig {
                top_k: k,
                ..tiny_config()
            };
            let m = ModelState::init(3, 3, cat.clone(), p.clone(), cfg).unwrap();
            let mut m = m;
            m.ensemble_b = ModalityEnsemble::new(Modality::B, m.ensemble_a.modules().to_vec()).unwrap();
            let s = MultimodalSample {
                id: "test-0".into(),
                label: 0,
                feat_a: Some(vec![0.3, -1.0, 0.5]),
                feat_b: Some(vec![1.0, 0.2, 0.1]),
            };
            let d = predict(&m, &s).unwrap();
            let b = m.bundles(&s).unwrap();
            for c in 0..n {
                assert_eq!(d.lo_fused[c], b.a.mean_logits[c] + b.b.mean_logits[c]);
            }
        }
    }

    #[test]
    fn ablation_paths() {
        let (ds, cat) = tiny_setup(7);
        let model = train(&ds, &cat, &tiny_config()).unwrap();
        let avg = model
            .with_inference(TrainConfig {
                use_dmss: false,
                use_csmf: false,
                ..model.config.clone()
            })
            .unwrap();
        let dom = model
            .with_inference(TrainConfig {
                use_csmf: false,
                ..model.config.clone()
            })
            .unwrap();
        for s in ds.test.iter().take(12) {
            let b = model.bundles(s).unwrap();
            let d = predict(&avg, s).unwrap();
            for c in 0..cat.len() {
                let oracle = (b.a.mean_logits[c] + b.b.mean_logits[c]) / 2.0;
                assert_abs_diff_eq!(d.lo_fused[c], oracle, epsilon = 1e-12);
            }
            let d = predict(&dom, s).unwrap();
            let report = assess(&b.a, &b.b).unwrap();
            assert_eq!(d.lo_fused, b.get(report.dominant).mean_logits);
            let full = predict(&model, s).unwrap();
            assert_eq!(full.uncertainty.unwrap(), report);
        }
    }

    #[test]
    fn unimodal_unseen_sample_goes_through_manual_trace() {
        let (ds, cat) = tiny_setup(8);
        let model = train(&ds, &cat, &tiny_config()).unwrap();
        let s = ds
            .test
            .iter()
            .find(|s| s.has(Modality::A) && !s.has(Modality::B) && !ds.partition.is_seen(Modality::A, s.label))
            .unwrap();
        let d = predict(&model, s).unwrap();
        assert_eq!(d.probs.len(), cat.len());
        // manual chain
        let bundle_a = ensemble_predict(&model.ensemble_a, s.feat_a.as_ref().unwrap(), &cat).unwrap();
        let bundle_b = absent_bundle(&model.ensemble_b, &cat).unwrap();
        assert!(bundle_b.degenerate);
        assert!(bundle_b.mean_logits.iter().all(|&v| v == 0.0));
        let report = assess(&bundle_a, &bundle_b).unwrap();
        let manual = crate::csmf::fuse(
            &bundle_a.mean_logits,
            &bundle_b.mean_logits,
            &model.s_a,
            &model.s_b,
            report.u.a,
            report.u.b,
        )
        .unwrap();
        assert_eq!(d.lo_fused, manual.lo_fused);
        assert_eq!(d.predicted_class, manual.predicted_class);

        let forced = model
            .with_inference(TrainConfig {
                force_dominant_on_missing: true,
                ..model.config.clone()
            })
            .unwrap();
        let d = predict(&forced, s).unwrap();
        assert_eq!(d.dominant, Some(Modality::A));
        assert_eq!(d.lo_fused, bundle_a.mean_logits);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                modules: 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                use_dmss: false,
                ..TrainConfig::default()
            },
            TrainConfig {
                use_osrs: false,
                use_csmf: false,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.learning_rate, 5e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (ds, cat) = tiny_setup(9);
        let model = train(&ds, &cat, &tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back == model);
        for s in &ds.test {
            assert_eq!(predict(&back, s).unwrap(), predict(&model, s).unwrap());
        }
        assert_eq!(checkpoint_bytes(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_errors() {
        let (ds, cat) = tiny_setup(10);
        let model = ModelState::init(ds.dim_a, ds.dim_b, cat, ds.partition.clone(), tiny_config()).unwrap();
        let bytes = checkpoint_bytes(&model).unwrap();
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
        assert!(matches!(checkpoint_from_bytes(&bytes[..10]), Err(Error::Corrupt(_))));
        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = checkpoint_from_bytes(&bumped).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('1') && msg.contains('7'), "{msg}");
        assert!(matches!(err, Error::Version { expected: 1, found: 7 }));
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&junk), Err(Error::Corrupt(_))));
    }

    #[test]
    fn fc_baseline_behaviour() {
        let spec = SyntheticSpec {
            sigma_a: 0.05,
            sigma_b: 0.05,
            train_per_class: 30,
            ..tiny_spec(11)
        };
        let cat = synthetic_catalog(&spec).unwrap();
        let ds = synthesize(&spec, &cat).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            ..tiny_config()
        };
        let fc = train_fc_baseline(&ds, &cfg).unwrap();
        assert!(fc == train_fc_baseline(&ds, &cfg).unwrap());
        assert_eq!(fc.head_a.output_dim(), 6);
        let acc = |seen: bool| {
            let picked: Vec<_> = ds
                .test
                .iter()
                .filter(|s| s.has(Modality::A) && !s.has(Modality::B))
                .filter(|s| ds.partition.is_seen(Modality::A, s.label) == seen)
                .collect();
            let hits = picked
                .iter()
                .filter(|s| fc.predict_sample(s).unwrap().predicted_class == s.label)
                .count();
            hits as f64 / picked.len() as f64
        };
        assert!(acc(true) > 0.9, "seen accuracy {}", acc(true));
        assert!(acc(false) <= 1.0 / 6.0, "unseen accuracy {}", acc(false));
    }

    #[test]
    fn loss_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_loss_log(
            &[EpochLoss {
                epoch: 0,
                loss_a: 1.0,
                loss_b: 2.0,
                loss_total: 3.0,
            }],
            &p,
        )
        .unwrap();
        assert_eq!(
            fs::read_to_string(p).unwrap(),
            "epoch,loss_A,loss_B,loss_total\n0,1,2,3\n"
        );
    }
}
