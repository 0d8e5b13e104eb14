//! Semantic mappers and scaled-cosine classification.
//!
//! Each [`OsrsModule`] maps a modality feature vector into the class-embedding
//! space and scores every class by `γ² · cos(ŝ, c_i)`. Because scores are
//! defined against all class embeddings, classes a modality never saw during
//! training still receive a meaningful score. A [`ModalityEnsemble`] groups
//! `K` modules with different architectures for one modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, softmax, MlpParams};
use crate::semantic_space::ClassCatalog;
use crate::{Error, Modality, Result};

/// Hidden-layer widths of the default four-module ensemble: linear, 256, 512,
/// and 512→256. Larger ensembles cycle through this list.
pub fn default_architectures() -> Vec<Vec<usize>> {
    vec![vec![], vec![256], vec![512], vec![512, 256]]
}

/// SplitMix64 step; derives independent, reproducible seeds from a base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsrsModule {
    pub mapper: MlpParams,
    pub gamma: f64,
}

impl OsrsModule {
    pub fn new(mapper: MlpParams, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(OsrsModule { mapper, gamma })
    }

    pub fn input_dim(&self) -> usize {
        self.mapper.input_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.mapper.output_dim()
    }
}

/// `ŝ = mapper(x)`.
pub fn map_to_semantic(module: &OsrsModule, x: &[f64]) -> Result<Vec<f64>> {
    module.mapper.forward_one(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineLogits {
    pub logits: Vec<f64>,
    /// Set when `ŝ` had zero norm; the logits are then all zero.
    pub degenerate: bool,
}

/// `lo_i = γ² · ŝ·c_i / (‖ŝ‖‖c_i‖)` for every class in the catalog.
///
/// A zero `ŝ` (for instance from a zero-padded missing modality) yields all-zero
/// logits flagged as degenerate instead of an error.
pub fn scaled_cosine_logits(s_hat: &[f64], catalog: &ClassCatalog, gamma: f64) -> Result<CosineLogits> {
    if s_hat.len() != catalog.embedding_dim() {
        return Err(Error::InvalidArgument(format!(
            "semantic vector has dim {}, catalog embeddings have dim {}",
            s_hat.len(),
            catalog.embedding_dim()
        )));
    }
    let n = norm(s_hat);
    if n == 0.0 {
        return Ok(CosineLogits {
            logits: vec![0.0; catalog.len()],
            degenerate: true,
        });
    }
    if !n.is_finite() {
        return Err(Error::Numeric("semantic vector is not finite".into()));
    }
    let scale = gamma * gamma;
    let logits = catalog
        .unit_embeddings()
        .row_iter()
        .map(|c| scale * (dot(s_hat, c) / n).clamp(-1.0, 1.0))
        .collect();
    Ok(CosineLogits {
        logits,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEnsemble {
    modality: Modality,
    modules: Vec<OsrsModule>,
}

impl ModalityEnsemble {
    pub fn new(modality: Modality, modules: Vec<OsrsModule>) -> Result<Self> {
        if modules.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 modules for the entropy spread to be defined, got {}",
                modules.len()
            )));
        }
        let (d_in, d_s) = (modules[0].input_dim(), modules[0].semantic_dim());
        if let Some(i) = modules
            .iter()
            .position(|m| m.input_dim() != d_in || m.semantic_dim() != d_s)
        {
            return Err(Error::InvalidArgument(format!(
                "module {i} of modality {modality} has dims {}→{}, expected {d_in}→{d_s}",
                modules[i].input_dim(),
                modules[i].semantic_dim()
            )));
        }
        Ok(ModalityEnsemble { modality, modules })
    }

    /// Randomly initialized ensemble. Module `i` uses `architectures[i % len]`
    /// as hidden widths and its own seed stream.
    pub fn init(
        modality: Modality,
        input_dim: usize,
        semantic_dim: usize,
        k: usize,
        gamma: f64,
        architectures: &[Vec<usize>],
        seed: u64,
    ) -> Result<Self> {
        if architectures.is_empty() {
            return Err(Error::Config("no mapper architectures given".into()));
        }
        let modules = (0..k)
            .map(|i| {
                let mut dims = vec![input_dim];
                dims.extend(&architectures[i % architectures.len()]);
                dims.push(semantic_dim);
                let stream = (modality.index() as u64) << 32 | i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
                OsrsModule::new(MlpParams::init(&dims, &mut rng)?, gamma)
            })
            .collect::<Result<Vec<_>>>()?;
        ModalityEnsemble::new(modality, modules)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn modules(&self) -> &[OsrsModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [OsrsModule] {
        &mut self.modules
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.modules[0].input_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.modules[0].semantic_dim()
    }
}

/// Outputs of every module of an ensemble for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// Per-module logits `lo_i`.
    pub logits: Vec<Vec<f64>>,
    /// Per-module probabilities `softmax(lo_i)`.
    pub probs: Vec<Vec<f64>>,
    /// Mean of the module logits.
    pub mean_logits: Vec<f64>,
    /// `softmax(mean_logits)`.
    pub mean_probs: Vec<f64>,
    /// True when every module saw a zero-norm semantic vector.
    pub degenerate: bool,
}

impl PredictionBundle {
    /// Assembles a bundle from per-module logits.
    pub fn from_logits(logits: Vec<Vec<f64>>, degenerate: bool) -> Result<Self> {
        let k = logits.len();
        if k == 0 {
            return Err(Error::InvalidArgument("bundle needs at least one module".into()));
        }
        let n = logits[0].len();
        let mut mean_logits = vec![0.0; n];
        for lo in &logits {
            if lo.len() != n {
                return Err(Error::InvalidArgument("module logits differ in length".into()));
            }
            for (m, v) in mean_logits.iter_mut().zip(lo) {
                *m += v;
            }
        }
        for m in &mut mean_logits {
            *m /= k as f64;
        }
        let probs = logits.iter().map(|lo| softmax(lo)).collect::<Result<Vec<_>>>()?;
        let mean_probs = softmax(&mean_logits)?;
        Ok(PredictionBundle {
            logits,
            probs,
            mean_logits,
            mean_probs,
            degenerate,
        })
    }

    pub fn class_count(&self) -> usize {
        self.mean_logits.len()
    }
}

pub fn ensemble_predict(ensemble: &ModalityEnsemble, x: &[f64], catalog: &ClassCatalog) -> Result<PredictionBundle> {
    if x.len() != ensemble.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "modality {} input has dim {}, ensemble expects {}",
            ensemble.modality(),
            x.len(),
            ensemble.input_dim()
        )));
    }
    let mut degenerate = true;
    let mut logits = Vec::with_capacity(ensemble.len());
    for module in ensemble.modules() {
        let s_hat = map_to_semantic(module, x)?;
        let lo = scaled_cosine_logits(&s_hat, catalog, module.gamma)?;
        degenerate &= lo.degenerate;
        logits.push(lo.logits);
    }
    PredictionBundle::from_logits(logits, degenerate)
}

/// Bundle for a modality that is absent from the sample. The zero-padded input
/// is treated as a zero semantic vector, so every module takes the degenerate
/// zero-norm path of [`scaled_cosine_logits`].
pub fn absent_bundle(ensemble: &ModalityEnsemble, catalog: &ClassCatalog) -> Result<PredictionBundle> {
    let zero = vec![0.0; ensemble.semantic_dim()];
    let logits = ensemble
        .modules()
        .iter()
        .map(|m| scaled_cosine_logits(&zero, catalog, m.gamma).map(|lo| lo.logits))
        .collect::<Result<Vec<_>>>()?;
    PredictionBundle::from_logits(logits, true)
}
