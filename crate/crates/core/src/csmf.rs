//! Similarity-guided fusion of the two modalities' logits.

use serde::{Deserialize, Serialize};

use crate::dmss::{select_dominant, UncertaintyReport};
use crate::numerics::{argmax, softmax};
use crate::semantic_space::SimilarityMatrix;
use crate::{Error, Modality, Result};

/// `S · lo`.
pub fn similarity_reweight(s: &SimilarityMatrix, lo: &[f64]) -> Result<Vec<f64>> {
    s.values().mul_vec(lo)
}

/// How the fused logits were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Dominant logits plus similarity-reweighted auxiliary logits.
    Similarity,
    /// Dominant modality's logits alone.
    DominantOnly,
    /// Mean of the two modalities' logits.
    Average,
    /// Prediction of the more confident of two independent unimodal models.
    ConfidenceMax,
}

/// Outcome of fusing one sample.
///
/// `lo_fused = lo_dom + lo_aux_reweighted` holds for every strategy: averaging
/// stores each half in the two slots, dominant-only stores zeros as the
/// auxiliary term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub strategy: FusionStrategy,
    pub dominant: Option<Modality>,
    pub lo_dom: Vec<f64>,
    pub lo_aux_reweighted: Vec<f64>,
    pub lo_fused: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    pub uncertainty: Option<UncertaintyReport>,
}

impl FusionDecision {
    pub(crate) fn assemble(
        strategy: FusionStrategy,
        dominant: Option<Modality>,
        lo_dom: Vec<f64>,
        lo_aux_reweighted: Vec<f64>,
    ) -> Result<Self> {
        if lo_dom.len() != lo_aux_reweighted.len() {
            return Err(Error::InvalidArgument(format!(
                "dominant logits have {} classes, auxiliary {}",
                lo_dom.len(),
                lo_aux_reweighted.len()
            )));
        }
        let lo_fused: Vec<f64> = lo_dom.iter().zip(&lo_aux_reweighted).map(|(a, b)| a + b).collect();
        let probs = softmax(&lo_fused)?;
        let predicted_class = argmax(&lo_fused);
        Ok(FusionDecision {
            strategy,
            dominant,
            lo_dom,
            lo_aux_reweighted,
            lo_fused,
            probs,
            predicted_class,
            uncertainty: None,
        })
    }

    pub fn with_uncertainty(mut self, report: UncertaintyReport) -> Self {
        self.uncertainty = Some(report);
        self
    }
}

/// `lo = lo^A + S^B·lo^B` when `u^A < u^B`, otherwise `lo = lo^B + S^A·lo^A`.
pub fn fuse(
    lo_a: &[f64],
    lo_b: &[f64],
    s_a: &SimilarityMatrix,
    s_b: &SimilarityMatrix,
    u_a: f64,
    u_b: f64,
) -> Result<FusionDecision> {
    let n = lo_a.len();
    if lo_b.len() != n || s_a.len() != n || s_b.len() != n {
        return Err(Error::InvalidArgument(format!(
            "fusion inputs disagree on class count: lo^A {n}, lo^B {}, S^A {}, S^B {}",
            lo_b.len(),
            s_a.len(),
            s_b.len()
        )));
    }
    let dominant = select_dominant(u_a, u_b)?.modality;
    let (lo_dom, aux) = match dominant {
        Modality::A => (lo_a.to_vec(), similarity_reweight(s_b, lo_b)?),
        Modality::B => (lo_b.to_vec(), similarity_reweight(s_a, lo_a)?),
    };
    FusionDecision::assemble(FusionStrategy::Similarity, Some(dominant), lo_dom, aux)
}

/// Fusion from a full uncertainty report; attaches the report to the decision.
pub fn fuse_with_report(
    lo_a: &[f64],
    lo_b: &[f64],
    s_a: &SimilarityMatrix,
    s_b: &SimilarityMatrix,
    report: UncertaintyReport,
) -> Result<FusionDecision> {
    Ok(fuse(lo_a, lo_b, s_a, s_b, report.u.a, report.u.b)?.with_uncertainty(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::semantic_space::{class_similarity, prune_topk, ClassCatalog};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_matrix(Matrix::from_rows(rows).unwrap(), Some(rows.len())).unwrap()
    }

    fn random_pruned(n: usize, k: usize, rng: &mut ChaCha8Rng) -> SimilarityMatrix {
        let data = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cat = ClassCatalog::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            Matrix::from_vec(n, 4, data).unwrap(),
        )
        .unwrap();
        prune_topk(&class_similarity(&cat), k).unwrap()
    }

    #[test]
    fn reweight_cases() {
        let id = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(similarity_reweight(&id, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let s = sim(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert_eq!(similarity_reweight(&s, &[2.0, 0.0]).unwrap(), vec![2.0, 1.0]);
        assert!(similarity_reweight(&s, &[1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k1 = random_pruned(5, 1, &mut rng);
        let lo = [0.3, -2.0, 1.5, 0.0, 4.0];
        assert_eq!(similarity_reweight(&k1, &lo).unwrap(), lo.to_vec());
    }

    #[test]
    fn fuse_arithmetic() {
        let s_b = sim(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let s_a = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = fuse(&[1.0, 3.0], &[2.0, 0.0], &s_a, &s_b, 0.6, 1.4).unwrap();
        assert_eq!(d.dominant, Some(Modality::A));
        assert_eq!(d.lo_fused, vec![3.0, 4.0]);
        assert_eq!(d.predicted_class, 1);

        // swapping both the inputs and the uncertainties swaps the roles exactly
        let swapped = fuse(&[2.0, 0.0], &[1.0, 3.0], &s_b, &s_a, 1.4, 0.6).unwrap();
        assert_eq!(swapped.dominant, Some(Modality::B));
        assert_eq!(swapped.lo_fused, d.lo_fused);
        assert_eq!(swapped.lo_aux_reweighted, d.lo_aux_reweighted);
    }

    /// Straight transcription of the case split, sharing nothing with `fuse`.
    fn oracle(lo_a: &[f64], lo_b: &[f64], s_a: &Matrix, s_b: &Matrix, u_a: f64, u_b: f64) -> Vec<f64> {
        let n = lo_a.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            if u_a < u_b {
                for j in 0..n {
                    acc += s_b.get(i, j) * lo_b[j];
                }
                out[i] = lo_a[i] + acc;
            } else {
                for j in 0..n {
                    acc += s_a.get(i, j) * lo_a[j];
                }
                out[i] = lo_b[i] + acc;
            }
        }
        out
    }

    #[test]
    fn fuse_matches_oracle_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s_a = random_pruned(6, 3, &mut rng);
        let s_b = random_pruned(6, 2, &mut rng);
        let lo_a: Vec<f64> = (0..6).map(|_| rng.random_range(-25.0..25.0)).collect();
        let lo_b: Vec<f64> = (0..6).map(|_| rng.random_range(-25.0..25.0)).collect();
        for (ua, ub) in [(0.7, 1.3), (1.3, 0.7)] {
            let d = fuse(&lo_a, &lo_b, &s_a, &s_b, ua, ub).unwrap();
            let o = oracle(&lo_a, &lo_b, s_a.values(), s_b.values(), ua, ub);
            for (x, y) in d.lo_fused.iter().zip(&o) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn decision_invariants() {
        let d = FusionDecision::assemble(FusionStrategy::Average, None, vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
        assert_eq!(d.lo_fused, vec![1.5, 1.0]);
        assert_eq!(d.predicted_class, 0);
        assert_abs_diff_eq!(d.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn identity_similarity_reduces_to_addition(
            lo_a in prop::collection::vec(-25.0f64..25.0, 4),
            lo_b in prop::collection::vec(-25.0f64..25.0, 4),
            ua in 0.0f64..2.0,
            k in 1usize..5,
        ) {
            let cat = ClassCatalog::new((0..4).map(|i| format!("c{i}")).collect(), Matrix::identity(4)).unwrap();
            let s = prune_topk(&class_similarity(&cat), k).unwrap();
            let d = fuse(&lo_a, &lo_b, &s, &s, ua, 2.0 - ua).unwrap();
            for i in 0..4 {
                prop_assert_eq!(d.lo_fused[i], lo_a[i] + lo_b[i]);
            }
        }

        #[test]
        fn depends_only_on_comparison(
            seed in 0u64..500,
            ua in 0.01f64..2.0,
            ub in 0.01f64..2.0,
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s_a = random_pruned(5, 3, &mut rng);
            let s_b = random_pruned(5, 3, &mut rng);
            let lo_a: Vec<f64> = (0..5).map(|_| rng.random_range(-25.0..25.0)).collect();
            let lo_b: Vec<f64> = (0..5).map(|_| rng.random_range(-25.0..25.0)).collect();
            let d1 = fuse(&lo_a, &lo_b, &s_a, &s_b, ua, ub).unwrap();
            let d2 = fuse(&lo_a, &lo_b, &s_a, &s_b, ua * scale, ub * scale).unwrap();
            prop_assert_eq!(&d1.lo_fused, &d2.lo_fused);
            prop_assert_eq!(d1.dominant, d2.dominant);
            let shifted: Vec<f64> = d1.lo_fused.iter().map(|v| v + shift).collect();
            prop_assert_eq!(argmax(&shifted), d1.predicted_class);
        }
    }
}
