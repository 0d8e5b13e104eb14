//! Dominant-modality selection from ensemble entropy statistics.
//!
//! For each modality the ensemble yields `K` distributions. The spread of their
//! entropies measures intra-modality disagreement; the entropy of the
//! mean-logit distribution measures how uncertain the modality is overall.
//! Both are normalized across the two modalities and summed, so
//! `u^A + u^B = 2` always, and the modality with the lower `u` dominates.

use serde::{Deserialize, Serialize};

use crate::numerics::entropy;
use crate::osrs::PredictionBundle;
use crate::{Error, Modality, Result};

/// Population standard deviation of the entropies of `K ≥ 2` distributions.
pub fn entropy_spread(probs: &[Vec<f64>]) -> Result<f64> {
    let h = module_entropies(probs)?;
    Ok(spread_of(&h))
}

fn module_entropies(probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy spread needs at least 2 distributions, got {}",
            probs.len()
        )));
    }
    probs.iter().map(|p| entropy(p)).collect()
}

fn spread_of(h: &[f64]) -> f64 {
    let k = h.len() as f64;
    let mean = h.iter().sum::<f64>() / k;
    (h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt()
}

/// A quantity split between the two modalities, summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub a: f64,
    pub b: f64,
    /// Both inputs were zero; the share defaulted to 0.5/0.5.
    pub degenerate: bool,
}

impl Share {
    fn of(x_a: f64, x_b: f64) -> Result<Share> {
        if !(x_a >= 0.0 && x_b >= 0.0 && x_a.is_finite() && x_b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "shares need finite non-negative inputs, got {x_a} and {x_b}"
            )));
        }
        let total = x_a + x_b;
        if total == 0.0 {
            return Ok(Share {
                a: 0.5,
                b: 0.5,
                degenerate: true,
            });
        }
        let a = x_a / total;
        Ok(Share {
            a,
            b: 1.0 - a,
            degenerate: false,
        })
    }

    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::A => self.a,
            Modality::B => self.b,
        }
    }
}

/// `Inc* = e* / (e^A + e^B)`.
pub fn intra_inconsistency(spread_a: f64, spread_b: f64) -> Result<Share> {
    Share::of(spread_a, spread_b)
}

/// `dif* = H(p*) / (H(p^A) + H(p^B))` over the mean-logit distributions.
pub fn inter_difference(p_a: &[f64], p_b: &[f64]) -> Result<Share> {
    if p_a.len() != p_b.len() {
        return Err(Error::InvalidArgument(format!(
            "distributions over {} and {} classes",
            p_a.len(),
            p_b.len()
        )));
    }
    Share::of(entropy(p_a)?, entropy(p_b)?)
}

/// `u* = Inc* + dif*`.
pub fn modality_uncertainty(inc: f64, dif: f64) -> f64 {
    inc + dif
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dominance {
    pub modality: Modality,
    pub tie: bool,
}

/// A if `u_a < u_b`, B if `u_a > u_b`, A on an exact tie.
pub fn select_dominant(u_a: f64, u_b: f64) -> Result<Dominance> {
    if !u_a.is_finite() || !u_b.is_finite() {
        return Err(Error::Numeric(format!("non-finite uncertainty ({u_a}, {u_b})")));
    }
    Ok(if u_a < u_b {
        Dominance {
            modality: Modality::A,
            tie: false,
        }
    } else if u_a > u_b {
        Dominance {
            modality: Modality::B,
            tie: false,
        }
    } else {
        Dominance {
            modality: Modality::A,
            tie: true,
        }
    })
}

/// A value per modality, serialized as `{"a": .., "b": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub a: T,
    pub b: T,
}

impl<T> PerModality<T> {
    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DegenerateFlags {
    /// Both entropy spreads were zero.
    pub spread: bool,
    /// Both mean-logit entropies were zero.
    pub entropy: bool,
    /// `u^A == u^B`; A was chosen by convention.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub h_modules: PerModality<Vec<f64>>,
    pub h_mean: PerModality<f64>,
    pub spread: PerModality<f64>,
    pub inc: PerModality<f64>,
    pub dif: PerModality<f64>,
    pub u: PerModality<f64>,
    pub dominant: Modality,
    pub degenerate_flags: DegenerateFlags,
}

/// Runs the full uncertainty estimate for one sample.
pub fn assess(bundle_a: &PredictionBundle, bundle_b: &PredictionBundle) -> Result<UncertaintyReport> {
    let h_a = module_entropies(&bundle_a.probs)?;
    let h_b = module_entropies(&bundle_b.probs)?;
    let (e_a, e_b) = (spread_of(&h_a), spread_of(&h_b));
    let inc = intra_inconsistency(e_a, e_b)?;
    let dif = inter_difference(&bundle_a.mean_probs, &bundle_b.mean_probs)?;
    let u_a = modality_uncertainty(inc.a, dif.a);
    let u_b = modality_uncertainty(inc.b, dif.b);
    let dom = select_dominant(u_a, u_b)?;
    let mean = |h: &[f64]| h.iter().sum::<f64>() / h.len() as f64;
    Ok(UncertaintyReport {
        h_mean: PerModality {
            a: mean(&h_a),
            b: mean(&h_b),
        },
        h_modules: PerModality { a: h_a, b: h_b },
        spread: PerModality { a: e_a, b: e_b },
        inc: PerModality { a: inc.a, b: inc.b },
        dif: PerModality { a: dif.a, b: dif.b },
        u: PerModality { a: u_a, b: u_b },
        dominant: dom.modality,
        degenerate_flags: DegenerateFlags {
            spread: inc.degenerate,
            entropy: dif.degenerate,
            tie: dom.tie,
        },
    })
}
