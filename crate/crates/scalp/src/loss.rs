//! Training objectives: per-class binary cross-entropy, its batch sum, the
//! patient-contrastive loss, and the weighted combination of the two.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Debug)]
pub struct LossConfig {
    /// Weight on the classification term; the contrastive term gets `1 - lambda`.
    pub lambda: f64,
    /// Temperature dividing similarities before exponentiation.
    pub temperature: f64,
    /// Include the positive pair in the softmax denominator. The literal
    /// variant (negatives only) is kept behind this flag; it is unbounded
    /// below and mostly useful for comparison.
    pub include_positive_in_denominator: bool,
    /// Probabilities are clamped to `[eps, 1 - eps]` before taking logs.
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.80,
            temperature: 0.5,
            include_positive_in_denominator: true,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(format!("probability clamp {} unusable", self.prob_clamp)));
        }
        Ok(())
    }
}

/// Binary cross-entropy of a single probability against a 0/1 label, with
/// the probability clamped to `[eps, 1 - eps]`.
pub fn bce_class(p: f64, y: u8, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    let y = f64::from(y);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Graph version of the summed binary cross-entropy: probabilities and 0/1
/// labels share a shape, the result sums the per-element losses over the
/// whole batch and all classes.
pub fn bce_total(probs: &Var, labels: &Var, eps: f64) -> Result<Var> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            detail: format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape()),
        });
    }
    let p = probs.clamp(eps, 1.0 - eps);
    let one_minus_p = p.mul_const(-1.0).add_const(1.0);
    let one_minus_y = labels.mul_const(-1.0).add_const(1.0);
    let pos = labels.mul(&p.log())?;
    let neg = one_minus_y.mul(&one_minus_p.log())?;
    Ok(pos.add(&neg)?.sum_all().mul_const(-1.0))
}

/// Cosine similarity of two equally shaped vectors. Errors on a zero vector.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            detail: format!("lengths {} vs {}", u.len(), v.len()),
        });
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Data("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot / (nu * nv))
}

/// Graph cosine similarity: both operands are normalized on the tape, so the
/// value is invariant to positive rescaling of either input.
pub fn cosine_sim_var(u: &Var, v: &Var) -> Result<Var> {
    u.l2_normalize().dot(&v.l2_normalize())
}

/// One query's contrastive loss against its positive key and negative keys.
///
/// With `s+ = sim(q, pos)/tau` and `s_i = sim(q, neg_i)/tau` this is
/// `-log(exp(s+) / Z)` where `Z` sums `exp(s_i)` over the negatives, plus
/// `exp(s+)` itself in the default denominator mode. The similarities are
/// shifted by their (detached) maximum before exponentiation, which changes
/// nothing mathematically but keeps extreme temperatures finite.
pub fn contrastive_pair_loss(
    query: &Var,
    positive: &Var,
    negatives: &[Var],
    config: &LossConfig,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Data("contrastive loss needs at least one negative key".into()));
    }
    config.validate()?;
    let inv_tau = 1.0 / config.temperature;
    let s_pos = cosine_sim_var(query, positive)?.mul_const(inv_tau);
    let s_negs: Vec<Var> = negatives
        .iter()
        .map(|n| Ok(cosine_sim_var(query, n)?.mul_const(inv_tau)))
        .collect::<Result<_>>()?;

    let mut shift = s_pos.item();
    for s in &s_negs {
        shift = shift.max(s.item());
    }

    let mut z = if config.include_positive_in_denominator {
        Some(s_pos.add_const(-shift).exp())
    } else {
        None
    };
    for s in &s_negs {
        let e = s.add_const(-shift).exp();
        z = Some(match z {
            Some(acc) => acc.add(&e)?,
            None => e,
        });
    }
    let log_z = z.expect("at least one denominator term").log();
    // -(s+ - shift) + log Z
    s_pos.add_const(-shift).mul_const(-1.0).add(&log_z)
}

/// Embeddings for one batch entry.
pub struct ContrastiveEntry {
    pub query: Var,
    pub positive: Var,
    pub negatives: Vec<Var>,
}

/// Sum of [`contrastive_pair_loss`] over all batch entries.
pub fn contrastive_total(entries: &[ContrastiveEntry], config: &LossConfig) -> Result<Var> {
    let mut total: Option<Var> = None;
    for e in entries {
        let l = contrastive_pair_loss(&e.query, &e.positive, &e.negatives, config)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Data("contrastive loss over an empty batch".into()))
}

/// `lambda * l_ce + (1 - lambda) * l_con` on the tape.
pub fn total_loss(l_ce: &Var, l_con: &Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    l_ce.mul_const(lambda).add(&l_con.mul_const(1.0 - lambda))
}

/// Plain-value version of [`total_loss`].
pub fn combine(l_ce: f64, l_con: f64, lambda: f64) -> f64 {
    lambda * l_ce + (1.0 - lambda) * l_con
}
