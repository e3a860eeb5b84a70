//! Literal reference for the two contrastive objectives.
//!
//! Plain loops over index sets rebuilt from the group labels, explicit dot
//! products, no max-shift before exponentiation. Slow by construction; used
//! only to cross-check [`super::loss_naive`] and [`super::loss_dcl`].

use super::{EmbeddingSet, LossConfig, LossError, LossVariant};

pub fn oracle_loss(e: &EmbeddingSet, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    let n = e.len();
    let d = e.dim();
    let z = e.z();
    let dot = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            s += z[[i, k]] * z[[j, k]];
        }
        s
    };

    let mut total = 0.0;
    for i in 0..n {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if e.groups()[j] == e.groups()[i] {
                positives.push(j);
            } else {
                negatives.push(j);
            }
        }
        if negatives.is_empty() {
            return Err(LossError::NoNegatives);
        }
        if positives.is_empty() {
            return Err(LossError::NoPositives(i));
        }

        let mut negative_sum = 0.0;
        for &a in &negatives {
            negative_sum += (dot(i, a) / cfg.tau).exp();
        }
        let mut li = 0.0;
        for &p in &positives {
            let numerator = (dot(i, p) / cfg.tau).exp();
            let denominator = match cfg.variant {
                LossVariant::Naive => numerator + negative_sum,
                LossVariant::Dcl => negative_sum,
            };
            li += (numerator / denominator).ln();
        }
        total += -li / positives.len() as f64;
    }
    Ok(total / n as f64)
}
