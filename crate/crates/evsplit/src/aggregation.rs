//! Evidential aggregation: converts normalized client state records into
//! contribution weights and performs weighted parameter averaging.
//!
//! Per client: a diagonal evidence-concentration score Q, two relative
//! uncertainty ratios R_ale and R_epi (total over clients divided by own),
//! a raw score s = Q·R_ale·R_epi, and the simplex-normalized weight w.

use ndarray::ArrayView2;

use crate::csr::NormalizedRecord;
use crate::error::{Error, Result};
use crate::nn::{DenseParams, LayerStack};

/// Which factors of the score product are active. Disabled factors are fixed
/// to 1, which is how the ablations drop E, U_ale, or U_epi individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EaFactors {
    pub use_evidence: bool,
    pub use_aleatoric: bool,
    pub use_epistemic: bool,
}

impl Default for EaFactors {
    fn default() -> Self {
        Self {
            use_evidence: true,
            use_aleatoric: true,
            use_epistemic: true,
        }
    }
}

/// Per-client weighting breakdown for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientWeighting {
    pub client: usize,
    pub concentration: f64,
    pub ratio_aleatoric: f64,
    pub ratio_epistemic: f64,
    pub score: f64,
    pub weight: f64,
}

/// Mean over classes of the diagonal evidence fraction:
/// `q_i = Ē[i,i] / (Σ_j Ē[i,j] + ε)`, `Q = mean_i q_i`.
pub fn evidence_concentration(e_bar: &ArrayView2<f64>, epsilon: f64) -> f64 {
    let n = e_bar.nrows();
    let mut q_sum = 0.0;
    for i in 0..n {
        let row_sum: f64 = e_bar.row(i).sum();
        q_sum += e_bar[[i, i]] / (row_sum + epsilon);
    }
    q_sum / n as f64
}

/// Relative uncertainty ratios: for each client, the total of all clients'
/// normalized uncertainty sums divided by its own (plus ε). Works for either
/// the aleatoric or the epistemic vectors.
pub fn uncertainty_ratios(per_client_sums: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if per_client_sums.is_empty() {
        return Err(Error::Domain(
            "uncertainty ratios need at least one client".into(),
        ));
    }
    let total: f64 = per_client_sums.iter().sum();
    Ok(per_client_sums
        .iter()
        .map(|&own| total / (own + epsilon))
        .collect())
}

/// Score product and simplex normalization. A degenerate all-zero score
/// vector falls back to uniform weights.
pub fn client_weights(q: &[f64], r_ale: &[f64], r_epi: &[f64]) -> Result<Vec<f64>> {
    let k = q.len();
    if k == 0 || r_ale.len() != k || r_epi.len() != k {
        return Err(Error::Config(
            "weight factor vectors must have equal nonzero length".into(),
        ));
    }
    let scores: Vec<f64> = (0..k).map(|i| q[i] * r_ale[i] * r_epi[i]).collect();
    if scores.iter().any(|&s| !s.is_finite() || s < 0.0) {
        return Err(Error::Domain(
            "scores must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Ok(vec![1.0 / k as f64; k]);
    }
    Ok(scores.iter().map(|&s| s / total).collect())
}

/// Full weighting pipeline over the participating clients' normalized
/// records, in the given order.
pub fn compute_weights(
    records: &[(usize, NormalizedRecord)],
    epsilon: f64,
    factors: EaFactors,
) -> Result<Vec<ClientWeighting>> {
    if records.is_empty() {
        return Err(Error::Domain("weighting needs at least one client".into()));
    }
    let k = records.len();
    let q: Vec<f64> = records
        .iter()
        .map(|(_, r)| {
            if factors.use_evidence {
                evidence_concentration(&r.evidence.view(), epsilon)
            } else {
                1.0
            }
        })
        .collect();
    let ale_sums: Vec<f64> = records.iter().map(|(_, r)| r.aleatoric.sum()).collect();
    let epi_sums: Vec<f64> = records.iter().map(|(_, r)| r.epistemic.sum()).collect();
    let r_ale = if factors.use_aleatoric {
        uncertainty_ratios(&ale_sums, epsilon)?
    } else {
        vec![1.0; k]
    };
    let r_epi = if factors.use_epistemic {
        uncertainty_ratios(&epi_sums, epsilon)?
    } else {
        vec![1.0; k]
    };
    let weights = client_weights(&q, &r_ale, &r_epi)?;
    Ok((0..k)
        .map(|i| ClientWeighting {
            client: records[i].0,
            concentration: q[i],
            ratio_aleatoric: r_ale[i],
            ratio_epistemic: r_epi[i],
            score: q[i] * r_ale[i] * r_epi[i],
            weight: weights[i],
        })
        .collect())
}

/// Weighted elementwise average of identically-shaped parameter stacks.
pub fn aggregate_params(stacks: &[&LayerStack], weights: &[f64]) -> Result<LayerStack> {
    if stacks.is_empty() || stacks.len() != weights.len() {
        return Err(Error::Config(
            "aggregation needs matching nonempty stacks and weights".into(),
        ));
    }
    let template = stacks[0];
    for s in stacks.iter().skip(1) {
        if s.len() != template.len() {
            return Err(Error::Config("stack depths differ across clients".into()));
        }
        for (a, b) in s.0.iter().zip(&template.0) {
            if a.params.weight.dim() != b.params.weight.dim() || a.activation != b.activation {
                return Err(Error::Config("stack shapes differ across clients".into()));
            }
        }
    }
    let mut out = Vec::with_capacity(template.len());
    for li in 0..template.len() {
        let mut weight = &stacks[0].0[li].params.weight * weights[0];
        let mut bias = &stacks[0].0[li].params.bias * weights[0];
        for (s, &w) in stacks.iter().zip(weights).skip(1) {
            weight.scaled_add(w, &s.0[li].params.weight);
            bias.scaled_add(w, &s.0[li].params.bias);
        }
        out.push(crate::nn::DenseLayer {
            params: DenseParams { weight, bias },
            activation: template.0[li].activation,
        });
    }
    Ok(LayerStack::new(out))
}
