//! Test-time scoring functions behind one interface.
//!
//! Every score is oriented so that **higher means more in-distribution**;
//! KNN and Mahalanobis are sign-flipped to comply. The intrinsic-likelihood
//! score is the log-partition of the prototype softmax,
//!
//! ```text
//! S(z) = tau * log sum_j exp(mu_j' z / tau),
//! ```
//!
//! which for data generated by a vMF mixture with prototypes at the true
//! means and `tau = 1/kappa` equals `tau * log p(z)` plus a constant, so it
//! induces exactly the density ordering. The energy score applies the same
//! log-partition to unconstrained classifier logits, where that identity
//! breaks; [`demonstrate_misalignment`] exhibits the failure.

use crate::encoder::{CeModel, PrototypeBank};
use crate::linalg::{self, log_sum_exp};
use crate::vmf::UnitVector;
use crate::{Error, Result};

/// Log-partition kernel shared by the similarity-based scores:
/// `tau * log sum_j exp(values[j] / tau)`, max-shifted.
pub fn log_partition(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log partition values"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", format!("temperature must be > 0, got {tau}")));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v / tau).collect();
    Ok(tau * log_sum_exp(&scaled))
}

/// Intrinsic-likelihood score of a unit embedding under the prototype bank.
///
/// The unit-norm requirement is enforced by the [`UnitVector`] type; the
/// likelihood reading of the score only exists on the sphere.
pub fn ink(bank: &PrototypeBank, z: &UnitVector, tau_test: f64) -> Result<f64> {
    check_dims(bank, z)?;
    log_partition(&bank.cosines(z), tau_test)
}

/// Prior-weighted intrinsic likelihood,
/// `tau * log sum_j p(y=j) exp(mu_j' z / tau)`.
///
/// Zero-prior components drop out of the sum (the `p -> 0+` limit); with
/// uniform priors this equals [`ink`] minus `tau * log C`.
pub fn ink_generalized(
    bank: &PrototypeBank,
    priors: &[f64],
    z: &UnitVector,
    tau_test: f64,
) -> Result<f64> {
    check_dims(bank, z)?;
    if priors.len() != bank.num_classes() {
        return Err(Error::DimensionMismatch { expected: bank.num_classes(), got: priors.len() });
    }
    if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid("priors", "entries must be finite and >= 0"));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("priors", format!("must sum to 1, got {total}")));
    }
    if !(tau_test > 0.0) || !tau_test.is_finite() {
        return Err(Error::invalid("tau", "temperature must be > 0"));
    }
    let terms: Vec<f64> = bank
        .cosines(z)
        .iter()
        .zip(priors)
        .map(|(s, p)| if *p == 0.0 { f64::NEG_INFINITY } else { p.ln() + s / tau_test })
        .collect();
    Ok(tau_test * log_sum_exp(&terms))
}

/// Negated energy of classifier logits: `tau * log sum_j exp(f_j(x) / tau)`.
/// Sign-flipped relative to the usual convention so that higher means ID.
pub fn energy(model: &CeModel, x: &[f64], tau_test: f64) -> Result<f64> {
    energy_from_logits(&model.logits(x)?, tau_test)
}

/// Energy score straight from a logit vector.
pub fn energy_from_logits(logits: &[f64], tau_test: f64) -> Result<f64> {
    log_partition(logits, tau_test)
}

/// Largest softmax posterior over the prototype similarities.
pub fn max_posterior(bank: &PrototypeBank, z: &UnitVector, tau_test: f64) -> Result<f64> {
    check_dims(bank, z)?;
    if !(tau_test > 0.0) || !tau_test.is_finite() {
        return Err(Error::invalid("tau", "temperature must be > 0"));
    }
    let logits: Vec<f64> = bank.cosines(z).iter().map(|s| s / tau_test).collect();
    let lse = log_sum_exp(&logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - lse).exp())
}

fn check_dims(bank: &PrototypeBank, z: &UnitVector) -> Result<()> {
    if z.dim() != bank.dim() {
        return Err(Error::DimensionMismatch { expected: bank.dim(), got: z.dim() });
    }
    Ok(())
}

/// Negative Euclidean distance to the k-th nearest pool member, by exact
/// full scan with partial selection.
pub fn knn_score(pool: &[UnitVector], k: usize, z: &UnitVector) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("knn pool"));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::invalid(
            "k",
            format!("must be in 1..={}, got {k}", pool.len()),
        ));
    }
    if pool[0].dim() != z.dim() {
        return Err(Error::DimensionMismatch { expected: pool[0].dim(), got: z.dim() });
    }
    let mut dists: Vec<f64> = pool
        .iter()
        .map(|p| linalg::dist_sq(p.coords(), z.coords()))
        .collect();
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(-kth.sqrt())
}

/// Mahalanobis baseline with a cached symmetric factorization of the shared
/// covariance. Scores are `-min_c (z - m_c)' Sigma^-1 (z - m_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisScorer {
    means: Vec<Vec<f64>>,
    chol: Vec<f64>,
    dim: usize,
}

impl MahalanobisScorer {
    /// Regularizes with `Sigma + 1e-6 * trace(Sigma)/d * I` before factoring;
    /// sphere-constrained embeddings leave the raw covariance rank-deficient.
    pub fn new(class_means: Vec<Vec<f64>>, covariance: &[f64]) -> Result<Self> {
        if class_means.is_empty() {
            return Err(Error::EmptyInput("class means"));
        }
        let dim = class_means[0].len();
        if class_means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("class_means", "mixed dimensions"));
        }
        if covariance.len() != dim * dim {
            return Err(Error::DimensionMismatch { expected: dim * dim, got: covariance.len() });
        }
        let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
        let ridge = 1e-6 * trace / dim as f64;
        let mut reg = covariance.to_vec();
        for i in 0..dim {
            reg[i * dim + i] += ridge;
        }
        let chol = linalg::cholesky(&reg, dim)?;
        Ok(Self { means: class_means, chol, dim })
    }

    /// Per-class Euclidean means and the pooled within-class covariance.
    pub fn fit(embeddings: &[UnitVector], labels: &[u32]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("embeddings"));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                got: labels.len(),
            });
        }
        let dim = embeddings[0].dim();
        let classes = labels.iter().max().map(|m| *m as usize + 1).unwrap_or(0);
        let mut means = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (z, l) in embeddings.iter().zip(labels) {
            counts[*l as usize] += 1;
            for (m, c) in means[*l as usize].iter_mut().zip(z.coords()) {
                *m += c;
            }
        }
        for (c, count) in counts.iter().enumerate() {
            if *count == 0 {
                return Err(Error::EmptyClass { class: c });
            }
            for m in means[c].iter_mut() {
                *m /= *count as f64;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for (z, l) in embeddings.iter().zip(labels) {
            let mean = &means[*l as usize];
            for i in 0..dim {
                let di = z.coords()[i] - mean[i];
                for j in 0..=i {
                    let dj = z.coords()[j] - mean[j];
                    cov[i * dim + j] += di * dj;
                }
            }
        }
        let n = embeddings.len() as f64;
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] /= n;
                cov[j * dim + i] = cov[i * dim + j];
            }
        }
        Self::new(means, &cov)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn score(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: z.len() });
        }
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; self.dim];
        for mean in &self.means {
            for ((d, zi), mi) in diff.iter_mut().zip(z).zip(mean) {
                *d = zi - mi;
            }
            let y = linalg::forward_substitute(&self.chol, self.dim, &diff);
            let quad = linalg::dot(&y, &y);
            best = best.min(quad);
        }
        Ok(-best)
    }
}

/// Convenience wrapper building a scorer for a single evaluation.
pub fn mahalanobis_score(class_means: Vec<Vec<f64>>, covariance: &[f64], z: &[f64]) -> Result<f64> {
    MahalanobisScorer::new(class_means, covariance)?.score(z)
}

/// Outcome of the energy-misalignment construction.
#[derive(Debug, Clone)]
pub struct MisalignmentReport {
    /// Largest absolute posterior difference between the two models.
    pub max_posterior_discrepancy: f64,
    /// Energy score difference (shifted minus original) per sample.
    pub score_differences: Vec<f64>,
    /// The applied logit shift `tau * log phi(x)` per sample.
    pub expected_shifts: Vec<f64>,
}

/// Build a second classifier whose logits are shifted per sample by
/// `tau * log phi(x)`. Both models have identical posteriors, yet their
/// energy scores differ by exactly the shift: the energy score cannot be a
/// likelihood on unconstrained logits.
pub fn demonstrate_misalignment<F>(
    model: &CeModel,
    rescale: F,
    samples: &[Vec<f64>],
    tau: f64,
) -> Result<MisalignmentReport>
where
    F: Fn(&[f64]) -> f64,
{
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("tau", "temperature must be > 0"));
    }
    let mut max_disc = 0.0f64;
    let mut diffs = Vec::with_capacity(samples.len());
    let mut shifts = Vec::with_capacity(samples.len());
    for x in samples {
        let phi = rescale(x);
        if !phi.is_finite() || phi <= 0.0 {
            return Err(Error::invalid("rescale", format!("phi must be finite and > 0, got {phi}")));
        }
        let shift = tau * phi.ln();
        let logits = model.logits(x)?;
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();

        let post = softmax_at(&logits, tau);
        let post_shifted = softmax_at(&shifted, tau);
        for (a, b) in post.iter().zip(&post_shifted) {
            max_disc = max_disc.max((a - b).abs());
        }

        let e = energy_from_logits(&logits, tau)?;
        let e_shifted = energy_from_logits(&shifted, tau)?;
        diffs.push(e_shifted - e);
        shifts.push(shift);
    }
    Ok(MisalignmentReport {
        max_posterior_discrepancy: max_disc,
        score_differences: diffs,
        expected_shifts: shifts,
    })
}

fn softmax_at(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|l| (l - lse).exp()).collect()
}

/// One scoring function with its frozen parameters, ready to evaluate.
#[derive(Debug, Clone)]
pub enum ScoreFunction {
    Ink { bank: PrototypeBank, tau_test: f64 },
    InkGeneralized { bank: PrototypeBank, priors: Vec<f64>, tau_test: f64 },
    MaxPosterior { bank: PrototypeBank, tau_test: f64 },
    Energy { model: CeModel, tau_test: f64 },
    Knn { pool: Vec<UnitVector>, k: usize },
    Mahalanobis { scorer: MahalanobisScorer },
}

impl ScoreFunction {
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreFunction::Ink { .. } => "ink",
            ScoreFunction::InkGeneralized { .. } => "ink_generalized",
            ScoreFunction::MaxPosterior { .. } => "max_posterior",
            ScoreFunction::Energy { .. } => "energy",
            ScoreFunction::Knn { .. } => "knn",
            ScoreFunction::Mahalanobis { .. } => "mahalanobis",
        }
    }

    /// Score one sample; `raw` feeds the energy score, `z` all sphere scores.
    /// Higher always means more ID.
    pub fn score(&self, raw: &[f64], z: &UnitVector) -> Result<f64> {
        match self {
            ScoreFunction::Ink { bank, tau_test } => ink(bank, z, *tau_test),
            ScoreFunction::InkGeneralized { bank, priors, tau_test } => {
                ink_generalized(bank, priors, z, *tau_test)
            }
            ScoreFunction::MaxPosterior { bank, tau_test } => max_posterior(bank, z, *tau_test),
            ScoreFunction::Energy { model, tau_test } => energy(model, raw, *tau_test),
            ScoreFunction::Knn { pool, k } => knn_score(pool, *k, z),
            ScoreFunction::Mahalanobis { scorer } => scorer.score(z.coords()),
        }
    }
}
