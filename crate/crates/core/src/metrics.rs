//! Detection metrics, latency benchmarking, the temperature sweep, and the
//! report emitted by evaluation runs.
//!
//! AUROC is the Mann-Whitney estimator (ties count 1/2) computed from
//! midranks in `O((m+n) log(m+n))`; FPR@95 reuses the detector's inclusive
//! threshold so the two modules can never disagree about the operating
//! point.
//!
//! Report file (`ssreport/1`): plain text, one record per line.
//!
//! ```text
//! ssreport/1
//! target_tpr <f>
//! id_accuracy <f>
//! detector score=<kind> lambda=<f> target_tpr=<f>
//! result score=<kind> ood=<name> auroc=<f> fpr95=<f>
//! chosen_tau <f>
//! timing score=<kind> pool=<n> mean_us=<f> std_us=<f>
//! ```
//!
//! Timing lines hold wall-clock values and are the one non-reproducible
//! part of the schema; evaluation runs simply do not emit them.
//! Histograms and sweep tables go to CSV files alongside the report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::detector;
use crate::encoder::PrototypeBank;
use crate::scores::{ink, ScoreFunction};
use crate::synth::{speckle_corrupt, RawInputSet};
use crate::vmf::UnitVector;
use crate::{Error, Result};

/// Probability that a random ID score exceeds a random OOD score, ties 1/2.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::EmptyInput("id scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores", "non-finite score"));
    }
    let m = id_scores.len();
    let n = ood_scores.len();
    let mut combined: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|s| (*s, true))
        .chain(ood_scores.iter().map(|s| (*s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Midranks over tie groups; ranks are 1-based.
    let mut id_rank_sum = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j < combined.len() && combined[j].0 == combined[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &combined[i..j] {
            if item.1 {
                id_rank_sum += midrank;
            }
        }
        i = j;
    }
    let m_f = m as f64;
    Ok((id_rank_sum - m_f * (m_f + 1.0) / 2.0) / (m_f * n as f64))
}

/// FPR of the OOD scores at the detector threshold putting the ID true
/// positive rate at or above `target_tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], target_tpr: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::EmptyInput("ood scores"));
    }
    let det = detector::calibrate(id_scores, target_tpr)?;
    let fp = ood_scores.iter().filter(|s| **s >= det.lambda).count();
    Ok(fp as f64 / ood_scores.len() as f64)
}

/// Per-sample wall-clock statistics in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub std_us: f64,
}

/// Time `score` over the given samples, single-threaded with a monotonic
/// clock. One warm pass runs first; each repeat scores every sample and
/// contributes one per-sample mean, and the returned statistics are over
/// repeats. Embedding extraction is the caller's job and is never timed.
pub fn bench_score_latency(
    score: &ScoreFunction,
    samples: &[(Vec<f64>, UnitVector)],
    repeats: usize,
) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("latency samples"));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats", "must be >= 1"));
    }
    // Warmup, also surfacing scoring errors before the timed region.
    for (raw, z) in samples {
        std::hint::black_box(score.score(raw, z)?);
    }
    let mut per_sample = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for (raw, z) in samples {
            let s = score.score(raw, z).map_err(|e| Error::invalid("score", e.to_string()))?;
            std::hint::black_box(s);
        }
        let elapsed = start.elapsed().as_secs_f64() * 1e6;
        per_sample.push(elapsed / samples.len() as f64);
    }
    let mean = per_sample.iter().sum::<f64>() / repeats as f64;
    let var = per_sample.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
    Ok(LatencyStats { mean_us: mean, std_us: var.sqrt() })
}

/// One row of the temperature sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub tau: f64,
    pub auroc: f64,
}

/// 17 log-spaced temperatures spanning `[tau_train/100, 100 tau_train]`.
pub fn default_tau_grid(tau_train: f64) -> Vec<f64> {
    (0..17)
        .map(|k| tau_train * 10f64.powf(-2.0 + 0.25 * k as f64))
        .collect()
}

/// INK AUROC per temperature, averaged over the OOD sets.
pub fn temperature_sweep(
    bank: &PrototypeBank,
    id_test: &[UnitVector],
    ood_sets: &[Vec<UnitVector>],
    tau_grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if id_test.is_empty() {
        return Err(Error::EmptyInput("id test embeddings"));
    }
    if ood_sets.is_empty() || ood_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptyInput("ood sets"));
    }
    if tau_grid.is_empty() {
        return Err(Error::EmptyInput("tau grid"));
    }
    let mut rows = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let id_scores: Vec<f64> = id_test
            .iter()
            .map(|z| ink(bank, z, tau))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for ood in ood_sets {
            let ood_scores: Vec<f64> = ood
                .iter()
                .map(|z| ink(bank, z, tau))
                .collect::<Result<Vec<_>>>()?;
            total += auroc(&id_scores, &ood_scores)?;
        }
        rows.push(SweepRow { tau, auroc: total / ood_sets.len() as f64 });
    }
    Ok(rows)
}

/// Pick the test-time temperature by corrupting the validation inputs with
/// speckle noise and maximizing AUROC against the corrupted copy. Ties break
/// toward the smaller temperature (grid order).
pub fn select_tau_by_corruption<F>(
    embed: F,
    bank: &PrototypeBank,
    id_val: &RawInputSet,
    sigma: f64,
    tau_grid: &[f64],
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<UnitVector>,
{
    if tau_grid.is_empty() {
        return Err(Error::EmptyInput("tau grid"));
    }
    if id_val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let corrupted = speckle_corrupt(id_val, sigma, seed)?;
    let id_embeds: Vec<UnitVector> = id_val.iter_points().map(&embed).collect::<Result<Vec<_>>>()?;
    let ood_embeds: Vec<UnitVector> =
        corrupted.iter_points().map(&embed).collect::<Result<Vec<_>>>()?;

    let mut best_tau = tau_grid[0];
    let mut best_auroc = f64::NEG_INFINITY;
    for &tau in tau_grid {
        let id_scores: Vec<f64> = id_embeds
            .iter()
            .map(|z| ink(bank, z, tau))
            .collect::<Result<Vec<_>>>()?;
        let ood_scores: Vec<f64> = ood_embeds
            .iter()
            .map(|z| ink(bank, z, tau))
            .collect::<Result<Vec<_>>>()?;
        let a = auroc(&id_scores, &ood_scores)?;
        if a > best_auroc {
            best_auroc = a;
            best_tau = tau;
        }
    }
    Ok(best_tau)
}

/// Classification accuracy by argmax prototype similarity (equivalently
/// argmax posterior; the softmax is monotone in the cosine).
pub fn id_accuracy(bank: &PrototypeBank, embeddings: &[UnitVector], labels: &[u32]) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("embeddings"));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: embeddings.len(), got: labels.len() });
    }
    let mut correct = 0usize;
    for (z, label) in embeddings.iter().zip(labels) {
        let cosines = bank.cosines(z);
        let argmax = cosines
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == *label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / embeddings.len() as f64)
}

/// Fixed-width histogram; values at the upper edge land in the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 50;

/// Histograms of ID and OOD scores over their pooled range.
pub fn score_histograms(id_scores: &[f64], ood_scores: &[f64]) -> (Histogram, Histogram) {
    let lo = id_scores
        .iter()
        .chain(ood_scores)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = id_scores
        .iter()
        .chain(ood_scores)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (
        histogram(id_scores, lo, hi, HISTOGRAM_BINS),
        histogram(ood_scores, lo, hi, HISTOGRAM_BINS),
    )
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let mut counts = vec![0u64; bins];
    let width = hi - lo;
    for v in values {
        let bin = if width == 0.0 {
            0
        } else {
            (((v - lo) / width * bins as f64) as usize).min(bins - 1)
        };
        counts[bin] += 1;
    }
    Histogram { lo, hi, counts }
}

/// One (score, OOD set) evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub score: String,
    pub ood: String,
    pub auroc: f64,
    pub fpr_at_95: f64,
}

/// Serialized detector operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRecord {
    pub score: String,
    pub lambda: f64,
    pub target_tpr: f64,
}

/// Latency measurement row; wall-clock, not reproducible across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub score: String,
    pub pool_size: usize,
    pub mean_us: f64,
    pub std_us: f64,
}

/// Histogram pair for one (score, OOD set) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRecord {
    pub score: String,
    pub ood: String,
    pub id_hist: Histogram,
    pub ood_hist: Histogram,
}

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionReport {
    pub target_tpr: f64,
    pub id_accuracy: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub detectors: Vec<DetectorRecord>,
    pub sweep: Vec<SweepRow>,
    pub chosen_tau: Option<f64>,
    pub timing: Vec<TimingRow>,
    pub histograms: Vec<HistogramRecord>,
}

pub const REPORT_SCHEMA: &str = "ssreport/1";

/// Write the `ssreport/1` text file. Float formatting is Rust's shortest
/// round-trip representation, so identical reports are byte-identical.
pub fn write_report(report: &DetectionReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{REPORT_SCHEMA}")?;
    writeln!(w, "target_tpr {}", report.target_tpr)?;
    if let Some(acc) = report.id_accuracy {
        writeln!(w, "id_accuracy {acc}")?;
    }
    for d in &report.detectors {
        writeln!(w, "detector score={} lambda={} target_tpr={}", d.score, d.lambda, d.target_tpr)?;
    }
    for r in &report.rows {
        writeln!(
            w,
            "result score={} ood={} auroc={} fpr95={}",
            r.score, r.ood, r.auroc, r.fpr_at_95
        )?;
    }
    if let Some(tau) = report.chosen_tau {
        writeln!(w, "chosen_tau {tau}")?;
    }
    for t in &report.timing {
        writeln!(
            w,
            "timing score={} pool={} mean_us={} std_us={}",
            t.score, t.pool_size, t.mean_us, t.std_us
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `tau,auroc` rows, one per grid point.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "tau,auroc")?;
    for r in rows {
        writeln!(w, "{},{}", r.tau, r.auroc)?;
    }
    w.flush()?;
    Ok(())
}

/// `score,ood,bin,lo,hi,id_count,ood_count` rows.
pub fn write_histograms_csv(records: &[HistogramRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "score,ood,bin,lo,hi,id_count,ood_count")?;
    for rec in records {
        let bins = rec.id_hist.counts.len();
        let width = (rec.id_hist.hi - rec.id_hist.lo) / bins as f64;
        for b in 0..bins {
            let lo = rec.id_hist.lo + width * b as f64;
            let hi = rec.id_hist.lo + width * (b + 1) as f64;
            writeln!(
                w,
                "{},{},{b},{lo},{hi},{},{}",
                rec.score, rec.ood, rec.id_hist.counts[b], rec.ood_hist.counts[b]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `score,pool_size,mean_us,std_us` rows.
pub fn write_timing_csv(rows: &[TimingRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "score,pool_size,mean_us,std_us")?;
    for t in rows {
        writeln!(w, "{},{},{},{}", t.score, t.pool_size, t.mean_us, t.std_us)?;
    }
    w.flush()?;
    Ok(())
}
