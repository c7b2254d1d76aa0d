//! Redundancy statistics of KV traces: nearest-reference similarity,
//! distance to the most similar earlier token, singular spectra, norms and
//! value histograms of original, residual and latent states.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KvTrace;
use crate::reference::ReferenceSet;
use crate::tensor::{dot, svd_singular_values, Matrix, Real};

/// Subtracts from every token the mean of its `k` nearest strided
/// references (raw KV); tokens without references keep their raw state.
pub fn residualize_trace<T: Real>(trace: &KvTrace<T>, stride: usize, k: usize) -> Result<KvTrace<T>> {
    if trace.is_empty() || trace.layers[0].rows() == 0 {
        return Err(Error::Input("empty trace".into()));
    }
    let layers = trace
        .layers
        .iter()
        .map(|m| {
            let mut refs = ReferenceSet::new(stride, m.cols())?;
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                let kv = m.row(i);
                let bar = refs.mean_reference(&refs.topk(kv, k, i))?;
                for ((o, &x), &b) in out.row_mut(i).iter_mut().zip(kv).zip(&bar) {
                    *o = x - b;
                }
                refs.maybe_append(i, kv)?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KvTrace { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside land in the edge bins.
    pub fn uniform(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Input(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|b| lo + b as f64 * w).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v - lo) / w).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinConfig {
    pub cosine_step: f64,
    pub value_bins: usize,
    /// Quantile of |values| used as the value-histogram half range.
    pub value_quantile: f64,
    pub stride: usize,
    pub k_refs: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self { cosine_step: 0.05, value_bins: 40, value_quantile: 0.999, stride: 10, k_refs: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub similarity_histogram: Histogram,
    pub distance_histogram: Histogram,
    pub svd_spectrum_original: Vec<f64>,
    pub svd_spectrum_residual: Vec<f64>,
    pub norm_stats_original: NormStats,
    pub norm_stats_residual: NormStats,
    pub value_histogram_original: Histogram,
    pub value_histogram_residual: Histogram,
    pub value_histogram_latent: Option<Histogram>,
    pub flatness_original: f64,
    pub flatness_residual: f64,
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn norm_stats<T: Real>(m: &Matrix<T>) -> NormStats {
    let norms: Vec<f64> = (0..m.rows()).map(|i| dot(m.row(i), m.row(i)).f64().sqrt()).collect();
    let mean = if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 };
    NormStats { mean, p50: percentile(&norms, 0.5), p90: percentile(&norms, 0.9) }
}

fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let na = dot(a, a).f64().sqrt();
    let nb = dot(b, b).f64().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot(a, b).f64() / (na * nb)).clamp(-1.0, 1.0)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// Cosine similarity of every token to its nearest strided reference;
/// tokens without an earlier reference are skipped.
pub fn reference_similarities<T: Real>(m: &Matrix<T>, stride: usize) -> Result<Vec<f64>> {
    let mut refs = ReferenceSet::new(stride, m.cols())?;
    let mut out = Vec::new();
    for i in 0..m.rows() {
        if let Some(&e) = refs.topk(m.row(i), 1, i).first() {
            out.push(cosine(m.row(i), refs.kv(e)));
        }
        refs.maybe_append(i, m.row(i))?;
    }
    Ok(out)
}

/// For each token `i > 0`, the earlier token with the smallest squared L2
/// distance (lowest index on ties); `None` for token 0.
pub fn nearest_earlier<T: Real>(m: &Matrix<T>) -> Vec<Option<usize>> {
    (0..m.rows())
        .map(|i| {
            let mut best: Option<(T, usize)> = None;
            for j in 0..i {
                let d = sq_dist(m.row(i), m.row(j));
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| j)
        })
        .collect()
}

/// Histogram over integer powers of two: bin `b` counts distances in
/// `[2^b, 2^(b+1))`.
pub fn log2_histogram(distances: &[usize]) -> Histogram {
    let max = distances.iter().copied().max().unwrap_or(1).max(1);
    let bins = (usize::BITS - max.leading_zeros()) as usize;
    let edges = (0..=bins).map(|b| (1u64 << b) as f64).collect();
    let mut counts = vec![0; bins];
    for &d in distances {
        counts[(usize::BITS - d.max(1).leading_zeros()) as usize - 1] += 1;
    }
    Histogram { edges, counts }
}

/// `σ_m / σ_1`; larger means flatter. `m` defaults to `min(10, len)`.
pub fn spectrum_flatness(spectrum: &[f64], m: Option<usize>) -> Result<f64> {
    let first = *spectrum.first().ok_or_else(|| Error::Degenerate("empty spectrum".into()))?;
    if !(first > 0.0) {
        return Err(Error::Degenerate("leading singular value is not positive".into()));
    }
    let m = m.unwrap_or(10).clamp(1, spectrum.len());
    Ok(spectrum[m - 1] / first)
}

/// All layers' tokens stacked into one matrix.
pub fn stack<T: Real>(trace: &KvTrace<T>) -> Result<Matrix<T>> {
    let cols = trace.layers.first().map_or(0, Matrix::cols);
    let data: Vec<T> = trace.layers.iter().flat_map(|m| m.data().iter().copied()).collect();
    Matrix::from_vec(data.len() / cols.max(1), cols, data)
}

fn value_histogram<T: Real>(m: &Matrix<T>, bins: &BinConfig) -> Result<Histogram> {
    let values: Vec<f64> = m.data().iter().map(|x| x.f64()).collect();
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let range = percentile(&abs, bins.value_quantile);
    let range = if range > 0.0 { range } else { 1.0 };
    Histogram::uniform(&values, -range, range, bins.value_bins)
}

/// Builds every panel. Similarity and distance panels use the original
/// trace; spectra, norms and value histograms compare original and residual.
pub fn build_report<T: Real>(
    trace: &KvTrace<T>,
    residual: &KvTrace<T>,
    latent: Option<&Matrix<T>>,
    bins: &BinConfig,
) -> Result<AnalysisReport> {
    if !(bins.cosine_step > 0.0) || bins.value_bins == 0 || !(0.0..=1.0).contains(&bins.value_quantile) {
        return Err(Error::Input("bin configuration must have positive step and bin count".into()));
    }
    if trace.len() != residual.len() || trace.layers.iter().zip(&residual.layers).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape("original and residual traces are not aligned".into()));
    }
    let mut sims = Vec::new();
    let mut dists = Vec::new();
    for m in &trace.layers {
        sims.extend(reference_similarities(m, bins.stride)?);
        for (i, j) in nearest_earlier(m).into_iter().enumerate() {
            if let Some(j) = j {
                dists.push(i - j);
            }
        }
    }
    let n_cos = (2.0 / bins.cosine_step).round() as usize;
    let similarity_histogram = Histogram::uniform(&sims, -1.0, 1.0, n_cos)?;
    let distance_histogram = log2_histogram(&dists);
    let orig = stack(trace)?;
    let res = stack(residual)?;
    let so: Vec<f64> = svd_singular_values(&orig)?.into_iter().map(|x| x.f64()).collect();
    let sr: Vec<f64> = svd_singular_values(&res)?.into_iter().map(|x| x.f64()).collect();
    Ok(AnalysisReport {
        similarity_histogram,
        distance_histogram,
        flatness_original: spectrum_flatness(&so, None)?,
        flatness_residual: spectrum_flatness(&sr, None).unwrap_or(0.0),
        svd_spectrum_original: so,
        svd_spectrum_residual: sr,
        norm_stats_original: norm_stats(&orig),
        norm_stats_residual: norm_stats(&res),
        value_histogram_original: value_histogram(&orig, bins)?,
        value_histogram_residual: value_histogram(&res, bins)?,
        value_histogram_latent: latent.map(|z| value_histogram(z, bins)).transpose()?,
    })
}

pub fn write_histogram_csv(h: &Histogram, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(out, "{:.8e},{:.8e},{}", h.edges[i], h.edges[i + 1], c)?;
    }
    Ok(())
}

pub fn write_spectrum_csv(original: &[f64], residual: &[f64], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "index,original,residual")?;
    for i in 0..original.len().max(residual.len()) {
        let a = original.get(i).copied().unwrap_or(0.0);
        let b = residual.get(i).copied().unwrap_or(0.0);
        writeln!(out, "{i},{a:.8e},{b:.8e}")?;
    }
    Ok(())
}

pub fn write_norms_csv(report: &AnalysisReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "trace,mean,p50,p90")?;
    for (name, s) in [("original", report.norm_stats_original), ("residual", report.norm_stats_residual)] {
        writeln!(out, "{name},{:.8e},{:.8e},{:.8e}", s.mean, s.p50, s.p90)?;
    }
    Ok(())
}

/// Parses the numeric columns of a CSV written by this module, skipping the
/// header and any non-numeric first column.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .filter_map(|f| if f.parse::<f64>().is_ok() { Some(f.parse::<f64>().map_err(|e| Error::Format(e.to_string()))) } else { None })
                .collect()
        })
        .collect()
}

/// Writes every panel as CSV plus the combined JSON report into `dir`.
pub fn write_report(report: &AnalysisReport, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&mut dyn Write) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        let mut buf = Vec::new();
        f(&mut buf)?;
        std::fs::write(&path, buf)?;
        files.push(path);
        Ok(())
    };
    emit("similarity.csv", &|w| write_histogram_csv(&report.similarity_histogram, w))?;
    emit("distance.csv", &|w| write_histogram_csv(&report.distance_histogram, w))?;
    emit("spectrum.csv", &|w| write_spectrum_csv(&report.svd_spectrum_original, &report.svd_spectrum_residual, w))?;
    emit("norms.csv", &|w| write_norms_csv(report, w))?;
    emit("values_original.csv", &|w| write_histogram_csv(&report.value_histogram_original, w))?;
    emit("values_residual.csv", &|w| write_histogram_csv(&report.value_histogram_residual, w))?;
    if let Some(h) = &report.value_histogram_latent {
        emit("values_latent.csv", &|w| write_histogram_csv(h, w))?;
    }
    emit("report.json", &|w| Ok(serde_json::to_writer_pretty(w, report)?))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatness_examples() {
        assert_eq!(spectrum_flatness(&[2.0, 2.0, 2.0], None).unwrap(), 1.0);
        assert_eq!(spectrum_flatness(&[3.0, 1.0], Some(2)).unwrap(), 1.0 / 3.0);
        assert!(matches!(spectrum_flatness(&[0.0, 0.0], None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn log2_bins() {
        let h = log2_histogram(&[1, 2, 3, 4, 17]);
        assert_eq!(h.counts, vec![1, 2, 1, 0, 1]);
        assert_eq!(h.edges[4], 16.0);
    }

    #[test]
    fn hand_residuals() {
        let m = Matrix::from_vec(5, 1, vec![1.0f64, 2.0, 4.0, 7.0, 11.0]).unwrap();
        let r = residualize_trace(&KvTrace { layers: vec![m] }, 2, 1).unwrap();
        assert_eq!(r.layers[0].data(), &[1.0, 1.0, 3.0, 3.0, 7.0]);
    }

    #[test]
    fn histogram_conservation() {
        let h = Histogram::uniform(&[-5.0, 0.0, 0.3, 9.0], -1.0, 1.0, 4).unwrap();
        assert_eq!(h.total(), 4);
        assert_eq!(h.counts, vec![1, 0, 2, 1]);
        assert!(Histogram::uniform(&[], 1.0, 1.0, 3).is_err());
    }
}
