//! Evaluation operators: interval overlap of stimulus schedules, kernel
//! latency/width errors, peak-based schedule reconstruction, response
//! variability (Fano factor) and repetition-averaged responses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrf::{fwhm, SampledFilter};
use crate::sim::EpSchedule;
use crate::stability::otsu_threshold;

/// A set of disjoint, ordered stimulus intervals in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySchedule {
    pub intervals: Vec<(f64, f64)>,
}

impl BinarySchedule {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for w in &intervals {
            if !(w.1 > w.0) {
                return Err(Error::InvalidParameter(format!(
                    "interval ({}, {}) must have positive length",
                    w.0, w.1
                )));
            }
        }
        if intervals.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::InvalidParameter(
                "intervals must be disjoint and ordered".into(),
            ));
        }
        Ok(Self { intervals })
    }

    /// Sample-grid-aligned intervals of a stimulus schedule.
    pub fn from_ep(schedule: &EpSchedule) -> Self {
        let width = schedule.duration_samples() as f64 / schedule.fs;
        let intervals = (0..schedule.n_reps())
            .map(|rep| {
                let start = schedule.onset_sample(rep) as f64 / schedule.fs;
                (start, start + width)
            })
            .collect();
        Self { intervals }
    }

    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

/// Runs of above-threshold samples as intervals, with each sample covering
/// `[k, k+1) / fs`.
fn runs_above(signal: &[f64], threshold: f64, fs: f64) -> Vec<(f64, f64)> {
    let mut intervals = Vec::new();
    let mut start: Option<usize> = None;
    for (k, &v) in signal.iter().enumerate() {
        if v > threshold {
            if start.is_none() {
                start = Some(k);
            }
        } else if let Some(s) = start.take() {
            intervals.push((s as f64 / fs, k as f64 / fs));
        }
    }
    if let Some(s) = start {
        intervals.push((s as f64 / fs, signal.len() as f64 / fs));
    }
    intervals
}

/// Binarize a source estimate with a global Otsu threshold over its sample
/// values; above-threshold runs become stimulus intervals.
pub fn binarize_global(signal: &[f64], fs: f64) -> Result<BinarySchedule> {
    let threshold = otsu_threshold(signal).ok_or_else(|| {
        Error::Threshold("signal has fewer than two distinct values".into())
    })?;
    BinarySchedule::new(runs_above(signal, threshold, fs))
}

/// Binarize at an explicitly chosen global threshold.
pub fn binarize_at(signal: &[f64], threshold: f64, fs: f64) -> Result<BinarySchedule> {
    BinarySchedule::new(runs_above(signal, threshold, fs))
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

/// Interval-overlap evaluation of an estimated schedule against the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouResult {
    /// Intersection-over-union per true repetition, scaled to seconds by
    /// the stimulus duration.
    pub per_rep_seconds: Vec<f64>,
    pub mean_seconds: f64,
    /// Estimated intervals overlapping no true repetition.
    pub false_positives: usize,
}

/// Per-repetition IoU in seconds.
///
/// Each true repetition is scored against the maximally overlapping
/// estimated interval (zero when none overlaps); the ratio is multiplied by
/// the stimulus `duration` so a perfect match scores `duration` seconds.
/// Estimated intervals that overlap no true repetition are counted as false
/// positives without reducing per-repetition scores.
pub fn iou_seconds(
    truth: &BinarySchedule,
    estimate: &BinarySchedule,
    duration: f64,
) -> Result<IouResult> {
    if truth.is_empty() {
        return Err(Error::InvalidParameter("truth schedule is empty".into()));
    }
    let mut per_rep = Vec::with_capacity(truth.n_intervals());
    for &t in &truth.intervals {
        let mut best = 0.0f64;
        for &e in &estimate.intervals {
            let ov = overlap(t, e);
            if ov > 0.0 {
                let union = (t.1 - t.0) + (e.1 - e.0) - ov;
                best = best.max(ov / union);
            }
        }
        per_rep.push(best * duration);
    }
    let false_positives = estimate
        .intervals
        .iter()
        .filter(|&&e| truth.intervals.iter().all(|&t| overlap(t, e) == 0.0))
        .count();
    let mean = per_rep.iter().sum::<f64>() / per_rep.len() as f64;
    Ok(IouResult {
        per_rep_seconds: per_rep,
        mean_seconds: mean,
        false_positives,
    })
}

/// Absolute peak-latency differences between matched kernels, per region
/// and averaged.
pub fn pl_error(
    true_hrfs: &[SampledFilter],
    est_hrfs: &[SampledFilter],
) -> Result<(Vec<f64>, f64)> {
    curve_error(true_hrfs, est_hrfs, |f| f.peak_time())
}

/// Absolute width differences between matched kernels, per region and
/// averaged.
pub fn fwhm_error(
    true_hrfs: &[SampledFilter],
    est_hrfs: &[SampledFilter],
) -> Result<(Vec<f64>, f64)> {
    curve_error(true_hrfs, est_hrfs, fwhm)
}

fn curve_error(
    true_hrfs: &[SampledFilter],
    est_hrfs: &[SampledFilter],
    measure: impl Fn(&SampledFilter) -> Result<f64>,
) -> Result<(Vec<f64>, f64)> {
    if true_hrfs.len() != est_hrfs.len() {
        return Err(Error::Dimension(format!(
            "{} true kernels vs {} estimates",
            true_hrfs.len(),
            est_hrfs.len()
        )));
    }
    if true_hrfs.is_empty() {
        return Err(Error::Dimension("no kernels to compare".into()));
    }
    let mut per_region = Vec::with_capacity(true_hrfs.len());
    for (t, e) in true_hrfs.iter().zip(est_hrfs) {
        per_region.push((measure(t)? - measure(e)?).abs());
    }
    let mean = per_region.iter().sum::<f64>() / per_region.len() as f64;
    Ok((per_region, mean))
}

/// Reconstruct a stimulus schedule from local peaks of a source estimate.
///
/// Peaks must clear mean + 0.5 std and be separated by `min_separation`
/// seconds; each peak's interval spans the region where the signal stays
/// above half the peak's prominence. Amplitude variation across peaks does
/// not defeat this detector the way a single global threshold can.
pub fn reconstruct_ep_from_peaks(
    source: &[f64],
    fs: f64,
    min_separation: f64,
) -> Result<BinarySchedule> {
    let n = source.len();
    let min_sep_samples = (min_separation * fs).round() as usize;
    if n <= min_sep_samples {
        return Err(Error::InvalidParameter(format!(
            "signal of {n} samples is shorter than the minimum separation"
        )));
    }
    let mean = source.iter().sum::<f64>() / n as f64;
    let std = (source.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let height_floor = mean + 0.5 * std;

    // Candidate local maxima above the floor, tallest first.
    let mut candidates: Vec<usize> = (1..n - 1)
        .filter(|&k| {
            source[k] >= source[k - 1] && source[k] >= source[k + 1] && source[k] > height_floor
        })
        .collect();
    candidates.sort_by(|&a, &b| source[b].partial_cmp(&source[a]).unwrap());

    let mut peaks: Vec<usize> = Vec::new();
    for k in candidates {
        if peaks
            .iter()
            .all(|&p| k.abs_diff(p) >= min_sep_samples.max(1))
        {
            peaks.push(k);
        }
    }
    peaks.sort_unstable();
    if peaks.is_empty() {
        return BinarySchedule::new(Vec::new());
    }

    let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(peaks.len());
    for (pi, &p) in peaks.iter().enumerate() {
        let left_bound = if pi == 0 { 0 } else { peaks[pi - 1] };
        let right_bound = if pi + 1 == peaks.len() {
            n - 1
        } else {
            peaks[pi + 1]
        };
        let left_min = source[left_bound..=p]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let right_min = source[p..=right_bound]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let base = left_min.max(right_min);
        let level = source[p] - 0.5 * (source[p] - base);

        let mut start = p;
        while start > left_bound && source[start - 1] >= level {
            start -= 1;
        }
        let mut end = p;
        while end < right_bound && source[end + 1] >= level {
            end += 1;
        }
        let interval = (start as f64 / fs, (end + 1) as f64 / fs);
        // Merge when prominence regions touch.
        if let Some(last) = intervals.last_mut() {
            if interval.0 <= last.1 {
                last.1 = last.1.max(interval.1);
                continue;
            }
        }
        intervals.push(interval);
    }
    BinarySchedule::new(intervals)
}

fn window_samples(window: f64, fs: f64) -> usize {
    (window * fs).round() as usize
}

fn rep_window(
    n_samples: usize,
    fs: f64,
    onset_s: f64,
    window: f64,
) -> Result<(usize, usize)> {
    let start = (onset_s * fs).round() as usize;
    let end = start + window_samples(window, fs);
    if end >= n_samples {
        return Err(Error::InvalidParameter(format!(
            "response window [{onset_s}, {:.2}] s extends past the recording",
            onset_s + window
        )));
    }
    Ok((start, end))
}

/// Fano factor of the post-stimulus peak amplitudes of one region row:
/// sample variance (n-1 denominator) of the per-repetition peaks divided by
/// their mean. The peak is the maximum inside `[onset, onset + window]`.
pub fn fano_factor(
    row: &[f64],
    fs: f64,
    ep: &BinarySchedule,
    window: f64,
) -> Result<f64> {
    if ep.is_empty() {
        return Err(Error::InvalidParameter("empty stimulus schedule".into()));
    }
    let mut peaks = Vec::with_capacity(ep.n_intervals());
    for &(onset, _) in &ep.intervals {
        let (start, end) = rep_window(row.len(), fs, onset, window)?;
        let peak = row[start..=end].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        peaks.push(peak);
    }
    let n = peaks.len() as f64;
    let mean = peaks.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::UndefinedFano(format!(
            "mean peak amplitude {mean} is not positive"
        )));
    }
    let var = if peaks.len() < 2 {
        0.0
    } else {
        peaks.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    Ok(var / mean)
}

/// Repetition-averaged post-stimulus response per region: the sample-wise
/// mean of the windowed responses, `window_samples + 1` points per region.
pub fn averaged_response(
    series: &crate::sim::RoiTimeSeries,
    ep: &BinarySchedule,
    window: f64,
) -> Result<ndarray::Array2<f64>> {
    if ep.is_empty() {
        return Err(Error::InvalidParameter("empty stimulus schedule".into()));
    }
    let w = window_samples(window, series.fs) + 1;
    let mut out = ndarray::Array2::zeros((series.n_regions(), w));
    for &(onset, _) in &ep.intervals {
        let (start, end) = rep_window(series.n_samples(), series.fs, onset, window)?;
        for region in 0..series.n_regions() {
            for (k, t) in (start..=end).enumerate() {
                out[(region, k)] += series.data[(region, t)];
            }
        }
    }
    out.mapv_inplace(|v| v / ep.n_intervals() as f64);
    Ok(out)
}

/// Bundle of evaluation results for one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: IouResult,
    pub pl_error_per_region: Vec<f64>,
    pub pl_error_mean: f64,
    pub fwhm_error_per_region: Vec<f64>,
    pub fwhm_error_mean: f64,
    /// Fano factor per region of the observed series against the true
    /// schedule, when a window fits the recording.
    pub fano_factors: Option<Vec<f64>>,
}
