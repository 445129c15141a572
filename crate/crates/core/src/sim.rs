//! Synthetic multi-region time series generator.
//!
//! Each region is the convolution of a shared binary stimulus schedule with
//! a region-specific gamma kernel, plus a shared nonstationary artifact
//! source scaled per region to hit a target SNR. Rows are z-scored before
//! analysis, matching the treatment of recorded data.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrf::{fit_pl_fwhm, gamma_hrf, HrfParams};

/// Sampled peak latencies are drawn uniformly from this range (seconds).
pub const PL_RANGE: (f64, f64) = (0.25, 4.5);
/// Sampled widths are drawn uniformly from this range (seconds).
pub const FWHM_RANGE: (f64, f64) = (0.5, 4.5);

/// Binary stimulus schedule: repeated blocks of fixed duration separated by
/// randomized rest periods, sampled at `fs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpSchedule {
    /// Stimulus onsets in seconds, strictly increasing.
    pub onsets: Vec<f64>,
    /// Stimulus duration in seconds, shared by all repetitions.
    pub duration: f64,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Total recording length in samples.
    pub n_samples: usize,
}

impl EpSchedule {
    pub fn n_reps(&self) -> usize {
        self.onsets.len()
    }

    /// Sample index of a repetition's first stimulus sample.
    pub fn onset_sample(&self, rep: usize) -> usize {
        (self.onsets[rep] * self.fs).round() as usize
    }

    /// Number of samples each repetition occupies.
    pub fn duration_samples(&self) -> usize {
        (self.duration * self.fs).round() as usize
    }

    /// 0/1 expansion on the sample grid.
    pub fn binary(&self) -> Vec<f64> {
        let mut ep = vec![0.0; self.n_samples];
        let width = self.duration_samples();
        for rep in 0..self.n_reps() {
            let start = self.onset_sample(rep);
            for sample in ep.iter_mut().skip(start).take(width) {
                *sample = 1.0;
            }
        }
        ep
    }

    pub fn validate(&self) -> Result<()> {
        if self.onsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "stimulus onsets must be strictly increasing".into(),
            ));
        }
        if !(self.duration > 0.0) || !(self.fs > 0.0) {
            return Err(Error::InvalidParameter(
                "duration and fs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Draw a stimulus schedule: `n_reps` blocks of `stim_duration`, preceded and
/// separated by rest periods drawn uniformly from `rest_range`, with one
/// trailing rest after the final block.
pub fn generate_ep(
    n_reps: usize,
    stim_duration: f64,
    rest_range: (f64, f64),
    fs: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpSchedule> {
    if n_reps < 1 {
        return Err(Error::InvalidParameter(
            "need at least one repetition".into(),
        ));
    }
    if rest_range.0 > rest_range.1 || rest_range.0 < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "bad rest range [{}, {}]",
            rest_range.0, rest_range.1
        )));
    }
    if !(fs > 0.0) || !(stim_duration > 0.0) {
        return Err(Error::InvalidParameter(
            "fs and stimulus duration must be positive".into(),
        ));
    }
    let draw_rest = |rng: &mut ChaCha8Rng| {
        if rest_range.0 == rest_range.1 {
            rest_range.0
        } else {
            rng.random_range(rest_range.0..=rest_range.1)
        }
    };
    let mut t = 0.0;
    let mut onsets = Vec::with_capacity(n_reps);
    for _ in 0..n_reps {
        t += draw_rest(rng);
        onsets.push(t);
        t += stim_duration;
    }
    t += draw_rest(rng);
    let schedule = EpSchedule {
        onsets,
        duration: stim_duration,
        fs,
        n_samples: (t * fs).round() as usize,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Generator parameters for the artifact source: a Gaussian process with a
/// piecewise-constant mean that jumps at random dwell times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactProcess {
    /// Dwell time of each mean level, drawn uniformly from this range (s).
    pub dwell_range: (f64, f64),
    /// Standard deviation of the mean levels.
    pub mean_std: f64,
    /// Standard deviation of the additive white noise.
    pub noise_std: f64,
}

impl Default for ArtifactProcess {
    fn default() -> Self {
        Self {
            dwell_range: (5.0, 10.0),
            mean_std: 1.0,
            noise_std: 0.5,
        }
    }
}

impl ArtifactProcess {
    pub fn validate(&self) -> Result<()> {
        if self.dwell_range.0 > self.dwell_range.1 || !(self.dwell_range.0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "bad dwell range [{}, {}]",
                self.dwell_range.0, self.dwell_range.1
            )));
        }
        if self.noise_std < 0.0 || self.mean_std < 0.0 {
            return Err(Error::InvalidParameter(
                "artifact standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Realize an artifact source: piecewise-constant mean levels (each drawn
/// from N(0, mean_std), held for a uniformly drawn dwell time) plus white
/// Gaussian noise.
pub fn generate_artifact(
    length: usize,
    fs: f64,
    process: &ArtifactProcess,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::InvalidParameter(
            "artifact length must be >= 1".into(),
        ));
    }
    process.validate()?;
    let mean_dist = Normal::new(0.0, process.mean_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let noise_dist = Normal::new(0.0, process.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let level = if process.mean_std > 0.0 {
            mean_dist.sample(rng)
        } else {
            0.0
        };
        let dwell = if process.dwell_range.0 == process.dwell_range.1 {
            process.dwell_range.0
        } else {
            rng.random_range(process.dwell_range.0..=process.dwell_range.1)
        };
        let dwell_samples = ((dwell * fs).round() as usize).max(1);
        for _ in 0..dwell_samples {
            if out.len() == length {
                break;
            }
            out.push(level);
        }
    }
    if process.noise_std > 0.0 {
        for v in out.iter_mut() {
            *v += noise_dist.sample(rng);
        }
    }
    Ok(out)
}

/// Full simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub schedule: EpSchedule,
    /// One kernel parameter set per region.
    pub hrf_params: Vec<HrfParams>,
    pub artifact: ArtifactProcess,
    /// Per-region target SNR in dB: 10 log10(var(task) / var(artifact term)).
    /// `f64::INFINITY` disables the artifact.
    pub snr_db: f64,
    /// Kernel length in samples (L + 1).
    pub filter_len: usize,
    pub seed: u64,
}

impl Experiment {
    pub fn m_regions(&self) -> usize {
        self.hrf_params.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.artifact.validate()?;
        if self.hrf_params.len() < 2 {
            return Err(Error::InvalidParameter("need at least two regions".into()));
        }
        for p in &self.hrf_params {
            p.validate()?;
        }
        if self.filter_len < 2 {
            return Err(Error::InvalidParameter("filter_len must be >= 2".into()));
        }
        Ok(())
    }
}

/// Multi-region time series with shared sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    /// M x N matrix; one row per region.
    pub data: Array2<f64>,
    pub fs: f64,
    pub labels: Vec<String>,
}

impl RoiTimeSeries {
    pub fn new(data: Array2<f64>, fs: f64, labels: Vec<String>) -> Result<Self> {
        if labels.len() != data.nrows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                data.nrows()
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::InvalidParameter("fs must be positive".into()));
        }
        Ok(Self { data, fs, labels })
    }

    pub fn n_regions(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    /// Z-score every row in place (population variance).
    pub fn normalize_rows(&mut self) -> Result<()> {
        let n = self.n_samples() as f64;
        for mut row in self.data.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::Degenerate("zero-variance region row".into()));
            }
            let std = var.sqrt();
            row.mapv_inplace(|v| (v - mean) / std);
        }
        Ok(())
    }

    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.normalize_rows()?;
        Ok(out)
    }
}

/// Causal FIR convolution truncated to the source length.
pub fn convolve(taps: &[f64], source: &[f64]) -> Vec<f64> {
    let n = source.len();
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate() {
        let kmax = taps.len().min(t + 1);
        let mut acc = 0.0;
        for (k, &h) in taps.iter().enumerate().take(kmax) {
            acc += h * source[t - k];
        }
        *o = acc;
    }
    out
}

pub(crate) fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Output of one synthesis run: the normalized series plus the ground-truth
/// quantities the generator used.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub series: RoiTimeSeries,
    /// Artifact gains chosen to hit the target SNR per region.
    pub gains: Vec<f64>,
    /// The binary stimulus source.
    pub ep: Vec<f64>,
    /// The shared artifact realization (unscaled).
    pub artifact: Vec<f64>,
}

/// Generate the multi-region series for an experiment.
///
/// Row m is (kernel_m * ep) + gain_m * artifact, where gain_m is set so the
/// task-to-artifact variance ratio matches `snr_db`, and each row is then
/// z-scored.
pub fn synthesize(experiment: &Experiment) -> Result<Synthesis> {
    experiment.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(experiment.seed);
    let n = experiment.schedule.n_samples;
    let m = experiment.m_regions();
    let dt = 1.0 / experiment.schedule.fs;
    let ep = experiment.schedule.binary();

    let artifact_on = experiment.snr_db.is_finite();
    let artifact = if artifact_on {
        generate_artifact(n, experiment.schedule.fs, &experiment.artifact, &mut rng)?
    } else {
        vec![0.0; n]
    };
    let var_artifact = population_variance(&artifact);
    if artifact_on && !(var_artifact > 0.0) {
        return Err(Error::Degenerate(
            "artifact realization has zero variance".into(),
        ));
    }

    let snr_lin = 10.0_f64.powf(experiment.snr_db / 10.0);
    let mut data = Array2::zeros((m, n));
    let mut gains = vec![0.0; m];
    for region in 0..m {
        let kernel = gamma_hrf(&experiment.hrf_params[region], dt, experiment.filter_len)?;
        let task = convolve(&kernel.taps, &ep);
        let var_task = population_variance(&task);
        if !(var_task > 0.0) {
            return Err(Error::Degenerate(format!(
                "region {region}: task term has zero variance"
            )));
        }
        let gain = if artifact_on {
            (var_task / (var_artifact * snr_lin)).sqrt()
        } else {
            0.0
        };
        gains[region] = gain;
        for t in 0..n {
            data[(region, t)] = task[t] + gain * artifact[t];
        }
    }

    let labels = (1..=m).map(|i| format!("roi{i}")).collect();
    let mut series = RoiTimeSeries::new(data, experiment.schedule.fs, labels)?;
    series.normalize_rows()?;
    Ok(Synthesis {
        series,
        gains,
        ep,
        artifact,
    })
}

/// Draw kernel parameters with peak latency and width uniform over the
/// simulation ranges, inverted to (shape, rate) numerically. Pairs with no
/// gamma solution are rejected and redrawn.
pub fn sample_random_hrf_params(rng: &mut ChaCha8Rng) -> Result<HrfParams> {
    sample_hrf_params_in(PL_RANGE, FWHM_RANGE, rng)
}

/// Same as [`sample_random_hrf_params`] with explicit ranges.
pub fn sample_hrf_params_in(
    pl_range: (f64, f64),
    fwhm_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<HrfParams> {
    const MAX_TRIES: usize = 32;
    for _ in 0..MAX_TRIES {
        let pl = rng.random_range(pl_range.0..=pl_range.1);
        let w = rng.random_range(fwhm_range.0..=fwhm_range.1);
        if let Ok(params) = fit_pl_fwhm(pl, w) {
            if params.validate().is_ok() {
                return Ok(params);
            }
        }
    }
    Err(Error::Sampling(format!(
        "no gamma kernel found after {MAX_TRIES} draws"
    )))
}
