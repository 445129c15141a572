//! Parametric hemodynamic response kernels and their structured matrix
//! realizations.
//!
//! The response of a region is modeled as a single-gamma kernel with a
//! scaling, a shape and a rate parameter. Sampled kernels are embedded into
//! banded Toeplitz blocks, and the per-region blocks stack into the mixing
//! matrix of the convolutive model (task filters in the first block column,
//! scaled-impulse artifact filters in the second).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Parameters of the single-gamma response kernel.
///
/// `amplitude` scales the kernel, `shape` (> 1) and `rate` (> 0) control its
/// form. With unit amplitude the kernel is the Gamma(shape, rate) density,
/// which is zero at t = 0 and has a strictly positive interior peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    #[serde(rename = "theta1")]
    pub amplitude: f64,
    #[serde(rename = "theta2")]
    pub shape: f64,
    #[serde(rename = "theta3")]
    pub rate: f64,
}

impl HrfParams {
    pub fn new(amplitude: f64, shape: f64, rate: f64) -> Result<Self> {
        let p = Self {
            amplitude,
            shape,
            rate,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be finite, got {}",
                self.amplitude
            )));
        }
        if !(self.shape > 1.0) || !self.shape.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "shape must be > 1, got {}",
                self.shape
            )));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "rate must be > 0, got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// A causal FIR filter sampled on a uniform grid starting at t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledFilter {
    pub taps: Vec<f64>,
    /// Sampling interval in seconds.
    pub dt: f64,
}

impl SampledFilter {
    pub fn new(taps: Vec<f64>, dt: f64) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidParameter("filter must have >= 1 tap".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "dt must be > 0, got {dt}"
            )));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite filter tap".into()));
        }
        Ok(Self { taps, dt })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Filter order L (number of taps minus one).
    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    /// Largest tap value and its index.
    pub fn max_tap(&self) -> (usize, f64) {
        let mut idx = 0;
        let mut val = self.taps[0];
        for (i, &v) in self.taps.iter().enumerate() {
            if v > val {
                idx = i;
                val = v;
            }
        }
        (idx, val)
    }

    /// Time of the sampled peak, refined by a three-point parabolic fit so
    /// the result is not quantized to the sample grid.
    pub fn peak_time(&self) -> Result<f64> {
        let (i, v) = self.max_tap();
        if !(v > 0.0) {
            return Err(Error::Shape("filter has no strict positive maximum".into()));
        }
        if i == 0 || i + 1 == self.taps.len() {
            return Ok(i as f64 * self.dt);
        }
        let (a, b, c) = (self.taps[i - 1], self.taps[i], self.taps[i + 1]);
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 0.0 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        Ok((i as f64 + delta) * self.dt)
    }

    /// Rescale taps so the maximum equals one (positive peak required).
    pub fn normalized_to_unit_peak(&self) -> Result<Self> {
        let (_, v) = self.max_tap();
        if !(v > 0.0) {
            return Err(Error::Shape(
                "cannot normalize: non-positive peak value".into(),
            ));
        }
        Ok(Self {
            taps: self.taps.iter().map(|t| t / v).collect(),
            dt: self.dt,
        })
    }
}

/// Sample the gamma kernel on `length` points with spacing `dt`.
///
/// Tap k holds amplitude * Gamma(shape)^-1 * rate^shape * t^(shape-1) *
/// exp(-rate t) at t = k dt. Evaluation is done in log space so large shape
/// values do not overflow. The first tap is structurally zero for shape > 1.
pub fn gamma_hrf(params: &HrfParams, dt: f64, length: usize) -> Result<SampledFilter> {
    params.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if length < 2 {
        return Err(Error::InvalidParameter(format!(
            "filter length must be >= 2, got {length}"
        )));
    }
    let mut taps = vec![0.0; length];
    let log_norm = params.shape * params.rate.ln() - ln_gamma(params.shape);
    for (k, tap) in taps.iter_mut().enumerate().skip(1) {
        let t = k as f64 * dt;
        let log_val = log_norm + (params.shape - 1.0) * t.ln() - params.rate * t;
        *tap = params.amplitude * log_val.exp();
    }
    SampledFilter::new(taps, dt)
}

/// Gamma kernel samples together with their partial derivatives in
/// (shape, rate). Used by the decomposition solver's analytic gradient.
pub(crate) fn gamma_hrf_with_grad(
    params: &HrfParams,
    dt: f64,
    length: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    use statrs::function::gamma::digamma;
    let mut taps = vec![0.0; length];
    let mut d_shape = vec![0.0; length];
    let mut d_rate = vec![0.0; length];
    let log_norm = params.shape * params.rate.ln() - ln_gamma(params.shape);
    let psi = digamma(params.shape);
    for k in 1..length {
        let t = k as f64 * dt;
        let f = params.amplitude * (log_norm + (params.shape - 1.0) * t.ln() - params.rate * t).exp();
        taps[k] = f;
        d_shape[k] = f * (params.rate.ln() + t.ln() - psi);
        d_rate[k] = f * (params.shape / params.rate - t);
    }
    (taps, d_shape, d_rate)
}

/// Time of the kernel maximum, (shape - 1) / rate.
pub fn peak_latency(params: &HrfParams) -> Result<f64> {
    if !(params.shape > 1.0) {
        return Err(Error::NoInteriorPeak(format!(
            "shape must be > 1 for an interior peak, got {}",
            params.shape
        )));
    }
    if !(params.rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be > 0, got {}",
            params.rate
        )));
    }
    Ok((params.shape - 1.0) / params.rate)
}

/// Full width at half maximum of a sampled curve, in seconds.
///
/// The width spans from the first up-crossing to the last down-crossing of
/// half the peak value, with linear interpolation between samples.
pub fn fwhm(filter: &SampledFilter) -> Result<f64> {
    let (_, peak) = filter.max_tap();
    if !(peak > 0.0) {
        return Err(Error::Shape(
            "fwhm requires a strictly positive peak".into(),
        ));
    }
    let half = 0.5 * peak;
    let taps = &filter.taps;
    let n = taps.len();

    let first_at = taps
        .iter()
        .position(|&v| v >= half)
        .expect("peak >= half so a crossing exists");
    let t_up = if first_at == 0 {
        0.0
    } else {
        let (lo, hi) = (taps[first_at - 1], taps[first_at]);
        ((first_at - 1) as f64 + (half - lo) / (hi - lo)) * filter.dt
    };

    let last_at = n - 1
        - taps
            .iter()
            .rev()
            .position(|&v| v >= half)
            .expect("peak >= half so a crossing exists");
    let t_down = if last_at == n - 1 {
        (n - 1) as f64 * filter.dt
    } else {
        let (hi, lo) = (taps[last_at], taps[last_at + 1]);
        (last_at as f64 + (hi - half) / (hi - lo)) * filter.dt
    };

    Ok(t_down - t_up)
}

/// Banded Toeplitz realization of a causal filter.
///
/// Returns an `stack_depth x (order + stack_depth)` matrix whose row i holds
/// the taps starting at column i and zeros elsewhere, so that multiplying a
/// stacked delayed source segment reproduces the convolution.
pub fn toeplitz_filter_block(filter: &SampledFilter, stack_depth: usize) -> Result<Array2<f64>> {
    if stack_depth < 1 {
        return Err(Error::Dimension("stack depth must be >= 1".into()));
    }
    let len = filter.len();
    let cols = filter.order() + stack_depth;
    let mut block = Array2::zeros((stack_depth, cols));
    for i in 0..stack_depth {
        for (l, &h) in filter.taps.iter().enumerate().take(len) {
            block[(i, i + l)] = h;
        }
    }
    Ok(block)
}

/// Bank of convolutive filters for M regions and two sources: per-region
/// task response kernels plus per-region artifact gains (scaled impulses).
#[derive(Debug, Clone)]
pub struct MixingModel {
    pub task_filters: Vec<SampledFilter>,
    pub artifact_gains: Vec<f64>,
    /// Number of stacked delays L' used when realizing the model as a matrix.
    pub stack_depth: usize,
}

impl MixingModel {
    pub fn new(
        task_filters: Vec<SampledFilter>,
        artifact_gains: Vec<f64>,
        stack_depth: usize,
    ) -> Result<Self> {
        let model = Self {
            task_filters,
            artifact_gains,
            stack_depth,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn m_regions(&self) -> usize {
        self.task_filters.len()
    }

    /// Shared task filter length L + 1.
    pub fn filter_len(&self) -> usize {
        self.task_filters[0].len()
    }

    /// Block width L + L' of each Toeplitz block.
    pub fn block_cols(&self) -> usize {
        self.task_filters[0].order() + self.stack_depth
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.task_filters.len();
        if m == 0 {
            return Err(Error::Dimension("at least one region required".into()));
        }
        if self.artifact_gains.len() != m {
            return Err(Error::Dimension(format!(
                "{} regions but {} artifact gains",
                m,
                self.artifact_gains.len()
            )));
        }
        let len = self.task_filters[0].len();
        if self.task_filters.iter().any(|f| f.len() != len) {
            return Err(Error::Dimension(
                "task filters must share a common length".into(),
            ));
        }
        if self.artifact_gains.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidParameter("non-finite artifact gain".into()));
        }
        if self.stack_depth < 1 {
            return Err(Error::Dimension("stack depth must be >= 1".into()));
        }
        // Identifiability: M L' >= R (L + L') with R = 2 sources. Vacuous
        // for a single region, where the model is a plain convolution.
        if m >= 2 {
            let lhs = m * self.stack_depth;
            let rhs = 2 * self.block_cols();
            if lhs < rhs {
                return Err(Error::Dimension(format!(
                    "identifiability violated: M*L' = {lhs} < 2*(L+L') = {rhs}"
                )));
            }
        }
        Ok(())
    }
}

/// Stacked mixing matrix of size `M L' x 2 (L + L')`.
///
/// The first block column stacks the Toeplitz blocks of the per-region task
/// filters; the second stacks the Toeplitz blocks of the per-region scaled
/// unit impulses (the artifact channel).
pub fn build_mixing_matrix(model: &MixingModel) -> Result<Array2<f64>> {
    model.validate()?;
    let m = model.m_regions();
    let lp = model.stack_depth;
    let p = model.block_cols();
    let mut h = Array2::zeros((m * lp, 2 * p));
    for (region, filter) in model.task_filters.iter().enumerate() {
        let block = toeplitz_filter_block(filter, lp)?;
        let row0 = region * lp;
        for i in 0..lp {
            for j in 0..p {
                h[(row0 + i, j)] = block[(i, j)];
            }
        }
        let gain = model.artifact_gains[region];
        for i in 0..lp {
            h[(row0 + i, p + i)] = gain;
        }
    }
    Ok(h)
}

/// Invert a (peak latency, width) pair into gamma kernel parameters with
/// unit amplitude.
///
/// The width-to-latency ratio of the unit-amplitude family depends only on
/// the shape, and decreases monotonically with it, so the shape is found by
/// bisection and the rate follows from the latency.
pub fn fit_pl_fwhm(peak_latency_s: f64, fwhm_s: f64) -> Result<HrfParams> {
    if !(peak_latency_s > 0.0) || !peak_latency_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "peak latency must be > 0, got {peak_latency_s}"
        )));
    }
    if !(fwhm_s > 0.0) || !fwhm_s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "fwhm must be > 0, got {fwhm_s}"
        )));
    }
    let target = fwhm_s / peak_latency_s;

    // Bracket on log(shape - 1).
    let (mut lo, mut hi) = (-18.0_f64, 18.0_f64);
    let ratio = |log_sm1: f64| width_latency_ratio(1.0 + log_sm1.exp());
    if ratio(lo) < target || ratio(hi) > target {
        return Err(Error::Sampling(format!(
            "no gamma kernel with fwhm/latency ratio {target}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shape = 1.0 + (0.5 * (lo + hi)).exp();
    let rate = (shape - 1.0) / peak_latency_s;
    HrfParams::new(1.0, shape, rate)
}

/// FWHM of the unit-rate gamma kernel divided by its peak latency.
fn width_latency_ratio(shape: f64) -> f64 {
    let p = shape - 1.0;
    // log of t^(shape-1) e^-t at half maximum.
    let log_half = p * (p.ln() - 1.0) - std::f64::consts::LN_2;
    let f = |t: f64| p * t.ln() - t - log_half;

    // Left crossing in (0, p).
    let mut lo = p * 1e-12;
    let mut hi = p;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t_left = 0.5 * (lo + hi);

    // Right crossing in (p, inf): bracket by doubling.
    let mut hi = 2.0 * p.max(1e-12);
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    let mut lo = p;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t_right = 0.5 * (lo + hi);

    (t_right - t_left) / p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Independent oracle: width of t e^-t at half its maximum e^-1, by
    /// bisection on the continuous function. `lo` must start on the
    /// below-half side of each crossing.
    fn oracle_fwhm_t_exp() -> f64 {
        let f = |t: f64| t * (-t).exp() - 0.5 * (-1.0_f64).exp();
        let bisect = |mut lo: f64, mut hi: f64| {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        bisect(5.0, 1.0) - bisect(0.0, 1.0)
    }

    #[test]
    fn gamma_peak_value_matches_analytic() {
        // shape 2, rate 1: kernel is t e^-t, peak e^-1 at t = 1.
        let p = HrfParams::new(1.0, 2.0, 1.0).unwrap();
        let f = gamma_hrf(&p, 0.25, 41).unwrap();
        assert_relative_eq!(f.taps[4], (-1.0_f64).exp(), max_relative = 1e-12);
        let (idx, _) = f.max_tap();
        assert_eq!(idx, 4);
        assert_eq!(f.taps[0], 0.0);
    }

    #[test]
    fn gamma_zero_amplitude_is_zero_filter() {
        let p = HrfParams::new(0.0, 2.0, 1.0).unwrap();
        let f = gamma_hrf(&p, 0.25, 41).unwrap();
        assert!(f.taps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_fwhm_matches_root_finding_oracle() {
        let expected = oracle_fwhm_t_exp();
        assert_abs_diff_eq!(expected, 2.446, epsilon = 5e-4);
        let p = HrfParams::new(1.0, 2.0, 1.0).unwrap();
        let f = gamma_hrf(&p, 0.01, 2001).unwrap();
        assert_abs_diff_eq!(fwhm(&f).unwrap(), expected, epsilon = 0.02);
    }

    #[test]
    fn gamma_rejects_invalid_params() {
        assert!(HrfParams::new(1.0, 1.0, 1.0).is_err());
        assert!(HrfParams::new(1.0, 2.0, 0.0).is_err());
        assert!(HrfParams::new(f64::NAN, 2.0, 1.0).is_err());
        let p = HrfParams {
            amplitude: 1.0,
            shape: 0.5,
            rate: 1.0,
        };
        assert!(gamma_hrf(&p, 0.25, 41).is_err());
    }

    #[test]
    fn gamma_large_shape_does_not_overflow() {
        // Narrow kernel far from the overflow range of direct Gamma eval.
        let p = fit_pl_fwhm(4.5, 0.5).unwrap();
        assert!(p.shape > 100.0);
        let f = gamma_hrf(&p, 0.01, 1001).unwrap();
        assert!(f.taps.iter().all(|v| v.is_finite()));
        assert!(f.max_tap().1 > 0.0);
    }

    #[test]
    fn peak_latency_examples() {
        let pl = |a, s, r| peak_latency(&HrfParams::new(a, s, r).unwrap()).unwrap();
        assert_relative_eq!(pl(1.0, 2.0, 1.0), 1.0);
        assert_relative_eq!(pl(1.0, 3.0, 2.0), 1.0);
        assert_relative_eq!(pl(5.0, 2.0, 1.0), 1.0);
        let bad = HrfParams {
            amplitude: 1.0,
            shape: 1.0,
            rate: 1.0,
        };
        assert!(matches!(
            peak_latency(&bad),
            Err(Error::NoInteriorPeak(_))
        ));
    }

    #[test]
    fn sampled_argmax_converges_to_analytic_latency() {
        let p = HrfParams::new(1.0, 3.5, 1.7).unwrap();
        let analytic = peak_latency(&p).unwrap();
        let dt = 0.01;
        let f = gamma_hrf(&p, dt, 2001).unwrap();
        let (idx, _) = f.max_tap();
        assert!((idx as f64 * dt - analytic).abs() <= dt);
        assert_abs_diff_eq!(f.peak_time().unwrap(), analytic, epsilon = dt);
    }

    #[test]
    fn fwhm_triangle_and_rectangle() {
        let tri = SampledFilter::new(vec![0.0, 0.5, 1.0, 0.5, 0.0], 0.5).unwrap();
        assert_relative_eq!(fwhm(&tri).unwrap(), 1.0);
        let rect = SampledFilter::new(vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0], 0.5).unwrap();
        assert_relative_eq!(fwhm(&rect).unwrap(), 2.0);
        let flat = SampledFilter::new(vec![0.0, 0.0], 0.5).unwrap();
        assert!(fwhm(&flat).is_err());
    }

    #[test]
    fn amplitude_scaling_leaves_latency_and_width_unchanged() {
        let base = HrfParams::new(1.0, 2.4, 0.9).unwrap();
        let scaled = HrfParams::new(3.7, 2.4, 0.9).unwrap();
        let f0 = gamma_hrf(&base, 0.05, 400).unwrap();
        let f1 = gamma_hrf(&scaled, 0.05, 400).unwrap();
        for (a, b) in f0.taps.iter().zip(&f1.taps) {
            assert_relative_eq!(3.7 * a, *b, max_relative = 1e-12);
        }
        assert_relative_eq!(fwhm(&f0).unwrap(), fwhm(&f1).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(
            f0.peak_time().unwrap(),
            f1.peak_time().unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn toeplitz_block_examples() {
        let impulse = SampledFilter::new(vec![1.0], 1.0).unwrap();
        let b = toeplitz_filter_block(&impulse, 2).unwrap();
        assert_eq!(b, ndarray::array![[1.0, 0.0], [0.0, 1.0]]);

        let two = SampledFilter::new(vec![2.0, 3.0], 1.0).unwrap();
        let b = toeplitz_filter_block(&two, 2).unwrap();
        assert_eq!(b, ndarray::array![[2.0, 3.0, 0.0], [0.0, 2.0, 3.0]]);
    }

    #[test]
    fn toeplitz_block_dimensions() {
        let f = SampledFilter::new(vec![1.0; 41], 0.25).unwrap();
        let b = toeplitz_filter_block(&f, 80).unwrap();
        assert_eq!(b.dim(), (80, 120));
    }

    #[test]
    fn toeplitz_band_property() {
        // Entry (i, j) depends only on j - i within each block.
        let f = SampledFilter::new(vec![0.3, -1.0, 2.5, 0.7], 0.5).unwrap();
        let b = toeplitz_filter_block(&f, 5).unwrap();
        for i in 0..5 {
            for j in 0..b.ncols() {
                let d = j as isize - i as isize;
                let expect = if (0..4).contains(&d) {
                    f.taps[d as usize]
                } else {
                    0.0
                };
                assert_eq!(b[(i, j)], expect);
            }
        }
    }

    #[test]
    fn toeplitz_times_stacked_source_equals_convolution() {
        // Multiplying the block by a stacked delayed source segment must
        // reproduce the direct convolution at machine precision.
        let f = SampledFilter::new(vec![0.5, -0.25, 1.5], 1.0).unwrap();
        let l = f.order();
        let lp = 4;
        let block = toeplitz_filter_block(&f, lp).unwrap();
        let s: Vec<f64> = (0..32).map(|k| ((k * 7 % 13) as f64) - 6.0).collect();
        let n = 20; // current time index, s(n - i) must exist for i < L + L'
        let seg: Vec<f64> = (0..l + lp).map(|i| s[n - i]).collect();
        let seg = ndarray::Array1::from(seg);
        let out = block.dot(&seg);
        for i in 0..lp {
            let direct: f64 = (0..=l).map(|k| f.taps[k] * s[n - i - k]).sum();
            assert_eq!(out[i], direct);
        }
    }

    #[test]
    fn mixing_matrix_scalar_case() {
        let model = MixingModel::new(
            vec![SampledFilter::new(vec![1.0], 1.0).unwrap()],
            vec![2.0],
            1,
        )
        .unwrap();
        let h = build_mixing_matrix(&model).unwrap();
        assert_eq!(h, ndarray::array![[1.0, 2.0]]);
    }

    #[test]
    fn mixing_matrix_paper_scale_dimensions() {
        let filters: Vec<_> = (0..3)
            .map(|_| SampledFilter::new(vec![0.1; 41], 0.25).unwrap())
            .collect();
        let model = MixingModel::new(filters, vec![0.5, 1.0, 1.5], 80).unwrap();
        let h = build_mixing_matrix(&model).unwrap();
        assert_eq!(h.dim(), (240, 240));
    }

    #[test]
    fn mixing_matrix_artifact_block_is_scaled_impulse_block() {
        let filters: Vec<_> = (0..3)
            .map(|i| SampledFilter::new(vec![0.1 * (i + 1) as f64; 3], 0.5).unwrap())
            .collect();
        let gains = vec![0.5, -1.0, 2.0];
        let model = MixingModel::new(filters, gains.clone(), 4).unwrap();
        let h = build_mixing_matrix(&model).unwrap();
        let p = model.block_cols();
        let impulse = SampledFilter::new(vec![1.0, 0.0, 0.0], 0.5).unwrap();
        let imp_block = toeplitz_filter_block(&impulse, 4).unwrap();
        for (m, &a) in gains.iter().enumerate() {
            for i in 0..4 {
                for j in 0..p {
                    assert_eq!(h[(m * 4 + i, p + j)], a * imp_block[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn mixing_matrix_rejects_unidentifiable_dims() {
        // M = 2, L' = L: 2 L' < 2 (L + L').
        let filters: Vec<_> = (0..2)
            .map(|_| SampledFilter::new(vec![1.0; 5], 1.0).unwrap())
            .collect();
        let model = MixingModel {
            task_filters: filters,
            artifact_gains: vec![1.0, 1.0],
            stack_depth: 4,
        };
        assert!(matches!(
            build_mixing_matrix(&model),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fit_pl_fwhm_recovers_reference_kernel() {
        let expected_fwhm = oracle_fwhm_t_exp();
        let p = fit_pl_fwhm(1.0, expected_fwhm).unwrap();
        assert_abs_diff_eq!(p.shape, 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.rate, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn fit_pl_fwhm_roundtrip_over_range() {
        for &(pl, w) in &[
            (0.25, 0.5),
            (0.25, 4.5),
            (4.5, 0.5),
            (4.5, 4.5),
            (1.3, 2.2),
        ] {
            let p = fit_pl_fwhm(pl, w).unwrap();
            assert_relative_eq!(peak_latency(&p).unwrap(), pl, max_relative = 1e-8);
            let sampled = gamma_hrf(&p, 0.002, 12000).unwrap();
            assert_abs_diff_eq!(fwhm(&sampled).unwrap(), w, epsilon = 0.01);
        }
    }

    #[test]
    fn width_latency_ratio_is_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let shape = 1.0 + (10.0_f64).powf(-4.0 + 8.0 * i as f64 / 59.0);
            let r = width_latency_ratio(shape);
            assert!(r < prev, "ratio not decreasing at shape {shape}");
            prev = r;
        }
    }
}
