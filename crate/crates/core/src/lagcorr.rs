//! Hankel-block embedding of observations and lagged autocorrelation
//! tensors.
//!
//! Stacking L' delayed copies of every region row turns the convolutive
//! mixture into an instantaneous one; the autocorrelation matrices of the
//! stacked vector over a range of lags form the tensor the decomposition
//! factorizes. The model counterpart is built from Toeplitz-block mixing
//! matrices and Toeplitz source autocorrelation cores whose slices are
//! lagged shifts of a single sequence.

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hrf::{build_mixing_matrix, MixingModel};
use crate::sim::RoiTimeSeries;

/// Stacked delayed observation windows: an `(M L') x (N - L' + 1)` matrix
/// whose column n holds `[y_1(n), ..., y_1(n-L'+1), ..., y_M(n), ...,
/// y_M(n-L'+1)]`.
#[derive(Debug, Clone)]
pub struct HankelStack {
    pub data: Array2<f64>,
    pub m_regions: usize,
    pub stack_depth: usize,
}

/// Embed a series into its Hankel stack with L' = `stack_depth` delays.
pub fn hankelize(series: &RoiTimeSeries, stack_depth: usize) -> Result<HankelStack> {
    let n = series.n_samples();
    let m = series.n_regions();
    if stack_depth < 1 {
        return Err(Error::Dimension("stack depth must be >= 1".into()));
    }
    if n <= stack_depth {
        return Err(Error::Dimension(format!(
            "need more samples than stack depth, got N = {n}, L' = {stack_depth}"
        )));
    }
    let cols = n - stack_depth + 1;
    let mut data = Array2::zeros((m * stack_depth, cols));
    for region in 0..m {
        for i in 0..stack_depth {
            for j in 0..cols {
                data[(region * stack_depth + i, j)] =
                    series.data[(region, stack_depth - 1 + j - i)];
            }
        }
    }
    Ok(HankelStack {
        data,
        m_regions: m,
        stack_depth,
    })
}

/// Average one Hankel block back into a single series of length `n_out`.
///
/// Entry (i, j) of the block is attributed to time `col_offset + j - i`;
/// entries mapping outside `[0, n_out)` are dropped. For an exactly
/// consistent Hankel block the average reproduces the series without
/// distortion.
pub fn collapse_hankel_block(
    block: ndarray::ArrayView2<f64>,
    col_offset: usize,
    n_out: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0; n_out];
    let mut count = vec![0usize; n_out];
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            let t = col_offset as isize + j as isize - i as isize;
            if t >= 0 && (t as usize) < n_out {
                acc[t as usize] += block[(i, j)];
                count[t as usize] += 1;
            }
        }
    }
    for (a, &c) in acc.iter_mut().zip(&count) {
        if c > 0 {
            *a /= c as f64;
        }
    }
    acc
}

/// Invert [`hankelize`] by anti-diagonal averaging of each region block.
pub fn dehankelize(stack: &HankelStack, fs: f64, labels: Vec<String>) -> Result<RoiTimeSeries> {
    let lp = stack.stack_depth;
    let n = stack.data.ncols() + lp - 1;
    let mut data = Array2::zeros((stack.m_regions, n));
    for region in 0..stack.m_regions {
        let block = stack.data.slice(s![region * lp..(region + 1) * lp, ..]);
        let row = collapse_hankel_block(block, lp - 1, n);
        for (t, v) in row.into_iter().enumerate() {
            data[(region, t)] = v;
        }
    }
    RoiTimeSeries::new(data, fs, labels)
}

/// Stack of lagged autocorrelation matrices of the Hankel embedding.
#[derive(Debug, Clone)]
pub struct LagCorrTensor {
    /// Shape `(n_lags, M L', M L')`; slice tau estimates E{x(n) x(n+tau)^T}.
    pub slices: Array3<f64>,
    pub m_regions: usize,
    pub stack_depth: usize,
}

impl LagCorrTensor {
    pub fn n_lags(&self) -> usize {
        self.slices.shape()[0]
    }

    /// Side length M L' of each slice.
    pub fn dim(&self) -> usize {
        self.slices.shape()[1]
    }

    /// Squared Frobenius norm summed over all slices.
    pub fn norm_sq(&self) -> f64 {
        self.slices.iter().map(|v| v * v).sum()
    }
}

/// Sample autocorrelation tensor with unbiased per-lag denominators.
///
/// Slice tau is `sum_n x(n) x(n+tau)^T / (N_v - tau)` over the stack
/// columns; the lag-0 slice is symmetrized.
pub fn autocorr_tensor(stack: &HankelStack, n_lags: usize) -> Result<LagCorrTensor> {
    let nv = stack.data.ncols();
    if n_lags == 0 {
        return Err(Error::Estimation("need at least one lag".into()));
    }
    if nv <= n_lags - 1 {
        return Err(Error::Estimation(format!(
            "too few stack columns ({nv}) for {n_lags} lags"
        )));
    }
    let d = stack.data.nrows();
    let mut slices = Array3::zeros((n_lags, d, d));
    let computed: Vec<(usize, Array2<f64>)> = (0..n_lags)
        .into_par_iter()
        .map(|tau| {
            let a = stack.data.slice(s![.., ..nv - tau]);
            let b = stack.data.slice(s![.., tau..]);
            let mut slice = a.dot(&b.t());
            slice.mapv_inplace(|v| v / (nv - tau) as f64);
            (tau, slice)
        })
        .collect();
    for (tau, slice) in computed {
        slices.slice_mut(s![tau, .., ..]).assign(&slice);
    }
    // Symmetrize lag 0.
    let s0 = slices.slice(s![0, .., ..]).to_owned();
    let sym = (&s0 + &s0.t()) * 0.5;
    slices.slice_mut(s![0, .., ..]).assign(&sym);

    if slices.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("non-finite autocorrelation entry".into()));
    }
    Ok(LagCorrTensor {
        slices,
        m_regions: stack.m_regions,
        stack_depth: stack.stack_depth,
    })
}

/// Symmetric source autocorrelation sequence c(k), stored for k >= 0 and
/// extended by c(-k) = c(k); zero beyond the stored length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCorrSequence {
    pub values: Vec<f64>,
}

impl SourceCorrSequence {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter(
                "autocorrelation sequence must be nonempty".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "non-finite autocorrelation value".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Unit impulse sequence (white source) of the given stored length.
    pub fn delta(len: usize) -> Self {
        let mut values = vec![0.0; len.max(1)];
        values[0] = 1.0;
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at signed lag k.
    #[inline]
    pub fn at(&self, k: isize) -> f64 {
        let a = k.unsigned_abs();
        if a < self.values.len() {
            self.values[a]
        } else {
            0.0
        }
    }

    /// Toeplitz core slice for lag tau: entry (i, j) = c(tau + i - j).
    pub fn core_slice(&self, tau: usize, size: usize) -> Array2<f64> {
        Array2::from_shape_fn((size, size), |(i, j)| {
            self.at(tau as isize + i as isize - j as isize)
        })
    }
}

/// Unbiased sample autocorrelation of a single series out to `n_lags - 1`.
pub fn sample_autocorr(x: &[f64], n_lags: usize) -> Vec<f64> {
    let n = x.len();
    (0..n_lags)
        .map(|k| {
            if k >= n {
                0.0
            } else {
                x.iter().zip(&x[k..]).map(|(a, b)| a * b).sum::<f64>() / (n - k) as f64
            }
        })
        .collect()
}

/// Population autocorrelation tensor implied by a mixing model and the two
/// source autocorrelation sequences.
///
/// Slice tau is `H_T C_T(tau) H_T^T + H_A C_A(tau) H_A^T` with Toeplitz
/// cores `C_r(tau)[i][j] = c_r(tau + i - j)`, i.e. the block-diagonal core
/// sandwiched by the full mixing matrix.
pub fn model_tensor(
    model: &MixingModel,
    task_corr: &SourceCorrSequence,
    artifact_corr: &SourceCorrSequence,
    n_lags: usize,
) -> Result<LagCorrTensor> {
    if n_lags == 0 {
        return Err(Error::Dimension("need at least one lag".into()));
    }
    let h = build_mixing_matrix(model)?;
    let p = model.block_cols();
    let d = h.nrows();
    let h_task = h.slice(s![.., ..p]);
    let h_art = h.slice(s![.., p..]);
    let mut slices = Array3::zeros((n_lags, d, d));
    for tau in 0..n_lags {
        let core_t = task_corr.core_slice(tau, p);
        let core_a = artifact_corr.core_slice(tau, p);
        let term_t = h_task.dot(&core_t).dot(&h_task.t());
        let term_a = h_art.dot(&core_a).dot(&h_art.t());
        slices
            .slice_mut(s![tau, .., ..])
            .assign(&(&term_t + &term_a));
    }
    Ok(LagCorrTensor {
        slices,
        m_regions: model.m_regions(),
        stack_depth: model.stack_depth,
    })
}
