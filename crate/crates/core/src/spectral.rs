//! Fourier-domain pre-adjustment.
//!
//! Spectral coordinates `(p, q)` index the DFT along `u` (columns) and `v`
//! (rows). Each coefficient gets an effective frequency in cycles per domain
//! unit, computed from aliasing-aware magnitudes `min(p, M - p)`, so on the
//! unit square `(3, 4)` has frequency 5. A high-pass filter with cutoff `w`
//! keeps exactly the coefficients whose frequency is strictly above `w`.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

/// Effective frequency of spectral coordinate `(p, q)` on `grid`.
pub fn effective_frequency(p: usize, q: usize, grid: &Grid) -> Result<f64> {
    let (m, n) = (grid.m(), grid.n());
    if p >= m || q >= n {
        return Err(Error::FrequencyOutOfRange { p, q, m, n });
    }
    Ok(frequency_unchecked(p, q, grid))
}

fn frequency_unchecked(p: usize, q: usize, grid: &Grid) -> f64 {
    let (m, n) = (grid.m(), grid.n());
    let pa = p.min(m - p) as f64;
    let qa = q.min(n - q) as f64;
    let (wu, wv) = grid.extent();
    (pa / wu).hypot(qa / wv)
}

/// Binary high-pass mask: 1 where the effective frequency exceeds the cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyFilter {
    cutoff: f64,
    m: usize,
    n: usize,
    keep: Vec<bool>,
}

impl FrequencyFilter {
    pub fn new(cutoff: f64, grid: &Grid) -> Result<Self> {
        if !(cutoff >= 0.0) || !cutoff.is_finite() {
            return Err(Error::InvalidConfig(format!("cutoff must be finite and non-negative, got {cutoff}")));
        }
        let (m, n) = (grid.m(), grid.n());
        let keep = (0..n)
            .flat_map(|q| (0..m).map(move |p| (p, q)))
            .map(|(p, q)| frequency_unchecked(p, q, grid) > cutoff)
            .collect();
        Ok(Self { cutoff, m, n, keep })
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn keeps(&self, p: usize, q: usize) -> bool {
        self.keep[q * self.m + p]
    }

    /// Number of (complex) coefficients removed, i.e. the dimension of the
    /// real sine/cosine space that the filter projects out.
    pub fn removed_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.m, self.n)
    }
}

/// DFT coefficients of a field, row-major with `p` varying fastest.
#[derive(Clone, Debug)]
pub struct Spectrum {
    m: usize,
    n: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    /// Unnormalised forward transform.
    pub fn forward(values: &[f64], m: usize, n: usize) -> Self {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut data, m, n, false);
        Self { m, n, data }
    }

    pub fn of_field(field: &Field) -> Self {
        Self::forward(&field.filled(0.0), field.grid().m(), field.grid().n())
    }

    pub fn coefficient(&self, p: usize, q: usize) -> Complex64 {
        self.data[q * self.m + p]
    }

    pub fn apply(&mut self, filter: &FrequencyFilter) {
        debug_assert_eq!(filter.dims(), (self.m, self.n));
        for (c, &keep) in self.data.iter_mut().zip(&filter.keep) {
            if !keep {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Inverse transform scaled by `1 / (MN)`; returns the real part and the
    /// largest absolute imaginary residue.
    pub fn inverse(&self) -> (Vec<f64>, f64) {
        let mut data = self.data.clone();
        fft2(&mut data, self.m, self.n, true);
        let scale = 1.0 / (self.m * self.n) as f64;
        let max_imag = data.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
        (data.iter().map(|c| c.re * scale).collect(), max_imag)
    }

    /// Sum of squared magnitudes over coefficients the filter removes,
    /// scaled so that a full sum equals the field's squared norm.
    pub fn energy_removed(&self, filter: &FrequencyFilter) -> f64 {
        let scale = 1.0 / (self.m * self.n) as f64;
        self.data.iter().zip(&filter.keep).filter(|(_, &k)| !k).map(|(c, _)| c.norm_sqr() * scale).sum()
    }
}

/// In-place 2-D FFT over row-major data with `m` columns and `n` rows.
pub(crate) fn fft2(data: &mut [Complex64], m: usize, n: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(m), planner.plan_fft_inverse(n))
    } else {
        (planner.plan_fft_forward(m), planner.plan_fft_forward(n))
    };
    row_fft.process(data);
    let mut column = vec![Complex64::new(0.0, 0.0); n];
    for p in 0..m {
        for (q, c) in column.iter_mut().enumerate() {
            *c = data[q * m + p];
        }
        col_fft.process(&mut column);
        for (q, c) in column.iter().enumerate() {
            data[q * m + p] = *c;
        }
    }
}

/// Removes every Fourier component with effective frequency at or below
/// `cutoff`. Masked-out cells are zero-filled before the transform and
/// zeroed again afterwards.
pub fn highpass_preadjust(field: &Field, cutoff: f64) -> Result<Field> {
    let filter = FrequencyFilter::new(cutoff, field.grid())?;
    highpass_with(field, &filter)
}

pub fn highpass_with(field: &Field, filter: &FrequencyFilter) -> Result<Field> {
    let mut spec = Spectrum::of_field(field);
    spec.apply(filter);
    let (values, max_imag) = spec.inverse();
    let scale = field.norm().max(f64::MIN_POSITIVE);
    if max_imag > 1e-9 * scale {
        log::warn!("high-pass output has imaginary residue {max_imag:e}");
    }
    field.with_values(values)
}

/// Spatial kernel of the high-pass filter: the inverse DFT of the mask,
/// indexed by displacement (cell `(0, 0)` is zero displacement).
pub fn filter_kernel(cutoff: f64, grid: &Grid) -> Result<Field> {
    let filter = FrequencyFilter::new(cutoff, grid)?;
    let spec = Spectrum {
        m: grid.m(),
        n: grid.n(),
        data: filter.keep.iter().map(|&k| Complex64::new(if k { 1.0 } else { 0.0 }, 0.0)).collect(),
    };
    let (values, _) = spec.inverse();
    Field::new(grid.clone(), values)
}
