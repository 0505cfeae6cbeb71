//! Analytic signals, instantaneous cross-spectra and weighted phase lag
//! index (wPLI) adjacency matrices.
//!
//! The estimator is `|mean_t Im(Cs[t])| / mean_t |Im(Cs[t])|` over the
//! instantaneous cross-spectrum `Cs[t] = z_m[t] · conj(z_n[t])` of two
//! analytic signals. It lies in `[0, 1]`, reaching 1 when one channel
//! consistently leads the other and 0 when the imaginary part averages out
//! or vanishes (zero-lag coupling, identical channels).

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::FftPlanner;

/// Below this denominator the index is defined as 0.
pub const WPLI_DENOM_FLOOR: f64 = 1e-12;
/// Channels whose spread stays under this are treated as constant.
pub const CONSTANT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConnectivityError {
    #[error("analytic signal needs at least 8 samples, got {0}")]
    TooShort(usize),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("channel {0} is constant; phase is undefined")]
    ConstantChannel(usize),
    #[error("adjacency needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticSignal {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl AnalyticSignal {
    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }

    pub fn sample(&self, t: usize) -> Complex64 {
        Complex64::new(self.real[t], self.imag[t])
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.real.iter().zip(&self.imag).map(|(r, i)| r.hypot(*i)).collect()
    }

    /// Instantaneous phase in `(-π, π]`.
    pub fn phase(&self) -> Vec<f64> {
        self.real.iter().zip(&self.imag).map(|(r, i)| i.atan2(*r)).collect()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Frequency-domain construction: zero the negative bins, double the
/// positive ones, keep DC (and Nyquist for even lengths).
pub fn analytic_signal(x: &[f64]) -> Result<AnalyticSignal, ConnectivityError> {
    let n = x.len();
    if n < 8 {
        return Err(ConnectivityError::TooShort(n));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    fwd.process(&mut buf);
    let half = n / 2;
    for (k, v) in buf.iter_mut().enumerate() {
        let h = if k == 0 || (n.is_multiple_of(2) && k == half) {
            1.0
        } else if k <= (n - 1) / 2 {
            2.0
        } else {
            0.0
        };
        *v *= h;
    }
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    Ok(AnalyticSignal {
        // The real part is the input itself up to rounding; keep it exact.
        real: x.to_vec(),
        imag: buf.iter().map(|c| c.im * scale).collect(),
    })
}

pub fn cross_spectrum(zm: &AnalyticSignal, zn: &AnalyticSignal) -> Result<Vec<Complex64>, ConnectivityError> {
    if zm.len() != zn.len() {
        return Err(ConnectivityError::LengthMismatch(zm.len(), zn.len()));
    }
    Ok((0..zm.len()).map(|t| zm.sample(t) * zn.sample(t).conj()).collect())
}

/// wPLI from an already computed pair of analytic signals.
pub fn wpli_from_analytic(zm: &AnalyticSignal, zn: &AnalyticSignal) -> Result<f64, ConnectivityError> {
    if zm.len() != zn.len() {
        return Err(ConnectivityError::LengthMismatch(zm.len(), zn.len()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..zm.len() {
        // Im(z_m · conj(z_n)) without forming the product.
        let im = zm.imag[t] * zn.real[t] - zm.real[t] * zn.imag[t];
        num += im;
        den += im.abs();
    }
    let n = zm.len() as f64;
    let (num, den) = ((num / n).abs(), den / n);
    if den < WPLI_DENOM_FLOOR {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

fn check_varies(x: &[f64], channel: usize) -> Result<(), ConnectivityError> {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if hi - lo < CONSTANT_FLOOR {
        return Err(ConnectivityError::ConstantChannel(channel));
    }
    Ok(())
}

pub fn wpli_pair(xm: &[f64], xn: &[f64]) -> Result<f64, ConnectivityError> {
    if xm.len() != xn.len() {
        return Err(ConnectivityError::LengthMismatch(xm.len(), xn.len()));
    }
    check_varies(xm, 0)?;
    check_varies(xn, 1)?;
    wpli_from_analytic(&analytic_signal(xm)?, &analytic_signal(xn)?)
}

/// Symmetric wPLI matrix with zero diagonal, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WpliAdjacency {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl WpliAdjacency {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            values: vec![0.0; channels * channels],
        }
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.channels + n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.channels)
    }

    /// Off-diagonal mean.
    pub fn mean_connectivity(&self) -> f64 {
        let c = self.channels;
        if c < 2 {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / (c * (c - 1)) as f64
    }

    /// Row-major CSV with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| format_sig(*v, 9)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Formats with `digits` significant digits in scientific notation.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{:.*e}", digits.saturating_sub(1), v)
}

/// Adjacency of a `C_e × T` window; each unordered pair is computed once.
pub fn wpli_adjacency(window: &[Vec<f64>]) -> Result<WpliAdjacency, ConnectivityError> {
    let c = window.len();
    if c < 2 {
        return Err(ConnectivityError::TooFewChannels(c));
    }
    let t = window[0].len();
    let mut signals = Vec::with_capacity(c);
    for (i, row) in window.iter().enumerate() {
        if row.len() != t {
            return Err(ConnectivityError::LengthMismatch(t, row.len()));
        }
        check_varies(row, i)?;
        signals.push(analytic_signal(row)?);
    }
    let mut adj = WpliAdjacency::zeros(c);
    for m in 0..c {
        for n in m + 1..c {
            let w = wpli_from_analytic(&signals[m], &signals[n])?;
            adj.values[m * c + n] = w;
            adj.values[n * c + m] = w;
        }
    }
    Ok(adj)
}

/// Like [`wpli_adjacency`], but a flat channel (no defined phase) is left
/// disconnected instead of failing the whole window.
pub fn wpli_adjacency_lenient(window: &[Vec<f64>]) -> Result<WpliAdjacency, ConnectivityError> {
    let c = window.len();
    let t = window.first().map_or(0, Vec::len);
    let mut signals = Vec::with_capacity(c);
    for (i, row) in window.iter().enumerate() {
        if row.len() != t {
            return Err(ConnectivityError::LengthMismatch(t, row.len()));
        }
        signals.push(match check_varies(row, i) {
            Ok(()) => Some(analytic_signal(row)?),
            Err(_) => None,
        });
    }
    let mut adj = WpliAdjacency::zeros(c);
    for m in 0..c {
        for n in m + 1..c {
            if let (Some(zm), Some(zn)) = (&signals[m], &signals[n]) {
                let w = wpli_from_analytic(zm, zn)?;
                adj.values[m * c + n] = w;
                adj.values[n * c + m] = w;
            }
        }
    }
    Ok(adj)
}
