//! Preprocessing: Butterworth band-pass design, causal filtering, 2:1
//! decimation, 1-second windowing and per-channel z-scoring.

use std::f64::consts::PI;

use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("invalid band [{low}, {high}] Hz for sample rate {fs} Hz")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("filter order must be at least 1")]
    InvalidOrder,
    #[error("series of length {0} cannot be halved")]
    OddLength(usize),
    #[error("trial of {samples} samples yields no {window}-sample window after skipping {skip}")]
    NoWindows { samples: usize, window: usize, skip: usize },
    #[error("matrix rows disagree in length")]
    Ragged,
}

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Section {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Section {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Roots of `z^2 + a1 z + a2` lie strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        // Jury conditions for a monic quadratic.
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }
}

/// Second-order-section cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub prototype_order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate: f64,
    pub sections: Vec<Section>,
}

impl FilterSpec {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn gain(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Section::is_stable)
    }

    /// Discrete order of the cascade.
    pub fn order(&self) -> usize {
        self.sections
            .iter()
            .map(|s| if s.a2 == 0.0 && s.b2 == 0.0 { 1 } else { 2 })
            .sum()
    }
}

/// Left-half-plane poles of the unit-cutoff analog Butterworth prototype.
fn prototype_poles(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn prewarp(freq_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq_hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

/// Groups z-plane poles into conjugate pairs (or pairs of real poles) and
/// builds denominators. Each entry is `(a1, a2, second_order)`.
fn pole_sections(mut poles: Vec<Complex64>) -> Vec<(f64, f64, bool)> {
    const TOL: f64 = 1e-10;
    poles.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
    let (real, complex): (Vec<_>, Vec<_>) = poles.into_iter().partition(|p| p.im.abs() < TOL);
    let mut out: Vec<(f64, f64, bool)> = complex
        .iter()
        .filter(|p| p.im > 0.0)
        .map(|p| (-2.0 * p.re, p.norm_sqr(), true))
        .collect();
    for pair in real.chunks(2) {
        match pair {
            [a, b] => out.push((-(a.re + b.re), a.re * b.re, true)),
            [a] => out.push((-a.re, 0.0, false)),
            _ => unreachable!(),
        }
    }
    out
}

fn normalize_gain(spec: &mut FilterSpec, at_hz: f64) {
    let g = spec.gain(at_hz);
    if let Some(first) = spec.sections.first_mut() {
        first.b0 /= g;
        first.b1 /= g;
        first.b2 /= g;
    }
}

/// Band-pass from an analog Butterworth prototype of `order` via the
/// pre-warped bilinear transform; the discrete filter has order `2·order`.
pub fn design_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<FilterSpec, SignalError> {
    if order == 0 {
        return Err(SignalError::InvalidOrder);
    }
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(SignalError::InvalidBand { low, high, fs });
    }
    let (w1, w2) = (prewarp(low, fs), prewarp(high, fs));
    let w0 = (w1 * w2).sqrt();
    let bw = w2 - w1;
    let mut zpoles = Vec::with_capacity(2 * order);
    for p in prototype_poles(order) {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        zpoles.push(bilinear(half + disc, fs));
        zpoles.push(bilinear(half - disc, fs));
    }
    // Each section carries one zero at z = 1 (analog DC) and one at z = -1.
    let sections = pole_sections(zpoles)
        .into_iter()
        .map(|(a1, a2, _)| Section {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1,
            a2,
        })
        .collect();
    let mut spec = FilterSpec {
        prototype_order: order,
        low_hz: low,
        high_hz: high,
        sample_rate: fs,
        sections,
    };
    // Analog centre w0 maps to this digital frequency under the warp.
    let centre = fs / PI * (w0 / (2.0 * fs)).atan();
    normalize_gain(&mut spec, centre);
    Ok(spec)
}

/// Low-pass Butterworth of `order` with unit DC gain.
pub fn design_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<FilterSpec, SignalError> {
    if order == 0 {
        return Err(SignalError::InvalidOrder);
    }
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        return Err(SignalError::InvalidBand {
            low: 0.0,
            high: cutoff,
            fs,
        });
    }
    let wc = prewarp(cutoff, fs);
    let zpoles = prototype_poles(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    // All zeros sit at z = -1 (analog infinity).
    let sections = pole_sections(zpoles)
        .into_iter()
        .map(|(a1, a2, second)| {
            if second {
                Section {
                    b0: 1.0,
                    b1: 2.0,
                    b2: 1.0,
                    a1,
                    a2,
                }
            } else {
                Section {
                    b0: 1.0,
                    b1: 1.0,
                    b2: 0.0,
                    a1,
                    a2: 0.0,
                }
            }
        })
        .collect();
    let mut spec = FilterSpec {
        prototype_order: order,
        low_hz: 0.0,
        high_hz: cutoff,
        sample_rate: fs,
        sections,
    };
    normalize_gain(&mut spec, 0.0);
    Ok(spec)
}

/// Causal cascade filtering from zero initial state (transposed direct form II).
pub fn apply_filter(x: &[f64], spec: &FilterSpec) -> Vec<f64> {
    run_cascade(x, spec, false)
}

/// Causal filtering whose state starts at the steady response to a constant
/// `x[0]`, so a constant input passes without a start-up transient.
fn apply_filter_settled(x: &[f64], spec: &FilterSpec) -> Vec<f64> {
    run_cascade(x, spec, true)
}

fn run_cascade(x: &[f64], spec: &FilterSpec, settled: bool) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in &spec.sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        if settled {
            if let Some(&u) = y.first() {
                let dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
                let out = dc * u;
                z2 = s.b2 * u - s.a2 * out;
                z1 = s.b1 * u - s.a1 * out + z2;
            }
        }
        for v in y.iter_mut() {
            let input = *v;
            let out = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * out + z2;
            z2 = s.b2 * input - s.a2 * out;
            *v = out;
        }
    }
    y
}

/// Anti-aliased 2:1 decimation. `fs_out` is the rate after decimation.
pub fn resample_half(x: &[f64], fs_out: f64) -> Result<Vec<f64>, SignalError> {
    if !x.len().is_multiple_of(2) {
        return Err(SignalError::OddLength(x.len()));
    }
    let lp = design_lowpass(3, 0.45 * fs_out, 2.0 * fs_out)?;
    let filtered = apply_filter_settled(x, &lp);
    Ok(filtered.into_iter().step_by(2).collect())
}

/// Non-overlapping windows of `fs·window_seconds` samples starting after
/// `skip_seconds`; a trailing partial window is dropped.
pub fn segment_windows(
    trial: &[Vec<f64>],
    fs: f64,
    window_seconds: f64,
    skip_seconds: f64,
) -> Result<Vec<Vec<Vec<f64>>>, SignalError> {
    let samples = trial.first().map_or(0, Vec::len);
    if trial.iter().any(|r| r.len() != samples) {
        return Err(SignalError::Ragged);
    }
    let window = (fs * window_seconds).round() as usize;
    let skip = (fs * skip_seconds).round() as usize;
    let count = if window == 0 {
        0
    } else {
        samples.saturating_sub(skip) / window
    };
    if count == 0 {
        return Err(SignalError::NoWindows { samples, window, skip });
    }
    Ok((0..count)
        .map(|w| {
            let start = skip + w * window;
            trial.iter().map(|r| r[start..start + window].to_vec()).collect()
        })
        .collect())
}

/// Per-channel standardization; near-constant channels become zeros.
pub fn zscore(window: &[Vec<f64>]) -> Vec<Vec<f64>> {
    window
        .iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd < 1e-8 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|v| (v - mean) / sd).collect()
            }
        })
        .collect()
}
