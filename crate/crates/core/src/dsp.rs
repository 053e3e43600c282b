//! Sampled-signal utilities: PCHIP interpolation, uniform resampling,
//! zero-phase Butterworth filtering, differentiation and extremum search.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Samples per edge added by [`filtfilt_butter2`]: four times the filter order.
pub const FILTFILT_PAD: usize = 8;

/// Minimum record length accepted by [`filtfilt_butter2`].
pub const FILTFILT_MIN_LEN: usize = 12;

/// A scalar channel sampled at strictly increasing times (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSignal {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl SampledSignal {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidSignal(format!(
                "{} timestamps but {} values",
                times.len(),
                values.len()
            )));
        }
        if let Some(i) = times.iter().chain(&values).position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("non-finite entry at position {i}")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSignal(format!(
                "timestamps not strictly increasing at sample {}",
                i + 1
            )));
        }
        Ok(SampledSignal { times, values })
    }

    /// Uniformly sampled signal starting at `t0`.
    pub fn uniform(t0: f64, rate: f64, values: Vec<f64>) -> Result<Self> {
        let times = (0..values.len()).map(|k| t0 + k as f64 / rate).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Sampling rate of a uniformly sampled signal.
    pub fn uniform_rate(&self) -> Result<f64> {
        uniform_rate(&self.times)
    }
}

/// Sampling rate implied by `times`, or an error if the spacing is not uniform.
pub fn uniform_rate(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: times.len(),
        });
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    let tol = 1e-6 * dt;
    if let Some(i) = times.windows(2).position(|w| ((w[1] - w[0]) - dt).abs() > tol) {
        return Err(Error::InvalidSignal(format!(
            "non-uniform sampling at sample {}",
            i + 1
        )));
    }
    Ok(1.0 / dt)
}

/// Fritsch–Carlson knot slopes (the same shape-preserving rule as MATLAB's
/// `pchip`): weighted harmonic means inside, three-point formula at the ends.
fn pchip_slopes(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (d0, d1) = (delta[k - 1], delta[k]);
        if d0 == 0.0 || d1 == 0.0 || (d0 > 0.0) != (d1 > 0.0) {
            d[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() || del0 == 0.0 {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

/// Shape-preserving piecewise cubic Hermite interpolation at `query` times.
///
/// Exact at the knots and never overshoots local data extrema. Queries outside
/// `[t_1, t_N]` are rejected.
pub fn pchip_interpolate(signal: &SampledSignal, query: &[f64]) -> Result<SampledSignal> {
    let values = pchip_values(&signal.times, &signal.values, query)?;
    SampledSignal::new(query.to_vec(), values)
}

pub(crate) fn pchip_values(t: &[f64], y: &[f64], query: &[f64]) -> Result<Vec<f64>> {
    let n = t.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let (start, end) = (t[0], t[n - 1]);
    let d = pchip_slopes(t, y);
    query
        .iter()
        .map(|&q| {
            if !(q >= start && q <= end) {
                return Err(Error::OutOfRange { time: q, start, end });
            }
            // interval k with t[k] <= q <= t[k+1]
            let k = t.partition_point(|&tk| tk <= q).clamp(1, n - 1) - 1;
            if q == t[k] {
                return Ok(y[k]);
            }
            let h = t[k + 1] - t[k];
            let s = (q - t[k]) / h;
            let s2 = s * s;
            let s3 = s2 * s;
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            Ok(h00 * y[k] + h10 * h * d[k] + h01 * y[k + 1] + h11 * h * d[k + 1])
        })
        .collect()
}

/// Grid `t_1 + k / rate` covering `[t_1, t_N]`.
pub fn uniform_grid(start: f64, end: f64, rate: f64) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!("sample rate must be positive, got {rate}")));
    }
    let span = end - start;
    if span < 2.0 / rate {
        return Err(Error::InvalidSignal(format!(
            "span {span} s shorter than two periods at {rate} Hz"
        )));
    }
    let count = (span * rate + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| start + k as f64 / rate).collect())
}

/// Resamples onto a uniform grid starting at the first timestamp, via PCHIP.
pub fn resample_uniform(signal: &SampledSignal, rate: f64) -> Result<SampledSignal> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let (start, end) = (signal.times[0], signal.times[n - 1]);
    let grid = uniform_grid(start, end, rate)?;
    // the last grid point may exceed `end` by rounding
    let query: Vec<f64> = grid.iter().map(|&q| q.min(end)).collect();
    let values = pchip_values(&signal.times, &signal.values, &query)?;
    SampledSignal::new(grid, values)
}

/// Second-order IIR section, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// 2nd-order Butterworth low-pass by bilinear transform with pre-warping.
    pub fn butterworth_lowpass(cutoff: f64, rate: f64) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff < rate / 2.0) {
            return Err(Error::Config(format!(
                "cutoff {cutoff} Hz must lie in (0, {}) Hz",
                rate / 2.0
            )));
        }
        let k = (PI * cutoff / rate).tan();
        let k2 = k * k;
        let norm = 1.0 / (1.0 + SQRT_2 * k + k2);
        let b0 = k2 * norm;
        Ok(Biquad {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k2 - 1.0) * norm, (1.0 - SQRT_2 * k + k2) * norm],
        })
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Direct-form-II-transposed state for a unit step held forever.
    fn steady_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    /// Runs the section over `x` from initial state `z`.
    pub fn run(&self, x: &[f64], mut z: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        x.iter()
            .map(|&xi| {
                let y = b0 * xi + z[0];
                z[0] = b1 * xi - a1 * y + z[1];
                z[1] = b2 * xi - a2 * y;
                y
            })
            .collect()
    }

    /// Causal filtering started in steady state at the first input value.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        match x.first() {
            Some(&x0) => self.run(x, self.steady_state().map(|z| z * x0)),
            None => Vec::new(),
        }
    }
}

fn forward_backward(section: &Biquad, padded: &[f64]) -> Vec<f64> {
    let mut y = section.filter(padded);
    y.reverse();
    let mut y = section.filter(&y);
    y.reverse();
    y
}

/// Zero-phase low-pass: a 2nd-order Butterworth run forward then backward.
///
/// The record is extended at both ends by [`FILTFILT_PAD`] samples of odd
/// reflection about the end values, and each pass starts in the steady state of
/// its first input. The forward-backward and backward-forward results are
/// averaged, which makes the output exactly reversal-symmetric; away from the
/// edges the two orderings agree to rounding.
pub fn filtfilt_butter2(values: &[f64], rate: f64, cutoff: f64) -> Result<Vec<f64>> {
    let section = Biquad::butterworth_lowpass(cutoff, rate)?;
    let n = values.len();
    if n < FILTFILT_MIN_LEN {
        return Err(Error::TooShort {
            needed: FILTFILT_MIN_LEN,
            got: n,
        });
    }
    let (first, last) = (values[0], values[n - 1]);
    let mut padded = Vec::with_capacity(n + 2 * FILTFILT_PAD);
    padded.extend((1..=FILTFILT_PAD).rev().map(|k| 2.0 * first - values[k]));
    padded.extend_from_slice(values);
    padded.extend((1..=FILTFILT_PAD).map(|k| 2.0 * last - values[n - 1 - k]));

    let fb = forward_backward(&section, &padded);
    padded.reverse();
    let mut bf = forward_backward(&section, &padded);
    bf.reverse();

    Ok(fb[FILTFILT_PAD..FILTFILT_PAD + n]
        .iter()
        .zip(&bf[FILTFILT_PAD..FILTFILT_PAD + n])
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

/// [`filtfilt_butter2`] on a uniformly sampled signal.
pub fn filtfilt_signal(signal: &SampledSignal, cutoff: f64) -> Result<SampledSignal> {
    let rate = signal.uniform_rate()?;
    let values = filtfilt_butter2(&signal.values, rate, cutoff)?;
    SampledSignal::new(signal.times.clone(), values)
}

/// Derivative of a uniformly sampled channel: central differences inside,
/// second-order one-sided stencils at both ends.
pub fn differentiate_values(values: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let inv = 1.0 / (2.0 * dt);
    let mut out = Vec::with_capacity(n);
    out.push((-3.0 * values[0] + 4.0 * values[1] - values[2]) * inv);
    out.extend(values.windows(3).map(|w| (w[2] - w[0]) * inv));
    out.push((3.0 * values[n - 1] - 4.0 * values[n - 2] + values[n - 3]) * inv);
    Ok(out)
}

pub fn differentiate(signal: &SampledSignal) -> Result<SampledSignal> {
    if signal.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: signal.len(),
        });
    }
    let rate = signal.uniform_rate()?;
    let values = differentiate_values(&signal.values, 1.0 / rate)?;
    SampledSignal::new(signal.times.clone(), values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtremumKind {
    Min,
    Max,
}

/// Interior local extrema (0-based indices).
///
/// A sample qualifies when it is strictly beyond its left neighbour and the
/// first sample after any run of equal values is strictly beyond it too. A
/// plateau reports its first index.
pub fn local_extrema(values: &[f64], kind: ExtremumKind) -> Vec<usize> {
    let n = values.len();
    let beyond = |a: f64, b: f64| match kind {
        ExtremumKind::Min => a < b,
        ExtremumKind::Max => a > b,
    };
    let mut out = Vec::new();
    let mut j = 1;
    while j + 1 < n {
        if beyond(values[j], values[j - 1]) {
            let mut k = j;
            while k + 1 < n && values[k + 1] == values[j] {
                k += 1;
            }
            if k + 1 < n && beyond(values[j], values[k + 1]) {
                out.push(j);
            }
            j = k + 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}
