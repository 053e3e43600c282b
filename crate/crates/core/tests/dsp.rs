use proptest::prelude::*;

use needlemetrics::dsp::{self, ExtremumKind, SampledSignal};
use needlemetrics::Error;

fn record(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, min..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn filtfilt_is_linear(x in record(12, 200), k in -3.0f64..3.0, c in -10.0f64..10.0) {
        let y = dsp::filtfilt_butter2(&x, 100.0, 6.0).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| k * v + c).collect();
        let ys = dsp::filtfilt_butter2(&scaled, 100.0, 6.0).unwrap();
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((k * a + c - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn filtfilt_commutes_with_reversal(x in record(12, 300), cutoff in 0.5f64..40.0) {
        let fwd = dsp::filtfilt_butter2(&x, 100.0, cutoff).unwrap();
        let rx: Vec<f64> = x.iter().rev().copied().collect();
        let mut back = dsp::filtfilt_butter2(&rx, 100.0, cutoff).unwrap();
        back.reverse();
        for (a, b) in fwd.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn filtfilt_does_not_amplify(x in record(12, 300)) {
        // the magnitude response never exceeds one, so energy cannot grow
        // by more than the edge padding allows
        let y = dsp::filtfilt_butter2(&x, 100.0, 6.0).unwrap();
        let peak_in = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let peak_out = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(peak_out <= 2.5 * peak_in + 1e-9);
    }

    #[test]
    fn pchip_stays_within_neighbouring_knots(values in record(2, 40), u in 0.0f64..1.0) {
        let n = values.len();
        let s = SampledSignal::uniform(0.0, 10.0, values.clone()).unwrap();
        let t = u * (n - 1) as f64 / 10.0;
        let y = dsp::pchip_interpolate(&s, &[t]).unwrap().values()[0];
        let k = ((t * 10.0).floor() as usize).min(n - 2);
        let (lo, hi) = (values[k].min(values[k + 1]), values[k].max(values[k + 1]));
        prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
    }

    #[test]
    fn pchip_preserves_monotonicity(mut values in record(3, 30)) {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let s = SampledSignal::uniform(0.0, 1.0, values).unwrap();
        let query: Vec<f64> = (0..=200).map(|k| k as f64 * (n - 1) as f64 / 200.0).collect();
        let y = dsp::pchip_interpolate(&s, &query).unwrap();
        prop_assert!(y.values().windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn percentile_is_bounded_and_monotone(values in record(1, 60), p in 0.0f64..100.0, q in 0.0f64..100.0) {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (a, b) = (dsp::percentile(&values, p).unwrap(), dsp::percentile(&values, q).unwrap());
        prop_assert!(a >= min && a <= max);
        prop_assert!((p <= q) == (a <= b) || a == b);
    }

    #[test]
    fn extrema_are_strict_neighbourhood_extremes(values in prop::collection::vec(-3i32..3, 3..60)) {
        let x: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        for j in dsp::local_extrema(&x, ExtremumKind::Min) {
            prop_assert!(j > 0 && j + 1 < x.len());
            prop_assert!(x[j] < x[j - 1]);
            let next = x[j..].iter().find(|v| **v != x[j]).copied();
            prop_assert!(next.is_some_and(|v| v > x[j]));
        }
        for j in dsp::local_extrema(&x, ExtremumKind::Max) {
            prop_assert!(x[j] > x[j - 1]);
        }
    }
}

#[test]
fn cutoff_tone_has_half_power() {
    for (rate, cutoff) in [(100.0, 6.0), (100.0, 4.0), (120.0, 8.0), (100.0, 3.0)] {
        let n = (60.0 * rate) as usize;
        let tone: Vec<f64> = (0..n)
            .map(|k| (2.0 * std::f64::consts::PI * cutoff * k as f64 / rate).cos())
            .collect();
        let y = dsp::filtfilt_butter2(&tone, rate, cutoff).unwrap();
        let amp = y[n / 4..3 * n / 4].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((amp - 0.5).abs() < 0.01, "{rate} Hz / {cutoff} Hz: {amp}");
    }
}

#[test]
fn passband_and_stopband() {
    let rate = 100.0;
    let gain = |f: f64| {
        let n = 6000;
        let x: Vec<f64> = (0..n)
            .map(|k| (2.0 * std::f64::consts::PI * f * k as f64 / rate).sin())
            .collect();
        let y = dsp::filtfilt_butter2(&x, rate, 6.0).unwrap();
        y[n / 4..3 * n / 4].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    assert!(gain(0.5) > 0.999);
    assert!(gain(24.0) < 0.01);
}

#[test]
fn derivative_of_a_quadratic_is_exact_inside() {
    let s = SampledSignal::uniform(0.0, 100.0, (0..50).map(|k| (k as f64 / 100.0).powi(2)).collect()).unwrap();
    let d = dsp::differentiate(&s).unwrap();
    for k in 1..49 {
        assert!((d.values()[k] - 2.0 * k as f64 / 100.0).abs() < 1e-12);
    }
}

#[test]
fn bad_filter_requests_are_errors() {
    assert!(matches!(
        dsp::filtfilt_butter2(&[0.0; 11], 100.0, 6.0),
        Err(Error::TooShort { needed: 12, got: 11 })
    ));
    assert!(dsp::filtfilt_butter2(&[0.0; 20], 100.0, 50.0).is_err());
    assert!(dsp::filtfilt_butter2(&[0.0; 20], 100.0, 0.0).is_err());
}
