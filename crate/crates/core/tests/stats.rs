mod common;

use std::collections::BTreeMap;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use needlemetrics::ingest::Expertise;
use needlemetrics::stats::{
    self, replicate_rng, Comparison, ParticipantCells, ParticipantSeries, Recommendation, Transform, Window,
};

fn cells(groups: &[(Expertise, f64, f64)]) -> Vec<ParticipantCells> {
    groups
        .iter()
        .enumerate()
        .map(|(i, &(expertise, early, late))| ParticipantCells {
            participant_id: format!("p{i:02}"),
            expertise,
            early,
            late,
        })
        .collect()
}

fn design() -> impl Strategy<Value = Vec<ParticipantCells>> {
    (2usize..10, 2usize..10).prop_flat_map(|(ne, nn)| {
        prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), ne + nn).prop_map(move |v| {
            let rows: Vec<(Expertise, f64, f64)> = v
                .into_iter()
                .enumerate()
                .map(|(i, (e, l))| {
                    let g = if i < ne {
                        Expertise::Experienced
                    } else {
                        Expertise::Novice
                    };
                    (g, e, l)
                })
                .collect();
            cells(&rows)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn anova_matches_regression_oracle(c in design()) {
        let r = stats::mixed_anova_2x2(&c, 0.05).unwrap();
        let oracle = common::anova_by_regression(&c);
        for (f, o) in [r.expertise.f, r.trial.f, r.interaction.f].iter().zip(oracle) {
            prop_assert!((f - o).abs() <= 1e-9 * o.abs().max(1.0), "{} vs {}", f, o);
        }
        let n = c.len() as u32;
        for e in [r.expertise, r.trial, r.interaction] {
            prop_assert_eq!((e.df_num, e.df_den), (1, n - 2));
            prop_assert!((0.0..=1.0).contains(&e.p));
        }
    }

    #[test]
    fn anova_is_shift_and_scale_invariant(c in design(), shift in -1e3f64..1e3, scale in 0.01f64..100.0) {
        let moved: Vec<ParticipantCells> = c
            .iter()
            .map(|x| ParticipantCells { early: x.early * scale + shift, late: x.late * scale + shift, ..x.clone() })
            .collect();
        let (a, b) = (stats::mixed_anova_2x2(&c, 0.05).unwrap(), stats::mixed_anova_2x2(&moved, 0.05).unwrap());
        for (x, y) in [(a.expertise, b.expertise), (a.trial, b.trial), (a.interaction, b.interaction)] {
            prop_assert!((x.f - y.f).abs() <= 1e-6 * x.f.abs().max(1.0));
        }
    }

    #[test]
    fn bootstrap_interval_is_ordered_and_inside_the_data(v in prop::collection::vec(-10.0f64..10.0, 2..40), seed in 0u64..1000) {
        let (lo, hi) = stats::bootstrap_ci(&v, 0.95, 200, seed).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
    }
}

#[test]
fn constant_tables_have_no_effects() {
    let c = cells(&[
        (Expertise::Experienced, 3.0, 3.0),
        (Expertise::Experienced, 3.0, 3.0),
        (Expertise::Novice, 3.0, 3.0),
        (Expertise::Novice, 3.0, 3.0),
    ]);
    let r = stats::mixed_anova_2x2(&c, 0.05).unwrap();
    for e in [r.expertise, r.trial, r.interaction] {
        assert_eq!((e.f, e.p), (0.0, 1.0));
    }
}

#[test]
fn noiseless_effects_are_infinitely_significant() {
    let c = cells(&[
        (Expertise::Experienced, 1.0, 2.0),
        (Expertise::Experienced, 1.0, 2.0),
        (Expertise::Novice, 0.0, 1.0),
        (Expertise::Novice, 0.0, 1.0),
    ]);
    let r = stats::mixed_anova_2x2(&c, 0.05).unwrap();
    assert_eq!((r.expertise.f, r.expertise.p), (f64::INFINITY, 0.0));
    assert_eq!((r.trial.f, r.trial.p), (f64::INFINITY, 0.0));
    assert_eq!((r.interaction.f, r.interaction.p), (0.0, 1.0));
    assert_eq!(r.effect_sizes.exp_minus_nov, 1.0);
    assert_eq!(r.effect_sizes.late_minus_early, 1.0);
}

#[test]
fn single_participant_group_is_rejected() {
    let c = cells(&[
        (Expertise::Experienced, 1.0, 2.0),
        (Expertise::Novice, 0.0, 1.0),
        (Expertise::Novice, 0.5, 1.0),
    ]);
    assert!(stats::mixed_anova_2x2(&c, 0.05).is_err());
}

#[test]
fn post_hoc_finds_the_improving_group() {
    // experienced flat, novices improve by 2 with small noise
    let mut rows = Vec::new();
    let mut rng = replicate_rng(5, 0);
    for i in 0..15 {
        let g = if i < 6 {
            Expertise::Experienced
        } else {
            Expertise::Novice
        };
        let e: f64 = StandardNormal.sample(&mut rng);
        let l: f64 = StandardNormal.sample(&mut rng);
        let gain = if g == Expertise::Novice { 2.0 } else { 0.0 };
        rows.push((g, 5.0 + 0.2 * e, 5.0 + gain + 0.2 * l));
    }
    let r = stats::mixed_anova_2x2(&cells(&rows), 0.05).unwrap();
    assert!(r.interaction.p < 0.05 && r.simple_effects_reported);
    let by: BTreeMap<String, _> = r
        .post_hoc
        .iter()
        .map(|p| {
            (
                serde_json::to_value(p.comparison)
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string(),
                *p,
            )
        })
        .collect();
    assert!(by["Late-Early Nov"].significant);
    assert!(!by["Late-Early Exp"].significant);
    assert!(by["Exp-Nov Late"].significant && by["Exp-Nov Late"].difference < 0.0);
    for p in &r.post_hoc {
        assert_eq!(p.df, 13);
        assert_relative_eq!(p.p_adjusted, (4.0 * p.p).min(1.0), epsilon = 1e-15);
        assert_eq!(p.significant, p.p < 0.05 / 4.0);
    }
    assert_eq!(r.post_hoc.len(), 4);
    assert_eq!(r.post_hoc[0].comparison, Comparison::ExpNovEarly);
}

#[test]
fn bonferroni_decision() {
    let b = stats::bonferroni(0.0124, 4, 0.05);
    assert!(b.significant);
    assert_relative_eq!(b.p_adjusted, 0.0496);
    assert!(!stats::bonferroni(0.0126, 4, 0.05).significant);
    assert_eq!(stats::bonferroni(0.5, 4, 0.05).p_adjusted, 1.0);
}

const SKEWED: [f64; 20] = [
    2.1, 3.4, 1.9, 5.6, 2.2, 2.8, 3.1, 9.7, 2.5, 2.0, 4.4, 3.3, 2.7, 1.8, 6.1, 2.9, 3.0, 2.4, 7.8, 2.6,
];

#[test]
fn lilliefors_statistic_matches_reference() {
    // statistics from an independent implementation (statsmodels, sd with ddof 1)
    let raw = stats::lilliefors(&SKEWED, 999, 1).unwrap();
    assert_relative_eq!(raw.statistic, 0.29049079718814763, epsilon = 1e-12);
    assert!(raw.p < 0.01);
    let logged: Vec<f64> = SKEWED.iter().map(|v| v.ln()).collect();
    let log = stats::lilliefors(&logged, 999, 1).unwrap();
    assert_relative_eq!(log.statistic, 0.19948273331368038, epsilon = 1e-12);
    // reference table p is 0.037; the Monte-Carlo p should agree loosely
    assert!((0.015..0.07).contains(&log.p), "{}", log.p);
}

#[test]
fn lilliefors_rejects_at_nominal_rate_under_normality() {
    let sims = 400;
    let mut rejections = 0;
    for i in 0..sims {
        let mut rng = replicate_rng(7, i);
        let x: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        rejections += (stats::lilliefors(&x, 199, 1000 + i).unwrap().p < 0.05) as usize;
    }
    let rate = rejections as f64 / sims as f64;
    assert!((0.02..0.09).contains(&rate), "{rate}");
}

#[test]
fn lilliefors_guards() {
    assert!(stats::lilliefors(&[1.0, 2.0, 3.0, 4.0], 10, 0).is_err());
    assert!(stats::lilliefors(&[1.0; 8], 10, 0).is_err());
}

#[test]
fn transform_screen() {
    let skewed: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            let mut rng = replicate_rng(8, k);
            (0..40)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (1.0 * z).exp()
                })
                .collect()
        })
        .collect();
    let advice = stats::select_transform(&skewed, 0.05, 499, 3).unwrap();
    assert_eq!(advice.recommendation, Recommendation::Log);

    let normal: Vec<Vec<f64>> = skewed.iter().map(|c| c.iter().map(|v| v.ln()).collect()).collect();
    assert_eq!(
        stats::select_transform(&normal, 0.05, 499, 3).unwrap().recommendation,
        Recommendation::None
    );

    let shifted: Vec<Vec<f64>> = skewed.iter().map(|c| c.iter().map(|v| v - 1.0).collect()).collect();
    let advice = stats::select_transform(&shifted, 0.05, 499, 3).unwrap();
    assert_eq!(advice.recommendation, Recommendation::LogInfeasible);
    assert!(advice.log.is_none());
    assert!(Transform::Log.apply(0.0).is_err());
}

#[test]
fn bootstrap_covers_the_mean() {
    let sims = 300;
    let mut covered = 0;
    for i in 0..sims {
        let mut rng = replicate_rng(9, i);
        let x: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = stats::bootstrap_ci(&x, 0.95, 1000, 5000 + i).unwrap();
        covered += (lo <= 0.0 && 0.0 <= hi) as usize;
    }
    let rate = covered as f64 / sims as f64;
    // the percentile interval runs slightly narrow at n = 30
    assert!((0.90..0.98).contains(&rate), "{rate}");
}

#[test]
fn bootstrap_is_seeded() {
    let v: Vec<f64> = (0..25).map(|k| (k as f64).sqrt()).collect();
    assert_eq!(
        stats::bootstrap_ci(&v, 0.9, 500, 4).unwrap(),
        stats::bootstrap_ci(&v, 0.9, 500, 4).unwrap()
    );
    assert_ne!(
        stats::bootstrap_ci(&v, 0.9, 500, 4).unwrap(),
        stats::bootstrap_ci(&v, 0.9, 500, 5).unwrap()
    );
    assert!(stats::bootstrap_ci(&[1.0], 0.9, 500, 4).is_err());
}

fn series(values: &[(u32, Option<f64>)]) -> ParticipantSeries {
    ParticipantSeries {
        participant_id: "p".into(),
        expertise: Expertise::Novice,
        values: values.iter().copied().collect(),
    }
}

#[test]
fn early_late_windows() {
    let all: Vec<(u32, Option<f64>)> = (1..=30).map(|k| (k, Some(k as f64))).collect();
    assert_eq!(stats::early_late(&series(&all), 10, 30), Ok((5.5, 25.5)));
    // excluded trials drop out of the window mean
    let mut gappy = all.clone();
    gappy[0].1 = None;
    assert_eq!(stats::early_late(&series(&gappy), 10, 30), Ok((6.0, 25.5)));
    // an empty late window is reported, not guessed
    let short: Vec<(u32, Option<f64>)> = (1..=15).map(|k| (k, Some(1.0))).collect();
    assert_eq!(stats::early_late(&series(&short), 10, 30), Err(Window::Late));
    let none: Vec<(u32, Option<f64>)> = (1..=30).map(|k| (k, (k > 10).then_some(1.0))).collect();
    assert_eq!(stats::early_late(&series(&none), 10, 30), Err(Window::Early));
}

#[test]
fn learning_curve_has_one_point_per_trial_and_group() {
    let mut s = Vec::new();
    for (i, g) in [
        Expertise::Experienced,
        Expertise::Experienced,
        Expertise::Novice,
        Expertise::Novice,
    ]
    .into_iter()
    .enumerate()
    {
        s.push(ParticipantSeries {
            participant_id: format!("p{i}"),
            expertise: g,
            values: (1..=5).map(|k| (k, Some(k as f64 + i as f64))).collect(),
        });
    }
    let curve = stats::learning_curve(&s, 0.95, 200, 1).unwrap();
    assert_eq!(curve.len(), 10);
    for p in &curve {
        assert!(p.ci_lo <= p.mean && p.mean <= p.ci_hi);
    }
}
