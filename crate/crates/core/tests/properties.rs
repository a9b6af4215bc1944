use accmv::data::{build_strata, read_csv, CsvSchema, Dataset, Functional, Record};
use accmv::estimators::{
    augmentation_term, compute_weights, estimate_ipw, estimate_mr, estimate_ra, Odds, OddsSet, Outcome, OutcomeSet,
};
use accmv::glm::{fit_odds, Basis, FitOptions};
use accmv::inference::resample_indices;
use accmv::pattern::PatternPair;
use accmv::sensitivity::{tilted_estimate, Tilt};
use proptest::prelude::*;

/// Records with random values and masks; the last record is always complete.
fn dataset(p: usize, d: usize) -> impl Strategy<Value = Dataset> {
    let rec = (
        prop::collection::vec((any::<bool>(), -3.0..3.0f64), p),
        prop::collection::vec((any::<bool>(), -3.0..3.0f64), d),
    );
    prop::collection::vec(rec, 2..60).prop_map(move |rows| {
        let n = rows.len();
        let recs = rows
            .into_iter()
            .enumerate()
            .map(|(i, (x, l))| {
                let keep = |(m, v): (bool, f64)| (m || i + 1 == n).then_some(v);
                Record::new(x.into_iter().map(keep).collect(), l.into_iter().map(keep).collect()).unwrap()
            })
            .collect();
        Dataset::from_records(recs).unwrap()
    })
}

fn smooth_nuisances(ds: &Dataset, scale: f64) -> (OddsSet, OutcomeSet) {
    let strata = build_strata(ds);
    let mut odds = OddsSet::new();
    let mut outcomes = OutcomeSet::new();
    for pair in strata.incomplete_pairs() {
        let k = pair.a.value() as f64 + 1.0;
        odds.insert(
            pair,
            Odds::oracle(pair, move |x, l| {
                scale * (0.2 * x.iter().chain(l).sum::<f64>() / k).exp()
            }),
        );
        outcomes.insert(
            pair,
            Outcome::oracle(pair, move |x, l| {
                0.3 * k + x.iter().sum::<f64>() - 0.5 * l.iter().sum::<f64>()
            }),
        );
    }
    (odds, outcomes)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn estimators_decompose_by_stratum(ds in dataset(2, 2), scale in 0.1..3.0f64) {
        let strata = build_strata(&ds);
        let f = Functional::Product(vec![0, 1]);
        let (odds, outcomes) = smooth_nuisances(&ds, scale);
        for est in [
            estimate_ipw(&ds, &strata, &odds, &f, false).unwrap(),
            estimate_ipw(&ds, &strata, &odds, &f, true).unwrap(),
            estimate_ra(&ds, &strata, &outcomes, &f).unwrap(),
            estimate_mr(&ds, &strata, &odds, &outcomes, &f).unwrap(),
        ] {
            prop_assert!(close(est.decomposition_sum(), est.theta, 1e-12));
            let mean = est.contributions.iter().sum::<f64>() / ds.n() as f64;
            prop_assert!(close(mean, est.theta, 1e-12));
        }
    }

    #[test]
    fn mr_is_ra_plus_augmentation(ds in dataset(2, 1), scale in 0.1..3.0f64) {
        let strata = build_strata(&ds);
        let f = Functional::Coordinate(0);
        let (odds, outcomes) = smooth_nuisances(&ds, scale);
        let mr = estimate_mr(&ds, &strata, &odds, &outcomes, &f).unwrap().theta;
        let ra = estimate_ra(&ds, &strata, &outcomes, &f).unwrap().theta;
        let aug = augmentation_term(&ds, &strata, &odds, &outcomes, &f).unwrap();
        prop_assert!(close(mr, ra + aug, 1e-12));
    }

    #[test]
    fn complete_case_weights_are_at_least_one(ds in dataset(1, 2), scale in 0.01..5.0f64) {
        let strata = build_strata(&ds);
        let (odds, _) = smooth_nuisances(&ds, scale);
        let wt = compute_weights(&ds, &strata, &odds, None).unwrap();
        prop_assert_eq!(wt.indices.len(), strata.complete_cases().len());
        prop_assert!(wt.weights.iter().all(|&w| w >= 1.0));
    }

    #[test]
    fn ipw_ignores_record_order(ds in dataset(1, 1), seed in any::<u64>()) {
        let strata = build_strata(&ds);
        let f = Functional::Coordinate(0);
        let (odds, _) = smooth_nuisances(&ds, 0.7);
        let a = estimate_ipw(&ds, &strata, &odds, &f, false).unwrap().theta;
        let mut idx: Vec<usize> = (0..ds.n()).collect();
        let shuffle = resample_indices(ds.n(), seed, 0);
        for (i, j) in shuffle.iter().enumerate() {
            idx.swap(i, *j);
        }
        let perm = ds.subset(&idx);
        let b = estimate_ipw(&perm, &build_strata(&perm), &odds, &f, false).unwrap().theta;
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn zero_tilt_matches_self_normalized_ipw(ds in dataset(2, 2), scale in 0.1..3.0f64) {
        let strata = build_strata(&ds);
        let f = Functional::Average(vec![0, 1]);
        let (odds, _) = smooth_nuisances(&ds, scale);
        let sn = estimate_ipw(&ds, &strata, &odds, &f, true).unwrap().theta;
        let t = tilted_estimate(&ds, &strata, &odds, &f, &Tilt::zero(2)).unwrap();
        prop_assert!((sn - t).abs() <= 1e-12);
    }

    #[test]
    fn tilted_mean_stays_in_observed_range(ds in dataset(1, 1), delta in -3.0..3.0f64, c in -1.0..1.0f64) {
        // self-normalized with positive weights, so a convex combination of observed ℓ.
        // Not monotone in δ in general: untilted mass on some cases can pull the other way.
        let strata = build_strata(&ds);
        let f = Functional::Coordinate(0);
        let (odds, _) = smooth_nuisances(&ds, 1.0);
        let t = tilted_estimate(&ds, &strata, &odds, &f, &Tilt::new(vec![delta], vec![c]).unwrap()).unwrap();
        let seen: Vec<f64> = ds.records().iter().filter_map(|r| r.l()[0]).collect();
        let lo = seen.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = seen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t >= lo - 1e-12 && t <= hi + 1e-12, "{t} outside [{lo}, {hi}]");
    }

    #[test]
    fn resampling_is_deterministic_and_in_range(n in 1usize..500, seed in any::<u64>(), b in 0usize..1000) {
        let a = resample_indices(n, seed, b);
        prop_assert_eq!(&a, &resample_indices(n, seed, b));
        prop_assert!(a.iter().all(|&i| i < n));
    }

    #[test]
    fn csv_round_trip_is_exact(ds in dataset(2, 2)) {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::new(ds.x_names().to_vec(), ds.l_names().to_vec())).unwrap();
        prop_assert_eq!(back.records(), ds.records());
    }

    #[test]
    fn fitted_odds_solve_the_score(xs in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, 0.0..1.0f64), 80..200)) {
        let recs: Vec<Record> = xs
            .iter()
            .map(|&(x, l, u)| {
                let p = 1.0 / (1.0 + (-(0.4 * x - 0.2)).exp());
                Record::new(vec![Some(x)], vec![(u >= p).then_some(l)]).unwrap()
            })
            .collect();
        let ds = Dataset::from_records(recs).unwrap();
        let strata = build_strata(&ds);
        let pair = PatternPair::parse("1,0").unwrap();
        prop_assume!(strata.stratum(&pair).len() >= 10 && strata.pool(&pair.r).len() >= 10);
        if let Ok(m) = fit_odds(&ds, &strata, &pair, &Basis::Affine, &FitOptions::default()) {
            // logistic score of case against pool, p = O / (1 + O)
            let prob = |i: usize| {
                let o = m.evaluate(&ds.records()[i]).unwrap();
                o / (1.0 + o)
            };
            let mut s = [0.0, 0.0];
            for &i in strata.stratum(&pair) {
                let x = ds.records()[i].x()[0].unwrap();
                s[0] += 1.0 - prob(i);
                s[1] += (1.0 - prob(i)) * x;
            }
            for &i in strata.pool(&pair.r) {
                let x = ds.records()[i].x()[0].unwrap();
                s[0] -= prob(i);
                s[1] -= prob(i) * x;
            }
            // convergence is declared on the score per record
            let n = ds.n() as f64;
            prop_assert!(s[0].abs() / n < 1e-8 && s[1].abs() / n < 1e-8, "{s:?}");
        }
    }
}
