mod common;

use common::{dataset, full_target, pair_oracle, pair_rich_multiset, random_query, random_rows, schema, Col};
use proptest::prelude::*;
use qbs_audit::analysis::{classify_difference_like, classify_generalized_difference_like, histogram};
use qbs_audit::inference::{likelihood_ratio_predict, train_logistic, FeatureMatrix, LogisticObjective, TrainConfig};
use qbs_audit::qbs::{seeded_gaussian, QbsConfig, QbsInstance, Salt};
use qbs_audit::query::{canonical_form, evaluate_userset, Predicate, Query};
use qbs_audit::search::stability_metric;
use qbs_audit::seed::rng_from_seed;
use rand::Rng;

const COLS: [Col; 4] = [Col::Cat(4), Col::Ord(12), Col::Cat(3), Col::Ord(20)];

fn naive_userset(rows: &[Vec<f64>], query: &Query) -> Vec<u64> {
    let mut out: Vec<u64> = rows
        .iter()
        .filter(|row| {
            query.predicates().iter().enumerate().all(|(a, p)| {
                let v = row[a];
                match *p {
                    Predicate::Skip => true,
                    Predicate::Eq(x) => v == x,
                    Predicate::Neq(x) => v != x,
                    Predicate::Between { low, high } => v >= low && v < high,
                    Predicate::In([x, y]) => v == x || v == y,
                    Predicate::NotIn([x, y]) => v != x && v != y,
                }
            })
        })
        .map(|row| row[0] as u64)
        .collect();
    out.sort_unstable();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn userset_matches_row_scan(seed in any::<u64>(), n in 0usize..200) {
        let mut rng = rng_from_seed(seed);
        let s = schema(&COLS);
        let rows = random_rows(&COLS, n, &mut rng);
        let d = dataset(&s, &rows);
        for _ in 0..10 {
            let q = random_query(&COLS, &mut rng);
            prop_assert_eq!(evaluate_userset(&d, &q), naive_userset(&rows, &q));
        }
    }

    #[test]
    fn canonical_form_identifies_equal_queries(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let s = schema(&COLS);
        let a = random_query(&COLS, &mut rng);
        let b = random_query(&COLS, &mut rng);
        let same = a.predicates().iter().zip(b.predicates())
            .all(|(x, y)| x.operator() == y.operator() && x.values() == y.values());
        prop_assert_eq!(canonical_form(&s, &a) == canonical_form(&s, &b), same);
        prop_assert_eq!(canonical_form(&s, &a), canonical_form(&s, &a.clone()));
    }

    #[test]
    fn difference_like_matches_pair_oracle(seed in any::<u64>(), m in 1usize..25) {
        let mut rng = rng_from_seed(seed);
        let cols = [Col::Cat(3), Col::Ord(10), Col::Cat(4)];
        let s = schema(&cols);
        let values: Vec<f64> = vec![rng.gen_range(0..3) as f64, rng.gen_range(0..10) as f64, rng.gen_range(0..4) as f64];
        let t = full_target(&s, 1, &values);
        let ms = pair_rich_multiset(&cols, &values, m, &mut rng);
        let plain = classify_difference_like(&ms, &t, &s);
        let general = classify_generalized_difference_like(&ms, &t, &s);
        prop_assert_eq!(&plain, &pair_oracle(&ms, &values, false));
        prop_assert_eq!(&general, &pair_oracle(&ms, &values, true));
        prop_assert!(plain.iter().all(|p| general.contains(p)));
    }

    #[test]
    fn answers_are_deterministic_across_instances(seed in any::<u64>(), salt in proptest::collection::vec(any::<u8>(), 1..16)) {
        let mut rng = rng_from_seed(seed);
        let s = schema(&COLS);
        let d = dataset(&s, &random_rows(&COLS, 120, &mut rng));
        let a = QbsInstance::new(Salt::new(salt.clone()).unwrap(), d.clone(), QbsConfig::default());
        let b = QbsInstance::new(Salt::new(salt).unwrap(), d, QbsConfig::default());
        b.set_cache_enabled(false);
        for _ in 0..20 {
            let q = random_query(&COLS, &mut rng);
            prop_assert_eq!(a.answer(&q), b.answer(&q));
            prop_assert_eq!(a.answer(&q), a.answer(&q));
        }
    }

    #[test]
    fn seeded_gaussian_is_a_pure_function(salt in proptest::collection::vec(any::<u8>(), 1..16), payload in proptest::collection::vec(any::<u8>(), 0..32)) {
        let s = Salt::new(salt).unwrap();
        let x = seeded_gaussian(&s, b"static", &payload, 0.0, 1.0);
        prop_assert!(x.is_finite());
        prop_assert_eq!(x.to_bits(), seeded_gaussian(&s, b"static", &payload, 0.0, 1.0).to_bits());
        let scaled = seeded_gaussian(&s, b"static", &payload, 3.0, 2.0);
        prop_assert!((scaled - (3.0 + 2.0 * x)).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), n in 5usize..40, m in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let obj = LogisticObjective::new(FeatureMatrix::from_rows(&rows).unwrap(), &labels, 1e-2).unwrap();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let (gw, gb) = obj.gradient(&w, b);
        let h = 1e-5;
        for j in 0..m {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (obj.loss(&up, b) - obj.loss(&down, b)) / (2.0 * h);
            prop_assert!((fd - gw[j]).abs() <= 1e-5 * gw[j].abs().max(1e-2), "{} vs {}", fd, gw[j]);
        }
        let fd = (obj.loss(&w, b + h) - obj.loss(&w, b - h)) / (2.0 * h);
        prop_assert!((fd - gb).abs() <= 1e-5 * gb.abs().max(1e-2));
    }

    #[test]
    fn predictions_invariant_to_affine_features(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let mut rng = rng_from_seed(seed);
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] + rng.gen_range(-3.0..3.0) > 5.0)).collect();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale + shift).collect()).collect();
        let config = TrainConfig::default();
        let a = train_logistic(&FeatureMatrix::from_rows(&rows).unwrap(), &labels, &config).unwrap();
        let b = train_logistic(&FeatureMatrix::from_rows(&moved).unwrap(), &labels, &config).unwrap();
        for (r, mr) in rows.iter().zip(&moved) {
            let (pa, la) = a.predict(r);
            let (pb, lb) = b.predict(mr);
            prop_assert!((pa - pb).abs() < 1e-6);
            if (pa - 0.5).abs() > 1e-6 {
                prop_assert_eq!(la, lb);
            }
        }
    }

    #[test]
    fn likelihood_ratio_monotone_in_tails(l in 1usize..8, v_n in 0u8..2, a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let boundary = -1.0 / l as f64;
        if lo >= 0.0 && likelihood_ratio_predict(lo, l, v_n) == v_n {
            prop_assert_eq!(likelihood_ratio_predict(hi, l, v_n), v_n);
        }
        if hi <= boundary && likelihood_ratio_predict(hi, l, v_n) == v_n {
            prop_assert_eq!(likelihood_ratio_predict(lo, l, v_n), v_n);
        }
    }

    #[test]
    fn histogram_counts_every_accuracy(acc in proptest::collection::vec(0.0f64..=1.0, 0..100)) {
        let h = histogram(&acc);
        prop_assert_eq!(h.len(), 40);
        prop_assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), acc.len());
    }

    #[test]
    fn stability_of_constant_trace_is_zero(v in 0.0f64..1.0, len in 100usize..300) {
        prop_assert_eq!(stability_metric(&vec![v; len]).unwrap(), 0.0);
    }
}
