mod common;

use std::collections::BTreeSet;

use crowdda::data::{density_from_points, scene_filter, DensityMap, FilterRule, PointAnnotation, SceneMeta, TimeOfDay};
use crowdda::losses::semantic_reshape;
use crowdda::metrics::{mae, mse, ssim_with_range, EvalReport, SampleRecord};
use crowdda::networks::{
    Counter, CounterConfig, FeatureDiscConfig, FeatureDiscriminator, MapDiscConfig, MapDiscriminator, Refiner,
    RefinerConfig,
};
use crowdda::Tensor;
use proptest::prelude::*;

use common::rng;

fn points(h: usize, w: usize, n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64), n)
}

fn map_strategy(min: usize, max: usize) -> impl Strategy<Value = DensityMap> {
    (min..=max, min..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0..1.0f64, h * w).prop_map(move |d| DensityMap::new(h, w, d, 1.0).unwrap())
    })
}

fn meta_strategy() -> impl Strategy<Value = SceneMeta> {
    (0u8..=8, 0u16..1440, 0u8..=6, 0u32..1200, 0.0..=1.0f64).prop_map(|(level, t, weather, count, ratio)| SceneMeta {
        level,
        time: TimeOfDay(t),
        weather,
        count,
        ratio,
    })
}

fn rule_strategy() -> impl Strategy<Value = FilterRule> {
    (
        prop::collection::btree_set(0u8..=8, 0..6),
        (0u16..1440, 0u16..1440),
        prop::collection::btree_set(0u8..=6, 0..5),
        (0u32..1200, 0u32..1200),
        (0.0..=1.0f64, 0.0..=1.0f64),
    )
        .prop_map(|(levels, t, weathers, c, r)| FilterRule {
            levels,
            time: (TimeOfDay(t.0.min(t.1)), TimeOfDay(t.0.max(t.1))),
            weathers,
            count: (c.0.min(c.1), c.0.max(c.1)),
            ratio: (r.0.min(r.1), r.0.max(r.1)),
        })
}

/// Widen one aspect of `rule` selected by `which`, by `amount`.
fn widen(rule: &FilterRule, which: usize, amount: u32, extra: u8) -> FilterRule {
    let mut r = rule.clone();
    match which {
        0 => {
            r.levels.insert(extra % 9);
        }
        1 => {
            r.weathers.insert(extra % 7);
        }
        2 => r.time = (TimeOfDay(r.time.0 .0.saturating_sub(amount as u16)), r.time.1),
        3 => r.time = (r.time.0, TimeOfDay((r.time.1 .0 + amount as u16).min(1439))),
        4 => r.count = (r.count.0.saturating_sub(amount), r.count.1),
        5 => r.count = (r.count.0, r.count.1 + amount),
        6 => r.ratio = ((r.ratio.0 - amount as f64 / 1000.0).max(0.0), r.ratio.1),
        _ => r.ratio = (r.ratio.0, (r.ratio.1 + amount as f64 / 1000.0).min(1.0)),
    }
    r
}

fn small_counter(width: usize, seed: u64) -> Counter {
    let mut cfg = CounterConfig::small(width);
    cfg.spatial_kernel = 3;
    Counter::new(cfg, &mut rng(seed)).unwrap()
}

fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor {
    common::random_tensor(&mut rng(seed), shape, -1.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_sums_to_point_count(
        (h, w, pts) in (16usize..96, 16usize..96, 0usize..40)
            .prop_flat_map(|(h, w, n)| (Just(h), Just(w), points(h, w, n))),
        sigma in 0.5..8.0f64,
        scale_idx in 0usize..4,
    ) {
        let scale = [1.0, 0.5, 0.25, 0.125][scale_idx];
        let n = pts.len();
        let map = density_from_points(&PointAnnotation::new(pts), (h, w), sigma, scale).unwrap();
        prop_assert!((map.sum() - n as f64).abs() <= 1e-3 * (n.max(1) as f64));
        prop_assert!(map.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn semantic_reshape_keeps_mass(map in map_strategy(16, 32), q in 0.8..=1.2f64) {
        let out = semantic_reshape(&map, 1.0, q).unwrap();
        prop_assert!((out.sum() - map.sum()).abs() <= 0.01 * map.sum());
        let same = semantic_reshape(&map, q, q).unwrap();
        prop_assert_eq!(same.data(), map.data());
    }

    #[test]
    fn widening_a_rule_never_rejects_an_accepted_record(
        meta in meta_strategy(),
        rule in rule_strategy(),
        which in 0usize..8,
        amount in 0u32..300,
        extra in any::<u8>(),
    ) {
        let wider = widen(&rule, which, amount, extra);
        if scene_filter(&meta, &rule) {
            prop_assert!(scene_filter(&meta, &wider));
        }
    }

    #[test]
    fn rmse_is_at_least_mae(pairs in prop::collection::vec((0.0..1e3f64, 0.0..1e3f64), 1..60)) {
        let (gt, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (a, s) = (mae(&gt, &pred).unwrap(), mse(&gt, &pred).unwrap());
        prop_assert!(s >= a * (1.0 - 1e-12));
    }

    #[test]
    fn report_aggregates_ignore_sample_order(
        rows in prop::collection::vec((0.0..500.0f64, 0.0..500.0f64, 0.0..60.0f64, -1.0..1.0f64), 1..30),
        rot in 0usize..30,
    ) {
        let records: Vec<SampleRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(g, p, psnr_db, ssim))| SampleRecord { name: format!("s{i}"), gt_count: g, pred_count: p, psnr_db, ssim })
            .collect();
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % records.len());
        shuffled.reverse();
        let (a, b) = (EvalReport::from_records(records).unwrap(), EvalReport::from_records(shuffled).unwrap());
        for (x, y) in [(a.mae, b.mae), (a.mse, b.mse), (a.psnr_db, b.psnr_db), (a.ssim, b.ssim)] {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric_and_scale_invariant(
        (a, b) in (11usize..24, 11usize..24).prop_flat_map(|(h, w)| {
            let m = move || prop::collection::vec(0.0..1.0f64, h * w).prop_map(move |d| DensityMap::new(h, w, d, 1.0).unwrap());
            (m(), m())
        }),
        range in 0.1..4.0f64,
        k in 0.01..100.0f64,
    ) {
        let ab = ssim_with_range(&a, &b, range).unwrap();
        let ba = ssim_with_range(&b, &a, range).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        let scale = |m: &DensityMap| DensityMap::new(m.height(), m.width(), m.data().iter().map(|v| v * k).collect(), 1.0).unwrap();
        let scaled = ssim_with_range(&scale(&a), &scale(&b), range * k).unwrap();
        prop_assert!((ab - scaled).abs() <= 1e-9, "{ab} vs {scaled}");
    }

    #[test]
    fn network_shapes_close_and_stay_finite(
        hb in 1usize..5,
        wb in 1usize..5,
        width in 1usize..4,
        seed in any::<u64>(),
    ) {
        let counter = small_counter(width, seed);
        let s = counter.config().stride();
        let (h, w) = (hb * s, wb * s);
        let image = uniform_tensor(&[3, h, w], seed ^ 1);
        let out = counter.counter_forward(&image).unwrap();
        prop_assert_eq!(out.density.dims(), (hb, wb));
        prop_assert_eq!(out.f1.shape(), &[2 * width, hb, wb][..]);
        prop_assert_eq!(out.f2.shape(), &[2 * width, hb, wb][..]);
        prop_assert!(out.density.as_tensor().all_finite() && out.f1.all_finite() && out.f2.all_finite());

        let d = FeatureDiscriminator::new(2 * width, FeatureDiscConfig { widths: vec![3, 3, 3, 2] }, &mut rng(seed ^ 2)).unwrap();
        let scores = d.feature_disc_forward(&out.f1).unwrap();
        prop_assert_eq!(scores.logits.shape(), &[1, 2, hb, wb][..]);
        prop_assert!(scores.logits.all_finite());

        let md = MapDiscriminator::new(MapDiscConfig { widths: vec![2, 2] }, &mut rng(seed ^ 3)).unwrap();
        let (mh, mw) = (md.min_size() + hb, md.min_size() + wb);
        let v = md.map_disc_forward(&uniform_tensor(&[1, 1, mh, mw], seed ^ 4)).unwrap();
        prop_assert_eq!(v.logits.shape(), &[1, 2][..]);
        prop_assert!(v.logits.all_finite());

        let r = Refiner::new(RefinerConfig { widths: [2, 2, 2], kernels: [5, 3, 3, 3, 5] }, &mut rng(seed ^ 5)).unwrap();
        let (rh, rw) = (16 + 3 * hb, 16 + 5 * wb);
        let coarse = DensityMap::from_tensor(uniform_tensor(&[1, 1, rh, rw], seed ^ 6), 1.0).unwrap();
        let refined = r.refiner_forward(&coarse).unwrap();
        prop_assert_eq!(refined.dims(), (rh, rw));
        prop_assert!(refined.as_tensor().all_finite());
    }
}

#[test]
fn fixture_rules_are_closed_ranges() {
    // Every preset accepts both ends of each of its ranges.
    for rule in common::table_rules() {
        let lo = SceneMeta {
            level: *rule.levels.iter().next().unwrap(),
            time: rule.time.0,
            weather: *rule.weathers.iter().next().unwrap(),
            count: rule.count.0,
            ratio: rule.ratio.0,
        };
        let hi = SceneMeta {
            level: *rule.levels.iter().last().unwrap(),
            time: rule.time.1,
            weather: *rule.weathers.iter().last().unwrap(),
            count: rule.count.1,
            ratio: rule.ratio.1,
        };
        assert!(scene_filter(&lo, &rule) && scene_filter(&hi, &rule), "{rule:?}");
        assert_eq!(rule.weathers, BTreeSet::from([0, 1, 5, 6]));
    }
}
