//! Measurement routines shared by the dedicated test files and the
//! acceptance suite. Each returns the worst error it saw per named check so
//! callers can apply their own tolerances.

use std::f64::consts::LN_2;

use crowdda::autograd::Graph;
use crowdda::data::{density_from_points, scene_filter, PointAnnotation};
use crowdda::losses::{
    adv_loss_graph, disc_loss_graph, loss_count, loss_feature_adv, loss_feature_disc, loss_map_adv, loss_map_disc,
    loss_spr, loss_total, mse_graph, semantic_reshape, spr_graph, LossComponents, LossWeights, PixelReduction,
    PyramidScales,
};
use crowdda::metrics::{mae, mse, ssim_with_range};
use crowdda::networks::{FeatureDiscriminator, ScoreMap, ScoreVector};
use crowdda::Tensor;
use rand::Rng;

use super::*;

fn score_map(t: Tensor) -> ScoreMap {
    ScoreMap { logits: t }
}

fn score_vector(t: Tensor) -> ScoreVector {
    ScoreVector { logits: t }
}

/// Largest absolute deviation of each loss from its scalar oracle over
/// `trials` random instances with maps of at most 4x4.
pub fn loss_oracle_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 8];
    for _ in 0..trials {
        let (n, h, w) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4));

        let pred = random_map(&mut r, h, w);
        let gt = random_map(&mut r, h, w);
        let e = (loss_count(&pred, &gt).unwrap() - oracle_mse(pred.data(), gt.data())).abs();
        worst[0] = worst[0].max(e);

        let src = random_tensor(&mut r, &[n, 2, h, w], -4.0, 4.0);
        let tgt = random_tensor(&mut r, &[n, 2, h, w], -4.0, 4.0);
        for (k, red, sum) in [(1, PixelReduction::Mean, false), (2, PixelReduction::Sum, true)] {
            let got = loss_feature_disc(&score_map(src.clone()), &score_map(tgt.clone()), red).unwrap();
            let want = oracle_disc(src.data(), tgt.data(), (n, h, w), sum);
            worst[k] = worst[k].max((got - want).abs());
        }
        for (k, red, sum) in [(3, PixelReduction::Mean, false), (4, PixelReduction::Sum, true)] {
            let maps = [score_map(src.clone()), score_map(tgt.clone())];
            let got = loss_feature_adv(&[&maps[0], &maps[1]], red).unwrap();
            let want = oracle_adv(&[src.data(), tgt.data()], (n, h, w), sum);
            worst[k] = worst[k].max((got - want).abs());
        }

        let b = r.random_range(1..=4);
        let vs = random_tensor(&mut r, &[b, 2], -4.0, 4.0);
        let vt = random_tensor(&mut r, &[b, 2], -4.0, 4.0);
        let got = loss_map_disc(&score_vector(vs.clone()), &score_vector(vt.clone())).unwrap();
        worst[5] = worst[5].max((got - oracle_disc(vs.data(), vt.data(), (b, 1, 1), false)).abs());
        let got = loss_map_adv(&score_vector(vt.clone())).unwrap();
        worst[6] = worst[6].max((got - oracle_adv(&[vt.data()], (b, 1, 1), false)).abs());

        let (h1, w1) = (r.random_range(2..=4), r.random_range(2..=4));
        let a1 = random_map(&mut r, h1, w1);
        let am = random_map(&mut r, h1 - 1, w1 - 1);
        let an = random_map(&mut r, h1 + 1, w1 + 1);
        let (m, nn) = (r.random_range(0.81..0.99), r.random_range(1.01..1.19));
        let got = loss_spr(&a1, &am, &an, PyramidScales::new(m, nn).unwrap()).unwrap();
        let want = oracle_spr(&a1, &[(&am, m * m), (&an, nn * nn)]);
        worst[7] = worst[7].max((got - want).abs());
    }
    let names = [
        "count",
        "feature disc (mean)",
        "feature disc (sum)",
        "feature adv (mean)",
        "feature adv (sum)",
        "map disc",
        "map adv",
        "pyramid",
    ];
    names.into_iter().zip(worst).collect()
}

/// Deviation of each adversarial loss from its closed form at uniform
/// logits, plus the weighted-total arithmetic example.
pub fn closed_form_errors() -> Vec<(&'static str, f64)> {
    let (h, w) = (3, 4);
    let zeros = score_map(Tensor::zeros(&[1, 2, h, w]));
    let zv = score_vector(Tensor::zeros(&[1, 2]));
    let hw = (h * w) as f64;
    let total =
        loss_total(&LossComponents { cnt: 1.0, adv_feature: 2.0, adv_map: 3.0, spr: 4.0 }, &LossWeights::default());
    vec![
        (
            "feature disc sum = 2 hw ln2",
            (loss_feature_disc(&zeros, &zeros, PixelReduction::Sum).unwrap() - 2.0 * hw * LN_2).abs(),
        ),
        (
            "feature disc mean = 2 ln2",
            (loss_feature_disc(&zeros, &zeros, PixelReduction::Mean).unwrap() - 2.0 * LN_2).abs(),
        ),
        (
            "feature adv sum, two taps = 2 hw ln2",
            (loss_feature_adv(&[&zeros, &zeros], PixelReduction::Sum).unwrap() - 2.0 * hw * LN_2).abs(),
        ),
        ("map disc = 2 ln2", (loss_map_disc(&zv, &zv).unwrap() - 2.0 * LN_2).abs()),
        ("map adv = ln2", (loss_map_adv(&zv).unwrap() - LN_2).abs()),
        ("total of (1,2,3,4) = 1.405", (total - 1.405).abs()),
    ]
}

/// Finite-difference gradient errors for every loss on toy networks of at
/// most 200 parameters, with central step `h`.
pub fn gradient_errors(h: f64) -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let counter = toy_counter(3);
    let d_feat = toy_feature_disc(2, 4);
    let d_map = toy_map_disc(5);
    for n in [counter.params(), d_feat.params(), d_map.params()] {
        assert!(n.num_scalars() <= 200, "toy network has {} parameters", n.num_scalars());
    }
    let x_src = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let x_tgt = random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
    let x_m = resize_input(&x_tgt, 6);
    let x_n = resize_input(&x_tgt, 10);
    let gt = random_tensor(&mut r, &[1, 1, 4, 4], 0.0, 1.0);

    // Frozen counter taps used as discriminator inputs.
    let taps = |x: &Tensor| {
        let mut g = Graph::new();
        let p = counter.params().bind(&mut g, false);
        let xv = g.constant(x.clone());
        let t = counter.forward(&mut g, &p, xv).unwrap();
        (g.value(t.f1).clone(), g.value(t.density).clone())
    };
    let (f_src, a_src) = taps(&x_src);
    let (f_tgt, a_tgt) = taps(&x_tgt);

    let mut out = Vec::new();
    out.push((
        "count wrt counter",
        grad_check(&counter, h, |c, g, p| {
            let x = g.constant(x_src.clone());
            let t = c.forward(g, p, x).unwrap();
            let y = g.constant(gt.clone());
            mse_graph(g, t.density, y).unwrap()
        }),
    ));
    for (name, red) in
        [("feature disc (mean) wrt D", PixelReduction::Mean), ("feature disc (sum) wrt D", PixelReduction::Sum)]
    {
        out.push((
            name,
            grad_check(&d_feat, h, |d, g, p| {
                let (a, b) = (g.constant(f_src.clone()), g.constant(f_tgt.clone()));
                let (sa, sb) = (d.forward(g, p, a).unwrap(), d.forward(g, p, b).unwrap());
                disc_loss_graph(g, sa, sb, red).unwrap()
            }),
        ));
    }
    out.push((
        "map disc wrt D",
        grad_check(&d_map, h, |d, g, p| {
            let (a, b) = (g.constant(a_src.clone()), g.constant(a_tgt.clone()));
            let (sa, sb) = (d.forward(g, p, a).unwrap(), d.forward(g, p, b).unwrap());
            disc_loss_graph(g, sa, sb, PixelReduction::Mean).unwrap()
        }),
    ));
    for (name, red) in [
        ("feature adv (mean) wrt counter", PixelReduction::Mean),
        ("feature adv (sum) wrt counter", PixelReduction::Sum),
    ] {
        out.push((
            name,
            grad_check(&counter, h, |c, g, p| {
                let x = g.constant(x_tgt.clone());
                let t = c.forward(g, p, x).unwrap();
                let scores = frozen_feature_scores(&d_feat, g, &[t.f1, t.f2]);
                adv_loss_graph(g, &scores, red).unwrap()
            }),
        ));
    }
    out.push((
        "map adv wrt counter",
        grad_check(&counter, h, |c, g, p| {
            let x = g.constant(x_tgt.clone());
            let t = c.forward(g, p, x).unwrap();
            let pd = d_map.params().bind(g, false);
            let s = d_map.forward(g, &pd, t.density).unwrap();
            adv_loss_graph(g, &[s], PixelReduction::Mean).unwrap()
        }),
    ));
    let pyramid = |c: &crowdda::networks::Counter, g: &mut Graph, p: &crowdda::params::Bound| {
        let mut dens = Vec::new();
        for x in [&x_tgt, &x_m, &x_n] {
            let xv = g.constant(x.clone());
            dens.push(c.forward(g, p, xv).unwrap().density);
        }
        spr_graph(g, dens[0], &[(dens[1], 36.0 / 64.0), (dens[2], 100.0 / 64.0)]).unwrap()
    };
    out.push(("pyramid wrt counter", grad_check(&counter, h, pyramid)));
    out.push((
        "weighted total wrt counter",
        grad_check(&counter, h, |c, g, p| {
            let w = LossWeights { lambda: 0.3, beta: 0.2, gamma: 0.5 };
            let xs = g.constant(x_src.clone());
            let ts = c.forward(g, p, xs).unwrap();
            let y = g.constant(gt.clone());
            let cnt = mse_graph(g, ts.density, y).unwrap();
            let xt = g.constant(x_tgt.clone());
            let tt = c.forward(g, p, xt).unwrap();
            let scores = frozen_feature_scores(&d_feat, g, &[tt.f1, tt.f2]);
            let adv_f = adv_loss_graph(g, &scores, PixelReduction::Mean).unwrap();
            let pd = d_map.params().bind(g, false);
            let s = d_map.forward(g, &pd, tt.density).unwrap();
            let adv_m = adv_loss_graph(g, &[s], PixelReduction::Mean).unwrap();
            let spr = pyramid(c, g, p);
            let terms = [(adv_f, w.lambda), (adv_m, w.beta), (spr, w.gamma)];
            terms.iter().fold(cnt, |acc, &(t, k)| {
                let t = g.scale(t, k);
                g.add(acc, t).unwrap()
            })
        }),
    ));
    out
}

fn frozen_feature_scores(d: &FeatureDiscriminator, g: &mut Graph, feats: &[Var]) -> Vec<Var> {
    let pd = d.params().bind(g, false);
    feats.iter().map(|&f| d.forward(g, &pd, f).unwrap()).collect()
}

fn resize_input(x: &Tensor, side: usize) -> Tensor {
    let data = oracle_resize(x.data(), (8, 8), (side, side));
    Tensor::new(vec![1, 1, side, side], data).unwrap()
}

/// Worst relative deviation of ground-truth mass from the point count over
/// `trials` random point sets, and worst absolute deviation from a
/// brute-force kernel oracle.
pub fn density_conservation(trials: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut mass, mut cells) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (h, w) = (r.random_range(16..=128), r.random_range(16..=128));
        let n = r.random_range(1..=60);
        let pts: Vec<(f64, f64)> =
            (0..n).map(|_| (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64))).collect();
        let sigma = r.random_range(1.0..8.0);
        let scale = [1.0, 0.5, 0.25, 0.125][r.random_range(0..4)];
        let map = density_from_points(&PointAnnotation::new(pts.clone()), (h, w), sigma, scale).unwrap();
        mass = mass.max((map.sum() - n as f64).abs() / n as f64);
        let want = oracle_density(&pts, map.dims(), sigma * scale, scale);
        for (a, b) in map.data().iter().zip(&want) {
            cells = cells.max((a - b).abs());
        }
    }
    (mass, cells)
}

/// Brute force over every cell: unit-mass Gaussian restricted to cells
/// whose centre lies within 4 sigma of the point, or the point's own cell
/// when none does.
pub fn oracle_density(points: &[(f64, f64)], (oh, ow): (usize, usize), s: f64, scale: f64) -> Vec<f64> {
    let mut grid = vec![0.0; oh * ow];
    for &(x, y) in points {
        let (px, py) = (x * scale, y * scale);
        let mut cell = vec![0.0; oh * ow];
        for cy in 0..oh {
            for cx in 0..ow {
                let d2 = (cx as f64 + 0.5 - px).powi(2) + (cy as f64 + 0.5 - py).powi(2);
                if d2 <= (4.0 * s).powi(2) {
                    cell[cy * ow + cx] = (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
        let total: f64 = cell.iter().sum();
        if total == 0.0 {
            let (hy, hx) = ((py.floor() as usize).min(oh - 1), (px.floor() as usize).min(ow - 1));
            cell[hy * ow + hx] = 1.0;
        } else {
            cell.iter_mut().for_each(|v| *v /= total);
        }
        grid.iter_mut().zip(cell).for_each(|(g, c)| *g += c);
    }
    grid
}

/// Worst relative mass change of the semantic reshape over `trials` random
/// maps of 16x16 to 32x32 taken to a scale in [0.8, 1.2].
pub fn reshape_conservation(trials: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (h, w) = (r.random_range(16..=32), r.random_range(16..=32));
        let map = random_map(&mut r, h, w);
        let q = r.random_range(0.8..=1.2);
        let out = semantic_reshape(&map, 1.0, q).unwrap();
        worst = worst.max((out.sum() - map.sum()).abs() / map.sum());
    }
    worst
}

/// Verdicts of the four scene rules on the boundary fixture, and the number
/// of records whose verdict differs from the hand-derived one.
pub fn filter_mismatches() -> usize {
    let rules = table_rules();
    filter_fixture()
        .iter()
        .filter(|(meta, want)| rules.iter().map(|rule| scene_filter(meta, rule)).collect::<Vec<_>>() != want)
        .count()
}

/// Metric checks: hand-arithmetic errors (exact), worst SSIM deviation from
/// the direct oracle, and the number of random datasets where RMSE < MAE.
pub struct MetricChecks {
    pub hand_exact: bool,
    pub ssim_err: f64,
    pub power_mean_violations: usize,
}

pub fn metric_checks(seed: u64) -> MetricChecks {
    let (y, p) = ([10.0, 20.0, 30.0], [12.0, 18.0, 33.0]);
    let hand_exact = mae(&y, &p).unwrap() == 7.0 / 3.0
        && mse(&y, &p).unwrap() == (17.0f64 / 3.0).sqrt()
        && mae(&y, &y).unwrap() == 0.0
        && mse(&y, &y).unwrap() == 0.0;

    let mut ssim_err = 0.0f64;
    for k in 0..5u64 {
        let (h, w) = (32, 32 + 3 * k as usize);
        let a = DensityMap::new(h, w, lcg_values(2 * k + 1, h * w), 1.0).unwrap();
        let b = DensityMap::new(h, w, lcg_values(2 * k + 2, h * w), 1.0).unwrap();
        let range = 0.5 + k as f64;
        let got = ssim_with_range(&a, &b, range).unwrap();
        ssim_err = ssim_err.max((got - oracle_ssim(a.data(), b.data(), (h, w), range)).abs());
    }

    let mut r = rng(seed);
    let mut power_mean_violations = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=50);
        let gt: Vec<f64> = (0..n).map(|_| r.random_range(0.0..500.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..500.0)).collect();
        let (a, s) = (mae(&gt, &pred).unwrap(), mse(&gt, &pred).unwrap());
        if s < a * (1.0 - 1e-12)
            || (a - oracle_mae(&gt, &pred)).abs() > 1e-9
            || (s - oracle_rmse(&gt, &pred)).abs() > 1e-9
        {
            power_mean_violations += 1;
        }
    }
    MetricChecks { hand_exact, ssim_err, power_mean_violations }
}
