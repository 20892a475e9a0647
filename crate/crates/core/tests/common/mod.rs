//! Independent reference implementations and helpers shared by the
//! integration tests. Nothing here calls the library code it is compared
//! against.

#![allow(dead_code)]

pub mod suites;

use crowdda::autograd::{Graph, Var};
use crowdda::data::{DensityMap, FilterRule, SceneMeta, TimeOfDay};
use crowdda::networks::{
    BackboneBlock, Counter, CounterConfig, DivisibilityPolicy, FeatureDiscConfig, FeatureDiscriminator, MapDiscConfig,
    MapDiscriminator, Network,
};
use crowdda::params::Bound;
use crowdda::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_map(rng: &mut impl Rng, h: usize, w: usize) -> DensityMap {
    DensityMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(), 1.0).unwrap()
}

// ---------------------------------------------------------------------------
// loss oracles

pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `log p(class)` of a two-way softmax, floored at `ln 1e-12`.
pub fn oracle_log_p(l_src: f64, l_tgt: f64, class: usize) -> f64 {
    let m = l_src.max(l_tgt);
    let lse = m + ((l_src - m).exp() + (l_tgt - m).exp()).ln();
    let own = if class == 0 { l_src } else { l_tgt };
    (own - lse).max(1e-12f64.ln())
}

/// Reduced log-probability of `class` over an `(n, 2, h, w)` logit buffer:
/// the mean over every pixel of every sample, or the per-sample pixel sum
/// averaged over samples.
pub fn oracle_reduced(logits: &[f64], (n, h, w): (usize, usize, usize), class: usize, sum: bool) -> f64 {
    let hw = h * w;
    let mut total = 0.0;
    for s in 0..n {
        for p in 0..hw {
            let l0 = logits[(s * 2) * hw + p];
            let l1 = logits[(s * 2 + 1) * hw + p];
            total += oracle_log_p(l0, l1, class);
        }
    }
    if sum {
        total / n as f64
    } else {
        total / (n * hw) as f64
    }
}

pub fn oracle_disc(src: &[f64], tgt: &[f64], dims: (usize, usize, usize), sum: bool) -> f64 {
    -(oracle_reduced(src, dims, 0, sum) + oracle_reduced(tgt, dims, 1, sum))
}

pub fn oracle_adv(maps: &[&[f64]], dims: (usize, usize, usize), sum: bool) -> f64 {
    -maps.iter().map(|m| oracle_reduced(m, dims, 0, sum)).sum::<f64>()
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn oracle_resize(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let v = |y: usize, x: usize| src[y * w + x];
            out[oy * ow + ox] =
                (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
        }
    }
    out
}

/// Pyramid loss: each rescaled map is resized back to `a1`'s grid,
/// multiplied by its area factor and compared to `a1` by MSE.
pub fn oracle_spr(a1: &DensityMap, levels: &[(&DensityMap, f64)]) -> f64 {
    levels
        .iter()
        .map(|(a, area)| {
            let r: Vec<f64> = oracle_resize(a.data(), a.dims(), a1.dims()).iter().map(|v| v * area).collect();
            oracle_mse(a1.data(), &r)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// metric oracles

pub fn oracle_mae(gt: &[f64], pred: &[f64]) -> f64 {
    gt.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / gt.len() as f64
}

pub fn oracle_rmse(gt: &[f64], pred: &[f64]) -> f64 {
    (gt.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / gt.len() as f64).sqrt()
}

/// 64-bit LCG in `[0, 1)`.
pub fn lcg_values(seed: u64, n: usize) -> Vec<f64> {
    let mut x = seed;
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

/// Direct SSIM: 11x11 Gaussian window (sigma 1.5) evaluated at every fully
/// interior position with weighted (population) moments,
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn oracle_ssim(a: &[f64], b: &[f64], (h, w): (usize, usize), range: f64) -> f64 {
    const K: usize = 11;
    let g: Vec<f64> = (0..K).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - K {
        for x in 0..=w - K {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..K {
                for dx in 0..K {
                    let wgt = g[dy] * g[dx] / (gs * gs);
                    let (va, vb) = (a[(y + dy) * w + x + dx], b[(y + dy) * w + x + dx]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let (va, vb, cab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// toy networks and finite differences

/// Counter with one pooled block, for 1-channel images; about 100
/// parameters.
pub fn toy_counter(seed: u64) -> Counter {
    let config = CounterConfig {
        in_channels: 1,
        blocks: vec![BackboneBlock { channels: 2, convs: 1, pool: true }],
        dilation_channels: 2,
        dilation_rate: 2,
        spatial_channels: 2,
        spatial_kernel: 3,
        divisibility: DivisibilityPolicy::Error,
    };
    jitter_biases(Counter::new(config, &mut rng(seed)).unwrap(), seed)
}

/// Biases start at zero, which leaves pre-activations fed by dead units
/// exactly on a ReLU kink. Small random biases move them off it.
fn jitter_biases<N: Network>(mut net: N, seed: u64) -> N {
    let mut r = rng(seed ^ 0xb1a5);
    let ps = net.params_mut();
    let bias: Vec<bool> = ps.names().iter().map(|n| n.ends_with("bias")).collect();
    for (t, is_bias) in ps.tensors_mut().iter_mut().zip(bias) {
        if is_bias {
            t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        }
    }
    net
}

pub fn toy_feature_disc(in_channels: usize, seed: u64) -> FeatureDiscriminator {
    jitter_biases(
        FeatureDiscriminator::new(in_channels, FeatureDiscConfig { widths: vec![2, 2, 2, 2] }, &mut rng(seed)).unwrap(),
        seed,
    )
}

pub fn toy_map_disc(seed: u64) -> MapDiscriminator {
    jitter_biases(MapDiscriminator::new(MapDiscConfig { widths: vec![2] }, &mut rng(seed)).unwrap(), seed)
}

/// Central-difference step. Larger steps cross ReLU and max-pool kinks of
/// the toy counter on some inputs.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between reverse-mode gradients and central
/// differences with step `h`, over every parameter of `net`. `build` gets a
/// graph with `net` bound trainable and returns the scalar loss. Relative
/// errors use `max(|a|, |f|, 1e-6)` as denominator.
pub fn grad_check<N: Network + Clone>(net: &N, h: f64, build: impl Fn(&N, &mut Graph, &Bound) -> Var) -> f64 {
    let eval = |n: &N| {
        let mut g = Graph::new();
        let p = n.params().bind(&mut g, true);
        let loss = build(n, &mut g, &p);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let loss = build(net, &mut g, &p);
    let grads = g.backward(loss).unwrap();
    let analytic = p.grads(&grads, net.params());

    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for (slot, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe.params().tensors()[slot].data()[i];
            probe.params_mut().tensors_mut()[slot].data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.params_mut().tensors_mut()[slot].data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.params_mut().tensors_mut()[slot].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// scene filter fixture

fn meta(level: u8, time: (u16, u16), weather: u8, count: u32, ratio: f64) -> SceneMeta {
    SceneMeta { level, time: TimeOfDay::hm(time.0, time.1), weather, count, ratio }
}

/// Twenty records on the boundaries of the four scene rules, each with its
/// expected verdict under (SHT-B, WorldExpo'10, Mall, UCSD).
pub fn filter_fixture() -> Vec<(SceneMeta, [bool; 4])> {
    const T: bool = true;
    const F: bool = false;
    vec![
        // inside every rule
        (meta(3, (12, 0), 0, 100, 0.5), [T, T, T, T]),
        // level 1: not a WorldExpo level
        (meta(1, (12, 0), 1, 50, 0.5), [T, F, T, T]),
        // level 5: above the Mall/UCSD levels
        (meta(5, (12, 0), 5, 100, 0.5), [T, T, F, F]),
        // level 6: WorldExpo only
        (meta(6, (12, 0), 6, 100, 0.5), [F, T, F, F]),
        // level 0 is never selected
        (meta(0, (12, 0), 0, 100, 0.5), [F, F, F, F]),
        // time 6:00, first minute of the SHT-B and WorldExpo windows
        (meta(3, (6, 0), 0, 100, 0.5), [T, T, F, F]),
        // time 5:59, one minute before every window
        (meta(3, (5, 59), 0, 100, 0.5), [F, F, F, F]),
        // time 8:00, first minute of the Mall/UCSD window
        (meta(3, (8, 0), 0, 100, 0.5), [T, T, T, T]),
        // time 18:59, last minute of the WorldExpo/Mall/UCSD windows
        (meta(3, (18, 59), 0, 100, 0.5), [T, T, T, T]),
        // time 19:00, SHT-B only
        (meta(3, (19, 0), 0, 100, 0.5), [T, F, F, F]),
        // time 19:59, last minute of the SHT-B window
        (meta(3, (19, 59), 0, 100, 0.5), [T, F, F, F]),
        // time 20:00, after every window
        (meta(3, (20, 0), 0, 100, 0.5), [F, F, F, F]),
        // weather 2 (rain) is excluded everywhere
        (meta(3, (12, 0), 2, 100, 0.5), [F, F, F, F]),
        // count 10, lower SHT-B bound
        (meta(3, (12, 0), 0, 10, 0.5), [T, T, T, T]),
        // count 9, below the SHT-B bound
        (meta(3, (12, 0), 0, 9, 0.5), [F, T, T, T]),
        // count 200, upper Mall/UCSD bound
        (meta(3, (12, 0), 0, 200, 0.5), [T, T, T, T]),
        // count 201, above the Mall/UCSD bound
        (meta(3, (12, 0), 0, 201, 0.5), [T, T, F, F]),
        // count 601, above the SHT-B bound
        (meta(3, (12, 0), 0, 601, 0.5), [F, T, F, F]),
        // count 1001, above every bound
        (meta(3, (12, 0), 0, 1001, 0.5), [F, F, F, F]),
        // ratio 0.3 is the inclusive SHT-B lower bound; 0.29 would fail it
        (meta(3, (12, 0), 0, 100, 0.3), [T, T, T, T]),
    ]
}

pub fn table_rules() -> [FilterRule; 4] {
    [FilterRule::shanghai_tech_b(), FilterRule::world_expo(), FilterRule::mall(), FilterRule::ucsd()]
}
