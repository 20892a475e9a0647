//! Training loops: supervised counting, supervised counting with the
//! pyramid consistency loss, adversarial adaptation, and the refiner
//! pipeline. All randomness comes from one seed split into named streams.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::Archive;
use crate::data::{DensityMap, LabeledSample};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_graph, disc_loss_graph, loss_total, mse_graph, spr_graph, LossComponents, LossWeights, PixelReduction,
    PyramidScales,
};
use crate::metrics::{self, DensityPredictor};
use crate::networks::{
    Counter, CounterConfig, FeatureDiscConfig, FeatureDiscriminator, FeatureTap, MapDiscConfig, MapDiscriminator,
    Network, Refiner, RefinerConfig, TapVars,
};
use crate::params::{Adam, AdamConfig, ParamSet};
use crate::tensor::{resize_bilinear, Tensor};

/// Architecture of every network in an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub counter: CounterConfig,
    pub feature_disc: FeatureDiscConfig,
    pub map_disc: MapDiscConfig,
    pub refiner: RefinerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_r: f64,
    pub weights: LossWeights,
    pub reduction: PixelReduction,
    /// Source and target images per iteration.
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Discriminator updates before each counter update.
    pub d_updates_per_g: usize,
    /// Feature maps watched by one pixel-wise discriminator each.
    pub taps: Vec<FeatureTap>,
    /// Share of the source set held out for early stopping.
    pub val_fraction: f64,
    /// Use the full-scale prediction of the pyramid loss as a fixed
    /// pseudo-target, so only the rescaled predictions receive gradient.
    /// Without it the loss can be lowered by shrinking all densities.
    pub spr_detach_anchor: bool,
    pub refiner_batch_size: usize,
    pub refiner_max_steps: usize,
    pub refiner_eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-5,
            lr_d: 1e-5,
            lr_r: 1e-4,
            weights: LossWeights::default(),
            reduction: PixelReduction::Mean,
            batch_size: 4,
            max_steps: 5000,
            eval_every: 200,
            patience: 5,
            seed: 0,
            adam: AdamConfig::default(),
            d_updates_per_g: 1,
            taps: vec![FeatureTap::Dilation, FeatureTap::Spatial],
            val_fraction: 0.1,
            spr_detach_anchor: false,
            refiner_batch_size: 4,
            refiner_max_steps: 2000,
            refiner_eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_r", self.lr_r)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        self.weights.validate()?;
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.refiner_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.eval_every == 0 || self.refiner_eval_every == 0 {
            return bad("evaluation intervals must be at least 1".into());
        }
        if self.d_updates_per_g == 0 {
            return bad("d_updates_per_g must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        let mut seen = self.taps.clone();
        seen.sort_by_key(|t| *t as u8);
        seen.dedup();
        if seen.len() != self.taps.len() {
            return bad("feature taps must be distinct".into());
        }
        if self.taps.is_empty() && self.weights.lambda > 0.0 {
            return bad("feature adversarial weight needs at least one tap".into());
        }
        Ok(())
    }
}

/// Which objective a [`Trainer`] optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Counting loss on the source set.
    Supervised,
    /// Counting loss plus pyramid consistency on the labelled set itself.
    SprSupervised,
    /// Alternating discriminator and counter updates against a target set.
    Adapt,
}

const STREAMS: [&str; 7] = ["init", "disc_init", "split", "source", "target", "scales", "refiner"];

/// Independent ChaCha streams derived from one seed, so adding a consumer
/// never shifts another's draws.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub seed: u64,
    pub init: ChaCha8Rng,
    pub disc_init: ChaCha8Rng,
    pub split: ChaCha8Rng,
    pub source: ChaCha8Rng,
    pub target: ChaCha8Rng,
    pub scales: ChaCha8Rng,
    pub refiner: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: u64,
    /// Word positions as decimal strings, one per stream.
    positions: Vec<String>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let s = |i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i);
            r
        };
        Self { seed, init: s(0), disc_init: s(1), split: s(2), source: s(3), target: s(4), scales: s(5), refiner: s(6) }
    }

    fn all(&self) -> [&ChaCha8Rng; 7] {
        [&self.init, &self.disc_init, &self.split, &self.source, &self.target, &self.scales, &self.refiner]
    }

    fn all_mut(&mut self) -> [&mut ChaCha8Rng; 7] {
        [
            &mut self.init,
            &mut self.disc_init,
            &mut self.split,
            &mut self.source,
            &mut self.target,
            &mut self.scales,
            &mut self.refiner,
        ]
    }

    fn snapshot(&self) -> RngSnapshot {
        RngSnapshot { seed: self.seed, positions: self.all().iter().map(|r| r.get_word_pos().to_string()).collect() }
    }

    fn restore(s: &RngSnapshot) -> Result<Self> {
        if s.positions.len() != STREAMS.len() {
            return Err(Error::Checkpoint("rng state has the wrong number of streams".into()));
        }
        let mut out = Self::new(s.seed);
        for (r, p) in out.all_mut().into_iter().zip(&s.positions) {
            let pos: u128 = p.parse().map_err(|_| Error::Checkpoint(format!("bad rng position {p}")))?;
            r.set_word_pos(pos);
        }
        Ok(out)
    }
}

/// Shuffle `0..n` and cut it into consecutive parts of the given fractions;
/// the last part takes the remainder.
pub fn split_indices(n: usize, fractions: &[f64], rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = Vec::new();
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() { n } else { (start + (f * n as f64).round() as usize).min(n) };
        out.push(idx[start..end].to_vec());
        start = end;
    }
    out
}

fn draw_batch(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        sample_indices(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Image side for a pyramid level: the multiple of `stride` nearest to
/// `side * y` within `[0.8, 1.2] * side`, strictly smaller than `side` for
/// `y < 1` and strictly larger for `y > 1`. Small images may have to step
/// outside the range to stay distinct from `side`.
pub fn pyramid_side(side: usize, y: f64, stride: usize) -> usize {
    let s = stride as f64;
    let target = ((side as f64 * y) / s).round() as usize * stride;
    let lo = ((side as f64 * 0.8) / s).ceil() as usize * stride;
    let hi = ((side as f64 * 1.2) / s).floor() as usize * stride;
    if y < 1.0 {
        let below = side.saturating_sub(stride).max(stride);
        target.clamp(lo.min(below), below)
    } else {
        let above = side + stride;
        target.clamp(above, hi.max(above))
    }
}

/// One row of the metrics log. Values that were not computed at a step are
/// empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub loss_total: f64,
    pub loss_cnt: f64,
    pub loss_adv_feature: Option<f64>,
    pub loss_adv_map: Option<f64>,
    pub loss_spr: Option<f64>,
    pub loss_d_feature: Option<f64>,
    pub loss_d_map: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
}

pub fn write_log_csv(rows: &[LogRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub mode: Mode,
    pub step: usize,
    pub counter: Counter,
    pub counter_opt: Adam,
    /// One per configured tap, in tap order.
    pub feature_discs: Vec<FeatureDiscriminator>,
    pub feature_opts: Vec<Adam>,
    pub map_disc: Option<MapDiscriminator>,
    pub map_opt: Option<Adam>,
    pub best_step: Option<usize>,
    pub best_val: f64,
    pub best_params: ParamSet,
    pub evals_since_best: usize,
    pub stopped: bool,
    pub rng: RngStreams,
}

impl TrainState {
    pub fn new(mode: Mode, models: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStreams::new(cfg.seed);
        let counter = Counter::new(models.counter.clone(), &mut rng.init)?;
        let counter_opt = Adam::new(counter.params(), cfg.lr_g, cfg.adam);
        let (mut feature_discs, mut feature_opts, mut map_disc, mut map_opt) = (Vec::new(), Vec::new(), None, None);
        if mode == Mode::Adapt {
            for &tap in &cfg.taps {
                let ch = models.counter.tap_channels(tap);
                let d = FeatureDiscriminator::new(ch, models.feature_disc.clone(), &mut rng.disc_init)?;
                feature_opts.push(Adam::new(d.params(), cfg.lr_d, cfg.adam));
                feature_discs.push(d);
            }
            let d = MapDiscriminator::new(models.map_disc.clone(), &mut rng.disc_init)?;
            map_opt = Some(Adam::new(d.params(), cfg.lr_d, cfg.adam));
            map_disc = Some(d);
        }
        Ok(Self {
            mode,
            step: 0,
            best_params: counter.params().clone(),
            counter,
            counter_opt,
            feature_discs,
            feature_opts,
            map_disc,
            map_opt,
            best_step: None,
            best_val: f64::INFINITY,
            evals_since_best: 0,
            stopped: false,
            rng,
        })
    }

    /// The counter with the weights of the best validation step.
    pub fn best_counter(&self) -> Counter {
        let mut c = self.counter.clone();
        c.params_mut().load_from(&self.best_params).expect("same architecture");
        c
    }

    pub fn to_archive(&self, models: &ModelConfig, cfg: &TrainConfig) -> Archive {
        let opt_meta = |o: &Adam| serde_json::json!({ "step": o.step, "lr": o.lr });
        let manifest = serde_json::json!({
            "format": "crowdda-train-state",
            "version": 1,
            "mode": self.mode,
            "models": models,
            "train": cfg,
            "step": self.step,
            "best_step": self.best_step,
            "best_val": if self.best_val.is_finite() { Some(self.best_val) } else { None },
            "evals_since_best": self.evals_since_best,
            "stopped": self.stopped,
            "rng": self.rng.snapshot(),
            "optimizers": {
                "G": opt_meta(&self.counter_opt),
                "D": self.feature_opts.iter().map(opt_meta).collect::<Vec<_>>(),
                "D3": self.map_opt.as_ref().map(opt_meta),
            },
        });
        let mut a = Archive::new(manifest);
        let mut put = |name: &str, params: &ParamSet, opt: &Adam| {
            a.insert_params(name, params);
            a.insert_parallel(&format!("opt.{name}.m"), params, &opt.m);
            a.insert_parallel(&format!("opt.{name}.v"), params, &opt.v);
        };
        put("G", self.counter.params(), &self.counter_opt);
        for (i, (d, o)) in self.feature_discs.iter().zip(&self.feature_opts).enumerate() {
            put(&format!("D{}", i + 1), d.params(), o);
        }
        if let (Some(d), Some(o)) = (&self.map_disc, &self.map_opt) {
            put("D3", d.params(), o);
        }
        a.insert_params("G.best", &self.best_params);
        a
    }

    /// Restore a state; the stored architecture and training configuration
    /// must equal the given ones.
    pub fn from_archive(a: &Archive, models: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let m = &a.manifest;
        let field = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")));
        let parse = |k: &str| -> Result<serde_json::Value> { field(k).cloned() };
        if field("format")? != "crowdda-train-state" {
            return Err(Error::Checkpoint("not a training-state archive".into()));
        }
        let stored_models: ModelConfig = serde_json::from_value(parse("models")?)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        if &stored_models != models {
            return Err(Error::Checkpoint("checkpoint architecture differs from the configuration".into()));
        }
        let stored_cfg: TrainConfig =
            serde_json::from_value(parse("train")?).map_err(|e| Error::Checkpoint(format!("bad train config: {e}")))?;
        if &stored_cfg != cfg {
            return Err(Error::Checkpoint("checkpoint training configuration differs".into()));
        }
        let mode: Mode = serde_json::from_value(parse("mode")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut s = Self::new(mode, models, cfg)?;
        let num = |k: &str| -> Result<u64> {
            field(k)?.as_u64().ok_or_else(|| Error::Checkpoint(format!("{k} is not an integer")))
        };
        s.step = num("step")? as usize;
        s.best_step = parse("best_step")?.as_u64().map(|v| v as usize);
        s.best_val = parse("best_val")?.as_f64().unwrap_or(f64::INFINITY);
        s.evals_since_best = num("evals_since_best")? as usize;
        s.stopped = field("stopped")?.as_bool().unwrap_or(false);
        let rng: RngSnapshot = serde_json::from_value(parse("rng")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        s.rng = RngStreams::restore(&rng)?;
        let opts = parse("optimizers")?;
        let restore = |name: &str, net: &mut dyn Network, opt: &mut Adam, meta: &serde_json::Value| -> Result<()> {
            a.load_params(name, net.params_mut())?;
            opt.m = a.read_parallel(&format!("opt.{name}.m"), net.params())?;
            opt.v = a.read_parallel(&format!("opt.{name}.v"), net.params())?;
            opt.step = meta["step"].as_u64().ok_or_else(|| Error::Checkpoint("optimizer step".into()))?;
            opt.lr = meta["lr"].as_f64().ok_or_else(|| Error::Checkpoint("optimizer lr".into()))?;
            Ok(())
        };
        restore("G", &mut s.counter, &mut s.counter_opt, &opts["G"])?;
        for (i, (d, o)) in s.feature_discs.iter_mut().zip(s.feature_opts.iter_mut()).enumerate() {
            restore(&format!("D{}", i + 1), d, o, &opts["D"][i])?;
        }
        if let (Some(d), Some(o)) = (s.map_disc.as_mut(), s.map_opt.as_mut()) {
            restore("D3", d, o, &opts["D3"])?;
        }
        a.load_params("G.best", &mut s.best_params)?;
        Ok(s)
    }
}

/// Final state plus the per-step log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn best_counter(&self) -> Counter {
        self.state.best_counter()
    }
}

/// Drives one training run step by step.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: Vec<&'a LabeledSample>,
    val: Vec<&'a LabeledSample>,
    target: Vec<&'a Tensor>,
    pub state: TrainState,
}

fn numerical_abort(step: usize, component: &str, c: &LossComponents, extra: &[(&str, Option<f64>)]) -> Error {
    let mut snapshot = vec![
        ("loss_cnt".to_string(), c.cnt),
        ("loss_adv_feature".to_string(), c.adv_feature),
        ("loss_adv_map".to_string(), c.adv_map),
        ("loss_spr".to_string(), c.spr),
    ];
    snapshot.extend(extra.iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Error::NumericalAbort { step, component: component.to_string(), snapshot }
}

impl<'a> Trainer<'a> {
    /// Split `source` into train/validation parts and set up a fresh state.
    /// `target` is only used in [`Mode::Adapt`].
    pub fn new(
        mode: Mode,
        models: &ModelConfig,
        cfg: &TrainConfig,
        source: &'a [LabeledSample],
        target: &'a [Tensor],
    ) -> Result<Self> {
        let state = TrainState::new(mode, models, cfg)?;
        Self::with_state(state, cfg, source, target)
    }

    /// Continue from a restored state.
    pub fn with_state(
        mut state: TrainState,
        cfg: &TrainConfig,
        source: &'a [LabeledSample],
        target: &'a [Tensor],
    ) -> Result<Self> {
        cfg.validate()?;
        if source.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 labelled samples for a train/validation split, got {}",
                source.len()
            )));
        }
        if state.mode == Mode::Adapt && target.is_empty() {
            return Err(Error::InvalidArgument("adaptation needs a non-empty target set".into()));
        }
        // The split is a pure function of the seed, so a resumed run gets
        // the same membership without storing it.
        let mut split_rng = RngStreams::new(cfg.seed).split;
        let n_val = ((source.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, source.len() - 1);
        let parts = split_indices(source.len(), &[n_val as f64 / source.len() as f64, 1.0], &mut split_rng);
        state.rng.split = split_rng;
        Ok(Self {
            cfg: cfg.clone(),
            val: parts[0].iter().map(|&i| &source[i]).collect(),
            train: parts[1].iter().map(|&i| &source[i]).collect(),
            target: if state.mode == Mode::Adapt { target.iter().collect() } else { Vec::new() },
            state,
        })
    }

    pub fn val_samples(&self) -> &[&'a LabeledSample] {
        &self.val
    }

    pub fn train_samples(&self) -> &[&'a LabeledSample] {
        &self.train
    }

    pub fn finished(&self) -> bool {
        self.state.stopped || self.state.step >= self.cfg.max_steps
    }

    fn source_batch(&mut self) -> Result<(Tensor, Tensor)> {
        let idx = draw_batch(&mut self.state.rng.source, self.train.len(), self.cfg.batch_size);
        let imgs: Vec<Tensor> = idx.iter().map(|&i| self.train[i].image.clone()).collect();
        let gts: Vec<Tensor> = idx.iter().map(|&i| self.train[i].gt.to_nchw().index(0)).collect();
        Ok((Tensor::stack(&imgs)?, Tensor::stack(&gts)?))
    }

    fn target_batch(&mut self) -> Result<Tensor> {
        let idx = draw_batch(&mut self.state.rng.target, self.target.len(), self.cfg.batch_size);
        let imgs: Vec<Tensor> = idx.iter().map(|&i| self.target[i].clone()).collect();
        Tensor::stack(&imgs)
    }

    /// Pyramid consistency of the counter on `images` (already forwarded
    /// as `a1`), at freshly drawn scales.
    fn spr_term(&mut self, g: &mut Graph, p: &crate::params::Bound, images: &Tensor, a1: Var) -> Result<Var> {
        let scales = PyramidScales::sample(&mut self.state.rng.scales);
        let (_, _, h, w) = images.dims4()?;
        let stride = self.state.counter.config().stride();
        let mut levels = Vec::new();
        for y in [scales.m, scales.n] {
            let (hy, wy) = (pyramid_side(h, y, stride), pyramid_side(w, y, stride));
            let x = g.constant(resize_bilinear(images, hy, wy)?);
            let taps = self.state.counter.forward(g, p, x)?;
            let area = (hy * wy) as f64 / (h * w) as f64;
            levels.push((taps.density, area));
        }
        let anchor = if self.cfg.spr_detach_anchor { g.constant(g.value(a1).clone()) } else { a1 };
        spr_graph(g, anchor, &levels)
    }

    fn disc_update(&mut self, g: &Graph, src: &TapVars, tgt: &TapVars) -> Result<(f64, f64)> {
        let taps = self.cfg.taps.clone();
        let red = self.cfg.reduction;
        let mut h = Graph::new();
        let mut feature_terms = Vec::new();
        let mut bounds = Vec::new();
        for (d, tap) in self.state.feature_discs.iter().zip(&taps) {
            let pd = d.params().bind(&mut h, true);
            let fs = h.constant(g.value(src.tap(*tap)).clone());
            let ft = h.constant(g.value(tgt.tap(*tap)).clone());
            let ss = d.forward(&mut h, &pd, fs)?;
            let st = d.forward(&mut h, &pd, ft)?;
            feature_terms.push(disc_loss_graph(&mut h, ss, st, red)?);
            bounds.push(pd);
        }
        let md = self.state.map_disc.as_ref().expect("adapt mode has a map discriminator");
        let pm = md.params().bind(&mut h, true);
        let ds = h.constant(g.value(src.density).clone());
        let dt = h.constant(g.value(tgt.density).clone());
        let vs = md.forward(&mut h, &pm, ds)?;
        let vt = md.forward(&mut h, &pm, dt)?;
        let map_term = disc_loss_graph(&mut h, vs, vt, PixelReduction::Mean)?;

        let loss_feature: f64 = feature_terms.iter().map(|v| h.value(*v).item()).sum();
        let loss_map = h.value(map_term).item();
        let mut total = map_term;
        for t in &feature_terms {
            total = h.add(total, *t)?;
        }
        let grads = h.backward(total)?;
        for ((d, o), pd) in self.state.feature_discs.iter_mut().zip(self.state.feature_opts.iter_mut()).zip(&bounds) {
            let gr = pd.grads(&grads, d.params());
            o.update(d.params_mut(), &gr);
        }
        let md = self.state.map_disc.as_mut().expect("map discriminator");
        let gr = pm.grads(&grads, md.params());
        self.state.map_opt.as_mut().expect("map optimizer").update(md.params_mut(), &gr);
        Ok((loss_feature, loss_map))
    }

    /// One iteration: discriminator update(s) then a counter update.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.state.step;
        let w = self.cfg.weights;
        let red = self.cfg.reduction;
        let mode = self.state.mode;
        let (src_x, src_gt) = self.source_batch()?;
        let tgt_x = if mode == Mode::Adapt { Some(self.target_batch()?) } else { None };

        let mut g = Graph::new();
        let counter = self.state.counter.clone();
        let pg = counter.params().bind(&mut g, true);
        let xs = g.constant(src_x.clone());
        let src = counter.forward(&mut g, &pg, xs)?;
        let gt = g.constant(src_gt);
        let cnt = mse_graph(&mut g, src.density, gt)?;
        let mut comps = LossComponents { cnt: g.value(cnt).item(), ..Default::default() };
        let mut row = LogRow {
            step: step + 1,
            lr_g: self.state.counter_opt.lr,
            lr_d: self.state.feature_opts.first().map_or(self.cfg.lr_d, |o| o.lr),
            loss_cnt: comps.cnt,
            ..Default::default()
        };
        let mut total = cnt;

        if let Some(tgt_x) = &tgt_x {
            let xt = g.constant(tgt_x.clone());
            let tgt = counter.forward(&mut g, &pg, xt)?;
            let (mut ld_f, mut ld_m) = (0.0, 0.0);
            for _ in 0..self.cfg.d_updates_per_g {
                (ld_f, ld_m) = self.disc_update(&g, &src, &tgt)?;
            }
            row.loss_d_feature = Some(ld_f);
            row.loss_d_map = Some(ld_m);

            // adversarial terms against the freshly updated, frozen
            // discriminators
            let mut scores = Vec::new();
            for (d, tap) in self.state.feature_discs.iter().zip(&self.cfg.taps) {
                let pd = d.params().bind(&mut g, false);
                scores.push(d.forward(&mut g, &pd, tgt.tap(*tap))?);
            }
            if !scores.is_empty() {
                let adv_f = adv_loss_graph(&mut g, &scores, red)?;
                comps.adv_feature = g.value(adv_f).item();
                row.loss_adv_feature = Some(comps.adv_feature);
                if w.lambda > 0.0 {
                    let t = g.scale(adv_f, w.lambda);
                    total = g.add(total, t)?;
                }
            }
            let md = self.state.map_disc.as_ref().expect("map discriminator");
            let pm = md.params().bind(&mut g, false);
            let vt = md.forward(&mut g, &pm, tgt.density)?;
            let adv_m = adv_loss_graph(&mut g, &[vt], PixelReduction::Mean)?;
            comps.adv_map = g.value(adv_m).item();
            row.loss_adv_map = Some(comps.adv_map);
            if w.beta > 0.0 {
                let t = g.scale(adv_m, w.beta);
                total = g.add(total, t)?;
            }
            if w.gamma > 0.0 {
                let spr = self.spr_term(&mut g, &pg, tgt_x, tgt.density)?;
                comps.spr = g.value(spr).item();
                row.loss_spr = Some(comps.spr);
                let t = g.scale(spr, w.gamma);
                total = g.add(total, t)?;
            }
        } else if mode == Mode::SprSupervised && w.gamma > 0.0 {
            let spr = self.spr_term(&mut g, &pg, &src_x, src.density)?;
            comps.spr = g.value(spr).item();
            row.loss_spr = Some(comps.spr);
            let t = g.scale(spr, w.gamma);
            total = g.add(total, t)?;
        }

        row.loss_total = g.value(total).item();
        let checks = [
            ("loss_cnt", Some(comps.cnt)),
            ("loss_adv_feature", row.loss_adv_feature),
            ("loss_adv_map", row.loss_adv_map),
            ("loss_spr", row.loss_spr),
            ("loss_d_feature", row.loss_d_feature),
            ("loss_d_map", row.loss_d_map),
            ("loss_total", Some(row.loss_total)),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
            return Err(numerical_abort(step + 1, name, &comps, &checks));
        }
        debug_assert!(
            (loss_total(&comps, &effective_weights(&w, &row)) - row.loss_total).abs()
                <= 1e-9 * (1.0 + row.loss_total.abs())
        );

        let grads = g.backward(total)?;
        let gr = pg.grads(&grads, counter.params());
        self.state.counter_opt.update(self.state.counter.params_mut(), &gr);
        self.state.step += 1;

        if self.state.step.is_multiple_of(self.cfg.eval_every) || self.state.step >= self.cfg.max_steps {
            self.evaluate_into(&mut row)?;
        }
        Ok(row)
    }

    fn evaluate_into(&mut self, row: &mut LogRow) -> Result<()> {
        let v = validate(&self.state.counter, &self.val)?;
        row.val_loss = Some(v.loss);
        row.val_mae = Some(v.mae);
        row.val_mse = Some(v.mse);
        if !v.loss.is_finite() {
            return Err(Error::NumericalAbort {
                step: self.state.step,
                component: "val_loss".into(),
                snapshot: vec![("val_loss".into(), v.loss)],
            });
        }
        if v.loss < self.state.best_val {
            self.state.best_val = v.loss;
            self.state.best_step = Some(self.state.step);
            self.state.best_params = self.state.counter.params().clone();
            self.state.evals_since_best = 0;
        } else {
            self.state.evals_since_best += 1;
            if self.state.evals_since_best >= self.cfg.patience {
                self.state.stopped = true;
            }
        }
        Ok(())
    }

    /// Step until early stopping or `max_steps`.
    pub fn run(self) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        let state = self.run_logged(&mut log)?;
        Ok(TrainOutcome { state, log })
    }

    /// Like [`Trainer::run`], appending to `log` as it goes so the rows
    /// before a failure survive it.
    pub fn run_logged(mut self, log: &mut Vec<LogRow>) -> Result<TrainState> {
        while !self.finished() {
            let row = self.step()?;
            if let Some(d) = row.loss_d_feature {
                if log.len() >= 50 && step_oscillates(log, d) {
                    log::warn!("step {}: discriminator loss is oscillating", row.step);
                }
            }
            log.push(row);
        }
        Ok(self.state)
    }
}

fn effective_weights(w: &LossWeights, row: &LogRow) -> LossWeights {
    LossWeights {
        lambda: if row.loss_adv_feature.is_some() { w.lambda } else { 0.0 },
        beta: if row.loss_adv_map.is_some() { w.beta } else { 0.0 },
        gamma: if row.loss_spr.is_some() { w.gamma } else { 0.0 },
    }
}

/// Warn-only heuristic: the discriminator loss jumps by more than three
/// standard deviations of its last 50 values.
fn step_oscillates(log: &[LogRow], current: f64) -> bool {
    let recent: Vec<f64> = log.iter().rev().take(50).filter_map(|r| r.loss_d_feature).collect();
    let n = recent.len() as f64;
    let mean = recent.iter().sum::<f64>() / n;
    let sd = (recent.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    sd > 0.0 && (current - mean).abs() > 3.0 * sd
}

/// Validation counting loss and count errors of a counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub mae: f64,
    pub mse: f64,
}

pub fn validate(counter: &Counter, samples: &[&LabeledSample]) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut loss = 0.0;
    let (mut gt, mut pred) = (Vec::new(), Vec::new());
    for s in samples {
        let out = counter.counter_forward(&s.image)?;
        loss += crate::losses::loss_count(&out.density, &s.gt)?;
        gt.push(s.count as f64);
        pred.push(out.density.clamped().sum());
    }
    Ok(Validation { loss: loss / samples.len() as f64, mae: metrics::mae(&gt, &pred)?, mse: metrics::mse(&gt, &pred)? })
}

/// Train a counter on labelled data with the counting loss only.
pub fn supervised_train(models: &ModelConfig, source: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(Mode::Supervised, models, cfg, source, &[])?.run()
}

/// Supervised training plus the pyramid consistency loss on the same data.
pub fn spr_supervised_train(
    models: &ModelConfig,
    labeled: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(Mode::SprSupervised, models, cfg, labeled, &[])?.run()
}

/// Adversarial adaptation from a labelled source set to unlabelled target
/// images.
pub fn adapt_train(
    models: &ModelConfig,
    source: &[LabeledSample],
    target: &[Tensor],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(Mode::Adapt, models, cfg, source, target)?.run()
}

/// A coarse map paired with the map it should become.
#[derive(Clone, Debug)]
pub struct RefinerPair {
    pub coarse: DensityMap,
    pub target: DensityMap,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerLogRow {
    pub step: usize,
    pub lr_r: f64,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RefinerTraining {
    /// Weights of the best validation step.
    pub refiner: Refiner,
    pub best_step: usize,
    pub best_val: f64,
    pub log: Vec<RefinerLogRow>,
}

fn pair_batch(pairs: &[&RefinerPair], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let c: Vec<Tensor> = idx.iter().map(|&i| pairs[i].coarse.to_nchw().index(0)).collect();
    let t: Vec<Tensor> = idx.iter().map(|&i| pairs[i].target.to_nchw().index(0)).collect();
    Ok((Tensor::stack(&c)?, Tensor::stack(&t)?))
}

fn refiner_val_loss(r: &Refiner, pairs: &[&RefinerPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = r.refiner_forward(&p.coarse)?;
        total += crate::losses::loss_count(&out, &p.target)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Fit a refiner to map coarse maps onto their targets with MSE, keeping
/// the weights of the best validation loss.
pub fn train_refiner(
    config: &RefinerConfig,
    train: &[&RefinerPair],
    val: &[&RefinerPair],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RefinerTraining> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("refiner training needs train and validation pairs".into()));
    }
    let mut r = Refiner::new(config.clone(), rng)?;
    let mut opt = Adam::new(r.params(), cfg.lr_r, cfg.adam);
    let mut best = (refiner_val_loss(&r, val)?, 0usize, r.params().clone());
    let mut stale = 0;
    let mut log = Vec::new();
    for step in 1..=cfg.refiner_max_steps {
        let idx = draw_batch(rng, train.len(), cfg.refiner_batch_size);
        let (x, y) = pair_batch(train, &idx)?;
        let mut g = Graph::new();
        let p = r.params().bind(&mut g, true);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let out = r.forward(&mut g, &p, xv)?;
        let loss = mse_graph(&mut g, out, yv)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NumericalAbort {
                step,
                component: "refiner_loss".into(),
                snapshot: vec![("refiner_loss".into(), lv)],
            });
        }
        let grads = g.backward(loss)?;
        let gr = p.grads(&grads, r.params());
        opt.update(r.params_mut(), &gr);
        let mut row = RefinerLogRow { step, lr_r: opt.lr, loss: lv, val_loss: None };
        if step % cfg.refiner_eval_every == 0 || step == cfg.refiner_max_steps {
            let v = refiner_val_loss(&r, val)?;
            row.val_loss = Some(v);
            if v < best.0 {
                best = (v, step, r.params().clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(row);
        if stale >= cfg.patience {
            break;
        }
    }
    r.params_mut().load_from(&best.2)?;
    Ok(RefinerTraining { refiner: r, best_step: best.1, best_val: best.0, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Smallest source-test set the refiner pipeline accepts.
pub const MIN_REFINER_SAMPLES: usize = 10;

/// Deterministic 70/10/20 split of `n` samples.
pub fn refiner_split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < MIN_REFINER_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "refiner pipeline needs at least {MIN_REFINER_SAMPLES} samples to split 70/10/20, got {n}"
        )));
    }
    let mut rng = RngStreams::new(seed).refiner;
    let mut parts = split_indices(n, &[0.7, 0.1, 0.2], &mut rng);
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(SplitIndices { train, val, test })
}

#[derive(Clone, Debug)]
pub struct RefinerOutcome {
    pub training: RefinerTraining,
    pub split: SplitIndices,
    /// Mean PSNR on the held-out source split before and after refinement.
    pub test_psnr_coarse: f64,
    pub test_psnr_refined: f64,
    /// Refined, zero-clamped target maps in input order.
    pub refined: Vec<DensityMap>,
}

/// Prediction of `counter` on `image` brought to image resolution with
/// mass-preserving resizing, unclamped.
pub fn coarse_map(counter: &Counter, image: &Tensor) -> Result<DensityMap> {
    let pred = counter.predict(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if pred.dims() == (h, w) {
        Ok(pred)
    } else {
        crate::losses::semantic_reshape_to(&pred, h, w)
    }
}

/// Coarse maps of `counter` on `samples` paired with full-resolution ground
/// truth.
pub fn coarse_pairs(counter: &Counter, samples: &[LabeledSample]) -> Result<Vec<RefinerPair>> {
    samples
        .iter()
        .map(|s| Ok(RefinerPair { coarse: coarse_map(counter, &s.image)?, target: s.gt_full.clone() }))
        .collect()
}

/// Run the source-trained counter on the source test set, split it
/// 70/10/20, train a refiner on coarse-to-ground-truth pairs and apply it to
/// the target coarse maps.
pub fn refiner_pipeline(
    source_test: &[LabeledSample],
    counter: &Counter,
    target_coarse: &[DensityMap],
    config: &RefinerConfig,
    cfg: &TrainConfig,
) -> Result<RefinerOutcome> {
    let split = refiner_split(source_test.len(), cfg.seed)?;
    let pairs = coarse_pairs(counter, source_test)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &pairs[i]).collect::<Vec<_>>();
    let mut rng = RngStreams::new(cfg.seed).refiner;
    rng.set_stream(STREAMS.len() as u64);
    let training = train_refiner(config, &pick(&split.train), &pick(&split.val), cfg, &mut rng)?;

    let (mut coarse_psnr, mut refined_psnr) = (0.0, 0.0);
    for p in pick(&split.test) {
        coarse_psnr += metrics::psnr(&p.coarse.clamped(), &p.target)?;
        let r = training.refiner.refiner_forward(&p.coarse)?.clamped();
        refined_psnr += metrics::psnr(&r, &p.target)?;
    }
    let n = split.test.len() as f64;
    let refined =
        target_coarse.iter().map(|m| Ok(training.refiner.refiner_forward(m)?.clamped())).collect::<Result<Vec<_>>>()?;
    Ok(RefinerOutcome {
        training,
        split,
        test_psnr_coarse: coarse_psnr / n,
        test_psnr_refined: refined_psnr / n,
        refined,
    })
}
