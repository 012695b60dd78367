//! Denoising diffusion implicit model with a noisy-input classifier and
//! classifier-guided deterministic translation.
//!
//! Training noises images to uniformly sampled steps of a linear-beta
//! schedule and regresses the noise. Inference runs a deterministic DDIM
//! (eta = 0) over evenly spaced steps; during denoising the classifier
//! gradient steers the trajectory toward the target class:
//!
//!   eps_hat = eps_theta(x_t, t) - sqrt(1 - abar_t) * s * grad_x log C(h | x_t, t)

use crate::dataset::SliceSet;
use crate::error::{Error, Result};
use crate::imageproc::{rotate2d, Image2D};
use crate::nn::{sinusoidal_embedding, Adam, Graph, ParamGrads, ParamId, ParamStore, Shape, ValueId};
use crate::phantom::Group;
use crate::rng::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Binary class set of the noisy classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "EU")]
    Eu,
    #[serde(rename = "DS")]
    Ds,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Eu => 0,
            ClassLabel::Ds => 1,
        }
    }

    pub fn of_group(group: Group) -> ClassLabel {
        if group.is_ds() {
            ClassLabel::Ds
        } else {
            ClassLabel::Eu
        }
    }
}

/// Linear-beta diffusion schedule; `alpha_bar[t]` is the cumulative product
/// with the convention `alpha_bar[0] = 1` (t = 0 is the clean image).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_total: usize,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_total: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if t_total < 1 {
        return Err(Error::validation("t_total", "must be >= 1"));
    }
    if !(beta_min > 0.0 && beta_min < 1.0) || !(beta_max > 0.0 && beta_max < 1.0) {
        return Err(Error::validation("beta", "betas must lie in (0, 1)"));
    }
    if t_total > 1 && beta_min >= beta_max {
        return Err(Error::validation("beta", "beta_min must be < beta_max"));
    }
    let mut betas = Vec::with_capacity(t_total);
    for t in 0..t_total {
        let frac = if t_total == 1 { 0.0 } else { t as f64 / (t_total - 1) as f64 };
        betas.push(beta_min + (beta_max - beta_min) * frac);
    }
    let mut alpha_bar = Vec::with_capacity(t_total + 1);
    alpha_bar.push(1.0);
    for &b in &betas {
        alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
    }
    Ok(DiffusionSchedule { t_total, betas, alpha_bar })
}

impl DiffusionSchedule {
    /// sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t).
    pub fn coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps. t = 0 returns x unchanged.
pub fn forward_noise(x: &Image2D, t: usize, eps: &Image2D, sched: &DiffusionSchedule) -> Image2D {
    assert!(t <= sched.t_total, "t out of schedule range");
    let (a, b) = sched.coeffs(t);
    Image2D {
        width: x.width,
        height: x.height,
        pixels: x
            .pixels
            .iter()
            .zip(&eps.pixels)
            .map(|(&xv, &ev)| a * xv + b * ev)
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DdimConfig {
    pub image_size: usize,
    /// UNet channel widths (top, mid, bottom).
    pub channels: [usize; 3],
    pub time_embed_dim: usize,
    /// Training steps T of the schedule.
    pub t_total: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Evenly spaced deterministic inference steps.
    pub inference_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_deg: f64,
    pub seed: u64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        DdimConfig {
            image_size: 64,
            channels: [8, 16, 32],
            time_embed_dim: 32,
            t_total: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            inference_steps: 100,
            epochs: 120,
            batch_size: 16,
            learning_rate: 6e-4,
            augment_deg: 10.0,
            seed: 0,
        }
    }
}

struct PredictorIds {
    temb_w: ParamId,
    temb_b: ParamId,
    conv_in: (ParamId, ParamId),
    t_in: (ParamId, ParamId),
    down1: (ParamId, ParamId),
    t_d1: (ParamId, ParamId),
    down2: (ParamId, ParamId),
    t_d2: (ParamId, ParamId),
    mid: (ParamId, ParamId),
    t_mid: (ParamId, ParamId),
    up1: (ParamId, ParamId),
    t_u1: (ParamId, ParamId),
    up2: (ParamId, ParamId),
    t_u2: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

/// Time-conditioned encoder-decoder noise predictor with skip connections.
pub struct NoisePredictor {
    pub cfg: DdimConfig,
    store: ParamStore,
    ids: PredictorIds,
    pub trained: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DdimTrainStats {
    pub epoch_losses: Vec<f64>,
    pub single_class_warning: bool,
}

impl NoisePredictor {
    pub fn new(cfg: DdimConfig) -> Result<Self> {
        if cfg.image_size % 4 != 0 {
            return Err(Error::validation("image_size", "must be a multiple of 4"));
        }
        if cfg.t_total % cfg.inference_steps != 0 {
            return Err(Error::validation(
                "inference_steps",
                "must divide t_total evenly",
            ));
        }
        let mut rng = Rng::seed_from(cfg.seed).fork(0x444d50);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = cfg.channels;
        let te = cfg.time_embed_dim;
        let hidden = te + te / 2;
        let conv = |store: &mut ParamStore, rng: &mut Rng, name: &str, cout: usize, cin: usize| {
            (
                store.add_randn(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
                store.add_zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let lin = |store: &mut ParamStore, rng: &mut Rng, name: &str, o: usize, i: usize| {
            (
                store.add_randn(&format!("{name}.w"), &[o, i], i, rng),
                store.add_zeros(&format!("{name}.b"), &[o]),
            )
        };
        let (temb_w, temb_b) = lin(&mut store, &mut rng, "temb", hidden, te);
        let conv_in = conv(&mut store, &mut rng, "conv_in", c1, 1);
        let t_in = lin(&mut store, &mut rng, "t_in", c1, hidden);
        let down1 = conv(&mut store, &mut rng, "down1", c2, c1);
        let t_d1 = lin(&mut store, &mut rng, "t_d1", c2, hidden);
        let down2 = conv(&mut store, &mut rng, "down2", c3, c2);
        let t_d2 = lin(&mut store, &mut rng, "t_d2", c3, hidden);
        let mid = conv(&mut store, &mut rng, "mid", c3, c3);
        let t_mid = lin(&mut store, &mut rng, "t_mid", c3, hidden);
        let up1 = conv(&mut store, &mut rng, "up1", c2, c3);
        let t_u1 = lin(&mut store, &mut rng, "t_u1", c2, hidden);
        let up2 = conv(&mut store, &mut rng, "up2", c1, c2);
        let t_u2 = lin(&mut store, &mut rng, "t_u2", c1, hidden);
        let out = conv(&mut store, &mut rng, "out", 1, c1);
        Ok(NoisePredictor {
            cfg,
            store,
            ids: PredictorIds {
                temb_w,
                temb_b,
                conv_in,
                t_in,
                down1,
                t_d1,
                down2,
                t_d2,
                mid,
                t_mid,
                up1,
                t_u1,
                up2,
                t_u2,
                out,
            },
            trained: false,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_on(&self, g: &mut Graph, x: ValueId, t: usize) -> ValueId {
        let te = sinusoidal_embedding(t as f64, self.cfg.time_embed_dim);
        let te_leaf = g.leaf(Shape::vec(self.cfg.time_embed_dim), te);
        let h0 = g.linear(te_leaf, self.ids.temb_w, Some(self.ids.temb_b));
        let temb = g.silu(h0);

        let block = |g: &mut Graph,
                     input: ValueId,
                     conv: (ParamId, ParamId),
                     tproj: (ParamId, ParamId),
                     stride: usize| {
            let c = g.conv2d(input, conv.0, Some(conv.1), stride, 1);
            let tb = g.linear(temb, tproj.0, Some(tproj.1));
            let cb = g.add_channel_bias(c, tb);
            g.silu(cb)
        };

        let h_in = block(g, x, self.ids.conv_in, self.ids.t_in, 1); // c1 @ n
        let h_d1 = block(g, h_in, self.ids.down1, self.ids.t_d1, 2); // c2 @ n/2
        let h_d2 = block(g, h_d1, self.ids.down2, self.ids.t_d2, 2); // c3 @ n/4
        let h_mid = block(g, h_d2, self.ids.mid, self.ids.t_mid, 1); // c3 @ n/4

        let u1 = g.upsample2x(h_mid);
        let c_u1 = g.conv2d(u1, self.ids.up1.0, Some(self.ids.up1.1), 1, 1);
        let t_u1 = g.linear(temb, self.ids.t_u1.0, Some(self.ids.t_u1.1));
        let cb_u1 = g.add_channel_bias(c_u1, t_u1);
        let skip1 = g.add(cb_u1, h_d1);
        let a_u1 = g.silu(skip1); // c2 @ n/2

        let u2 = g.upsample2x(a_u1);
        let c_u2 = g.conv2d(u2, self.ids.up2.0, Some(self.ids.up2.1), 1, 1);
        let t_u2 = g.linear(temb, self.ids.t_u2.0, Some(self.ids.t_u2.1));
        let cb_u2 = g.add_channel_bias(c_u2, t_u2);
        let skip2 = g.add(cb_u2, h_in);
        let a_u2 = g.silu(skip2); // c1 @ n

        g.conv2d(a_u2, self.ids.out.0, Some(self.ids.out.1), 1, 1)
    }

    /// eps_theta(x_t, t), inference mode.
    pub fn predict(&self, x_t: &Image2D, t: usize) -> Image2D {
        let mut g = Graph::new(&self.store);
        let xin = g.leaf(Shape::new(1, x_t.height, x_t.width), x_t.pixels.clone());
        let out = self.forward_on(&mut g, xin, t);
        let s = g.shape(out);
        Image2D {
            width: s.w,
            height: s.h,
            pixels: g.data(out).to_vec(),
        }
    }
}

struct ClassifierIds {
    temb_w: ParamId,
    temb_b: ParamId,
    conv1: (ParamId, ParamId),
    t1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    t2: (ParamId, ParamId),
    conv3: (ParamId, ParamId),
    t3: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: [usize; 3],
    pub time_embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_deg: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 64,
            channels: [8, 16, 32],
            time_embed_dim: 32,
            epochs: 60,
            batch_size: 16,
            learning_rate: 6e-4,
            augment_deg: 10.0,
            seed: 0,
        }
    }
}

/// C(h | x_t, t): class probabilities for noisy inputs.
pub struct NoisyClassifier {
    pub cfg: ClassifierConfig,
    store: ParamStore,
    ids: ClassifierIds,
    pub trained: bool,
}

impl NoisyClassifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        if cfg.image_size % 8 != 0 {
            return Err(Error::validation("image_size", "must be a multiple of 8"));
        }
        let mut rng = Rng::seed_from(cfg.seed).fork(0x434c46);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = cfg.channels;
        let te = cfg.time_embed_dim;
        let hidden = te;
        let conv = |store: &mut ParamStore, rng: &mut Rng, name: &str, cout: usize, cin: usize| {
            (
                store.add_randn(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
                store.add_zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let lin = |store: &mut ParamStore, rng: &mut Rng, name: &str, o: usize, i: usize| {
            (
                store.add_randn(&format!("{name}.w"), &[o, i], i, rng),
                store.add_zeros(&format!("{name}.b"), &[o]),
            )
        };
        let (temb_w, temb_b) = lin(&mut store, &mut rng, "temb", hidden, te);
        let conv1 = conv(&mut store, &mut rng, "conv1", c1, 1);
        let t1 = lin(&mut store, &mut rng, "t1", c1, hidden);
        let conv2 = conv(&mut store, &mut rng, "conv2", c2, c1);
        let t2 = lin(&mut store, &mut rng, "t2", c2, hidden);
        let conv3 = conv(&mut store, &mut rng, "conv3", c3, c2);
        let t3 = lin(&mut store, &mut rng, "t3", c3, hidden);
        let head_w = store.add_randn("head.w", &[2, c3], c3, &mut rng);
        let head_b = store.add_zeros("head.b", &[2]);
        Ok(NoisyClassifier {
            cfg,
            store,
            ids: ClassifierIds {
                temb_w,
                temb_b,
                conv1,
                t1,
                conv2,
                t2,
                conv3,
                t3,
                head_w,
                head_b,
            },
            trained: false,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits_on(&self, g: &mut Graph, x: ValueId, t: usize) -> ValueId {
        let te = sinusoidal_embedding(t as f64, self.cfg.time_embed_dim);
        let te_leaf = g.leaf(Shape::vec(self.cfg.time_embed_dim), te);
        let h0 = g.linear(te_leaf, self.ids.temb_w, Some(self.ids.temb_b));
        let temb = g.silu(h0);
        let block = |g: &mut Graph, input: ValueId, conv: (ParamId, ParamId), tproj: (ParamId, ParamId)| {
            let c = g.conv2d(input, conv.0, Some(conv.1), 2, 1);
            let tb = g.linear(temb, tproj.0, Some(tproj.1));
            let cb = g.add_channel_bias(c, tb);
            g.silu(cb)
        };
        let h1 = block(g, x, self.ids.conv1, self.ids.t1);
        let h2 = block(g, h1, self.ids.conv2, self.ids.t2);
        let h3 = block(g, h2, self.ids.conv3, self.ids.t3);
        let pooled = g.global_mean_pool(h3);
        g.linear(pooled, self.ids.head_w, Some(self.ids.head_b))
    }

    /// Class probabilities (sum to 1).
    pub fn probabilities(&self, x_t: &Image2D, t: usize) -> [f64; 2] {
        let mut g = Graph::new(&self.store);
        let xin = g.leaf(Shape::new(1, x_t.height, x_t.width), x_t.pixels.clone());
        let logits = self.logits_on(&mut g, xin, t);
        let ls = g.log_softmax(logits);
        let d = g.data(ls);
        [d[0].exp(), d[1].exp()]
    }

    /// grad_x log C(h | x_t, t) and the log-probability itself.
    pub fn log_prob_grad(&self, x_t: &Image2D, t: usize, target: ClassLabel) -> (Vec<f64>, f64) {
        let mut g = Graph::new(&self.store);
        let xin = g.leaf(Shape::new(1, x_t.height, x_t.width), x_t.pixels.clone());
        let logits = self.logits_on(&mut g, xin, t);
        let ls = g.log_softmax(logits);
        let lp = g.pick(ls, target.index());
        let back = g.backward(lp);
        let grad = back
            .node_grad(xin)
            .map(|gr| gr.to_vec())
            .unwrap_or_else(|| vec![0.0; x_t.pixels.len()]);
        (grad, g.scalar_value(lp))
    }
}

/// Evenly spaced inference timesteps tau_1 < ... < tau_S (tau_0 = 0).
pub fn inference_timesteps(sched: &DiffusionSchedule, steps: usize) -> Vec<usize> {
    let ratio = sched.t_total / steps;
    (0..=steps).map(|i| i * ratio).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Noise level L in inference-step units (1..=inference_steps).
    pub noise_level: usize,
    /// Classifier gradient scale s >= 0.
    pub scale: f64,
    /// Target class h.
    pub target: ClassLabel,
}

impl GuidanceConfig {
    pub fn validate(&self, inference_steps: usize) -> Result<()> {
        if self.noise_level < 1 || self.noise_level > inference_steps {
            return Err(Error::validation(
                "noise_level",
                format!("must be in 1..={inference_steps}"),
            ));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::validation("scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Deterministic reversed-DDIM encoding of `x` up to inference step `level`.
pub fn ddim_encode(
    x: &Image2D,
    level: usize,
    predictor: &NoisePredictor,
    sched: &DiffusionSchedule,
) -> Result<Image2D> {
    if !predictor.trained {
        return Err(Error::ModelMismatch("noise predictor is untrained".into()));
    }
    let steps = predictor.cfg.inference_steps;
    if level > steps {
        return Err(Error::validation("level", format!("must be <= {steps}")));
    }
    let tau = inference_timesteps(sched, steps);
    let mut x_t = x.clone();
    for i in 0..level {
        let t_cur = tau[i];
        let t_next = tau[i + 1];
        let eps = predictor.predict(&x_t, t_cur);
        let (a_cur, b_cur) = sched.coeffs(t_cur);
        let (a_next, b_next) = sched.coeffs(t_next);
        for j in 0..x_t.pixels.len() {
            let x0 = (x_t.pixels[j] - b_cur * eps.pixels[j]) / a_cur;
            x_t.pixels[j] = a_next * x0 + b_next * eps.pixels[j];
        }
    }
    Ok(x_t)
}

/// Deterministic DDIM denoising from inference step `guidance.noise_level`
/// back to 0, steering each step with the scaled classifier gradient.
/// The output is clamped to [0, 1].
pub fn ddim_decode_guided(
    x_l: &Image2D,
    guidance: &GuidanceConfig,
    predictor: &NoisePredictor,
    classifier: Option<&NoisyClassifier>,
    sched: &DiffusionSchedule,
) -> Result<Image2D> {
    let steps = predictor.cfg.inference_steps;
    guidance.validate(steps)?;
    if guidance.scale > 0.0 && classifier.is_none() {
        return Err(Error::ModelMismatch(
            "guided decoding (scale > 0) requires a classifier".into(),
        ));
    }
    let tau = inference_timesteps(sched, steps);
    let mut x_t = x_l.clone();
    for i in (1..=guidance.noise_level).rev() {
        let t_cur = tau[i];
        let t_prev = tau[i - 1];
        let mut eps = predictor.predict(&x_t, t_cur);
        let (a_cur, b_cur) = sched.coeffs(t_cur);
        if guidance.scale > 0.0 {
            let (grad, _) = classifier
                .unwrap()
                .log_prob_grad(&x_t, t_cur, guidance.target);
            for (e, g) in eps.pixels.iter_mut().zip(&grad) {
                *e -= b_cur * guidance.scale * g;
            }
        }
        let (a_prev, b_prev) = sched.coeffs(t_prev);
        for j in 0..x_t.pixels.len() {
            let x0 = (x_t.pixels[j] - b_cur * eps.pixels[j]) / a_cur;
            x_t.pixels[j] = a_prev * x0 + b_prev * eps.pixels[j];
        }
    }
    for v in x_t.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(x_t)
}

/// Trains the noise predictor on EU+DS slices (epsilon-prediction MSE over
/// uniformly sampled t). A single-class set trains with a warning flag.
pub fn train_ddpm(
    set: &SliceSet,
    sched: &DiffusionSchedule,
    cfg: DdimConfig,
) -> Result<(NoisePredictor, DdimTrainStats)> {
    if set.is_empty() {
        return Err(Error::Guard("training set is empty".into()));
    }
    let single_class_warning = set.groups_present().iter().map(|g| g.is_ds()).collect::<std::collections::BTreeSet<_>>().len() < 2;
    let mut model = NoisePredictor::new(cfg.clone())?;
    let mut adam = Adam::new(&model.store);
    let mut stats = DdimTrainStats {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        single_class_warning,
    };
    let root = Rng::seed_from(cfg.seed).fork(0x544444);

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..set.len()).collect();
        epoch_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, f64, usize, u64)> = batch
                .iter()
                .map(|&i| {
                    let angle = if cfg.augment_deg > 0.0 {
                        epoch_rng.uniform(-cfg.augment_deg, cfg.augment_deg)
                    } else {
                        0.0
                    };
                    let t = 1 + epoch_rng.below(sched.t_total);
                    (i, angle, t, epoch_rng.next_u64())
                })
                .collect();
            let results: Vec<(ParamGrads, f64)> = jobs
                .par_iter()
                .map(|&(i, angle, t, noise_seed)| {
                    let img = if angle != 0.0 {
                        rotate2d(&set.slices[i], angle)
                    } else {
                        set.slices[i].clone()
                    };
                    ddpm_step(&model, &img, t, noise_seed, sched)
                })
                .collect();

            let mut grads = ParamGrads::zeros_like(&model.store);
            let scale = 1.0 / results.len() as f64;
            for (g, l) in &results {
                grads.accumulate(g, scale);
                epoch_loss += l;
            }
            adam.step(&mut model.store, &grads, cfg.learning_rate, None);
        }

        stats.epoch_losses.push(epoch_loss / set.len() as f64);
        if model.store.any_non_finite() {
            return Err(Error::NonFinite("ddim parameters"));
        }
    }

    model.trained = true;
    Ok((model, stats))
}

fn ddpm_step(
    model: &NoisePredictor,
    img: &Image2D,
    t: usize,
    noise_seed: u64,
    sched: &DiffusionSchedule,
) -> (ParamGrads, f64) {
    let mut rng = Rng::seed_from(noise_seed).fork(0x455053);
    let mut eps = vec![0.0; img.pixels.len()];
    rng.fill_normal(&mut eps);
    let eps_img = Image2D {
        width: img.width,
        height: img.height,
        pixels: eps.clone(),
    };
    let x_t = forward_noise(img, t, &eps_img, sched);

    let mut g = Graph::new(&model.store);
    let xin = g.leaf(Shape::new(1, img.height, img.width), x_t.pixels);
    let target = g.leaf(Shape::new(1, img.height, img.width), eps);
    let pred = model.forward_on(&mut g, xin, t);
    let loss = g.mse_loss(pred, target);
    let back = g.backward(loss);
    (back.param_grads, g.scalar_value(loss))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTrainStats {
    pub epoch_losses: Vec<f64>,
}

/// Trains the noisy classifier on EU+DS labeled slices; both classes must
/// be present.
pub fn train_classifier(
    set: &SliceSet,
    sched: &DiffusionSchedule,
    cfg: ClassifierConfig,
) -> Result<(NoisyClassifier, ClassifierTrainStats)> {
    let classes: std::collections::BTreeSet<usize> = set
        .groups
        .iter()
        .map(|g| ClassLabel::of_group(*g).index())
        .collect();
    if classes.len() < 2 {
        return Err(Error::Guard(
            "classifier training needs both EU and DS classes".into(),
        ));
    }
    let mut model = NoisyClassifier::new(cfg.clone())?;
    let mut adam = Adam::new(&model.store);
    let mut stats = ClassifierTrainStats {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let root = Rng::seed_from(cfg.seed).fork(0x54434c);

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..set.len()).collect();
        epoch_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, f64, usize, u64)> = batch
                .iter()
                .map(|&i| {
                    let angle = if cfg.augment_deg > 0.0 {
                        epoch_rng.uniform(-cfg.augment_deg, cfg.augment_deg)
                    } else {
                        0.0
                    };
                    let t = 1 + epoch_rng.below(sched.t_total);
                    (i, angle, t, epoch_rng.next_u64())
                })
                .collect();
            let results: Vec<(ParamGrads, f64)> = jobs
                .par_iter()
                .map(|&(i, angle, t, noise_seed)| {
                    let img = if angle != 0.0 {
                        rotate2d(&set.slices[i], angle)
                    } else {
                        set.slices[i].clone()
                    };
                    let label = ClassLabel::of_group(set.groups[i]);
                    classifier_step(&model, &img, t, label, noise_seed, sched)
                })
                .collect();

            let mut grads = ParamGrads::zeros_like(&model.store);
            let scale = 1.0 / results.len() as f64;
            for (g, l) in &results {
                grads.accumulate(g, scale);
                epoch_loss += l;
            }
            adam.step(&mut model.store, &grads, cfg.learning_rate, None);
        }

        stats.epoch_losses.push(epoch_loss / set.len() as f64);
        if model.store.any_non_finite() {
            return Err(Error::NonFinite("classifier parameters"));
        }
    }

    model.trained = true;
    Ok((model, stats))
}

fn classifier_step(
    model: &NoisyClassifier,
    img: &Image2D,
    t: usize,
    label: ClassLabel,
    noise_seed: u64,
    sched: &DiffusionSchedule,
) -> (ParamGrads, f64) {
    let mut rng = Rng::seed_from(noise_seed).fork(0x455053);
    let mut eps = vec![0.0; img.pixels.len()];
    rng.fill_normal(&mut eps);
    let eps_img = Image2D {
        width: img.width,
        height: img.height,
        pixels: eps,
    };
    let x_t = forward_noise(img, t, &eps_img, sched);

    let mut g = Graph::new(&model.store);
    let xin = g.leaf(Shape::new(1, img.height, img.width), x_t.pixels);
    let logits = model.logits_on(&mut g, xin, t);
    let ls = g.log_softmax(logits);
    let lp = g.pick(ls, label.index());
    let loss = g.scale(lp, -1.0);
    let back = g.backward(loss);
    (back.param_grads, g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas.len(), 1000);
        assert_eq!(s.alpha_bar.len(), 1001);
        assert_eq!(s.alpha_bar[0], 1.0);
        for w in s.betas.windows(2) {
            assert!(w[0] < w[1]);
        }
        for w in s.alpha_bar.windows(2) {
            assert!(w[1] < w[0]);
        }
        // Product evaluation: abar_T is tiny for the full schedule.
        assert!(*s.alpha_bar.last().unwrap() < 0.01);
    }

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas, vec![0.1]);
        assert!((s.alpha_bar[1] - 0.9).abs() <= 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    fn ramp(n: usize, seed: u64) -> Image2D {
        let mut rng = Rng::seed_from(seed);
        Image2D::from_fn(n, n, |x, _| (0.2 + 0.6 * (x as f64 / n as f64) + 0.1 * rng.uniform01()).clamp(0.0, 1.0))
    }

    #[test]
    fn forward_noise_closed_form() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let x = ramp(8, 1);
        let mut rng = Rng::seed_from(9);
        let eps = Image2D::from_fn(8, 8, |_, _| rng.normal());
        // t = 0 leaves x unchanged.
        let x0 = forward_noise(&x, 0, &eps, &sched);
        assert_eq!(x0.pixels, x.pixels);
        // Loop oracle at 1e-12.
        let t = 37;
        let xt = forward_noise(&x, t, &eps, &sched);
        let ab = sched.alpha_bar[t];
        for i in 0..64 {
            let expect = ab.sqrt() * x.pixels[i] + (1.0 - ab).sqrt() * eps.pixels[i];
            assert!((xt.pixels[i] - expect).abs() <= 1e-12);
        }
        // Linearity in x: noise(ax) = a*sqrt(ab)x + b*eps.
        let x2 = x.map(|v| 2.0 * v);
        let xt2 = forward_noise(&x2, t, &eps, &sched);
        for i in 0..64 {
            let expect = 2.0 * ab.sqrt() * x.pixels[i] + (1.0 - ab).sqrt() * eps.pixels[i];
            assert!((xt2.pixels[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_noise_variance_monte_carlo() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let x = ramp(8, 3);
        let t = 60;
        let ab = sched.alpha_bar[t];
        let mut rng = Rng::seed_from(77);
        let n_draws = 2000;
        let mut sum_var = 0.0;
        for _ in 0..n_draws {
            let eps = Image2D::from_fn(8, 8, |_, _| rng.normal());
            let xt = forward_noise(&x, t, &eps, &sched);
            let mut v = 0.0;
            for i in 0..64 {
                let centered = xt.pixels[i] - ab.sqrt() * x.pixels[i];
                v += centered * centered;
            }
            sum_var += v / 64.0;
        }
        let measured = sum_var / n_draws as f64;
        let expected = 1.0 - ab;
        assert!(
            (measured / expected - 1.0).abs() <= 0.05,
            "measured {measured} vs {expected}"
        );
    }

    fn tiny_ddim_cfg() -> DdimConfig {
        DdimConfig {
            image_size: 16,
            channels: [4, 6, 8],
            time_embed_dim: 8,
            t_total: 50,
            inference_steps: 10,
            epochs: 2,
            batch_size: 4,
            augment_deg: 0.0,
            seed: 1,
            ..DdimConfig::default()
        }
    }

    #[test]
    fn predictor_output_shape_and_determinism() {
        let m = NoisePredictor::new(tiny_ddim_cfg()).unwrap();
        let x = ramp(16, 5);
        for t in [1, 25, 50] {
            let e1 = m.predict(&x, t);
            let e2 = m.predict(&x, t);
            assert_eq!(e1.pixels, e2.pixels);
            assert_eq!((e1.width, e1.height), (16, 16));
        }
    }

    #[test]
    fn untrained_predictor_rejected_for_encode() {
        let m = NoisePredictor::new(tiny_ddim_cfg()).unwrap();
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = ramp(16, 2);
        assert!(ddim_encode(&x, 5, &m, &sched).is_err());
    }

    #[test]
    fn encode_level_zero_is_identity() {
        let mut m = NoisePredictor::new(tiny_ddim_cfg()).unwrap();
        m.trained = true;
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = ramp(16, 2);
        let enc = ddim_encode(&x, 0, &m, &sched).unwrap();
        assert_eq!(enc.pixels, x.pixels);
    }

    #[test]
    fn encode_decode_bit_deterministic() {
        let mut m = NoisePredictor::new(tiny_ddim_cfg()).unwrap();
        m.trained = true;
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = ramp(16, 6);
        let e1 = ddim_encode(&x, 5, &m, &sched).unwrap();
        let e2 = ddim_encode(&x, 5, &m, &sched).unwrap();
        assert_eq!(e1.pixels, e2.pixels);
        let gcfg = GuidanceConfig {
            noise_level: 5,
            scale: 0.0,
            target: ClassLabel::Eu,
        };
        let d1 = ddim_decode_guided(&e1, &gcfg, &m, None, &sched).unwrap();
        let d2 = ddim_decode_guided(&e1, &gcfg, &m, None, &sched).unwrap();
        assert_eq!(d1.pixels, d2.pixels);
    }

    #[test]
    fn guidance_validation_and_missing_classifier() {
        let mut m = NoisePredictor::new(tiny_ddim_cfg()).unwrap();
        m.trained = true;
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let x = ramp(16, 6);
        let bad = GuidanceConfig { noise_level: 0, scale: 1.0, target: ClassLabel::Eu };
        assert!(ddim_decode_guided(&x, &bad, &m, None, &sched).is_err());
        let needs_clf = GuidanceConfig { noise_level: 3, scale: 1.0, target: ClassLabel::Eu };
        assert!(ddim_decode_guided(&x, &needs_clf, &m, None, &sched).is_err());
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let c = NoisyClassifier::new(ClassifierConfig {
            image_size: 16,
            channels: [4, 6, 8],
            time_embed_dim: 8,
            ..ClassifierConfig::default()
        })
        .unwrap();
        let x = ramp(16, 4);
        let p = c.probabilities(&x, 7);
        assert!((p[0] + p[1] - 1.0).abs() <= 1e-6);
    }

    /// Classifier input gradient vs central finite differences (the exact
    /// path used by guided decoding).
    #[test]
    fn classifier_log_prob_grad_matches_fd() {
        let c = NoisyClassifier::new(ClassifierConfig {
            image_size: 16,
            channels: [3, 4, 5],
            time_embed_dim: 8,
            seed: 9,
            ..ClassifierConfig::default()
        })
        .unwrap();
        let x = ramp(16, 8);
        let (grad, _) = c.log_prob_grad(&x, 13, ClassLabel::Ds);
        for probe in [0usize, 33, 128, 255] {
            let h = 1e-5;
            let mut xp = x.clone();
            xp.pixels[probe] += h;
            let mut xm = x.clone();
            xm.pixels[probe] -= h;
            let fp = c.probabilities(&xp, 13)[1].ln();
            let fm = c.probabilities(&xm, 13)[1].ln();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[probe] - fd).abs() / grad[probe].abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3, "grad[{probe}] {} vs fd {fd}", grad[probe]);
        }
    }

    #[test]
    fn trainer_guards() {
        use crate::phantom::Group;
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let mut eu_only = SliceSet::new();
        eu_only.push("eu_0", Group::Eu, ramp(16, 1));
        // Classifier needs both classes.
        let cfg = ClassifierConfig {
            image_size: 16,
            channels: [3, 4, 5],
            time_embed_dim: 8,
            epochs: 1,
            ..ClassifierConfig::default()
        };
        assert!(train_classifier(&eu_only, &sched, cfg).is_err());
        // DDPM trains single-class with a warning.
        let mut cfg2 = tiny_ddim_cfg();
        cfg2.epochs = 1;
        cfg2.t_total = 50;
        cfg2.inference_steps = 10;
        let (_, stats) = train_ddpm(&eu_only, &sched, cfg2).unwrap();
        assert!(stats.single_class_warning);
    }
}
