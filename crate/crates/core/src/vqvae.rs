//! Vector-quantized variational autoencoder trained only on EU slices.
//!
//! Small convolutional encoder/decoder with two downsampling stages
//! (64 -> 16), a learned codebook (gradient-based, via the codebook loss
//! term), and the composite L1 + codebook + beta * commitment objective.

use crate::dataset::SliceSet;
use crate::error::{Error, Result};
use crate::imageproc::{rotate2d, Image2D};
use crate::nn::{Adam, Graph, ParamGrads, ParamId, ParamStore, Shape, ValueId};
use crate::rng::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VqVaeConfig {
    pub image_size: usize,
    /// Channel widths of the two downsampling stages.
    pub channels: [usize; 2],
    /// Latent embedding dimension per spatial cell.
    pub n_z: usize,
    /// Codebook entry count K.
    pub codebook_size: usize,
    /// Commitment loss weight.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rotation augmentation half-range in degrees (0 disables).
    pub augment_deg: f64,
    pub seed: u64,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        VqVaeConfig {
            image_size: 64,
            channels: [12, 24],
            n_z: 32,
            codebook_size: 128,
            beta: 0.25,
            epochs: 80,
            batch_size: 16,
            learning_rate: 5e-4,
            augment_deg: 10.0,
            seed: 0,
        }
    }
}

/// Latent feature grid (spatial h x w, embedding dim n_z), channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub n_z: usize,
    /// Layout: values[z * h*w + y*w + x].
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn cell(&self, y: usize, x: usize) -> Vec<f64> {
        let cells = self.h * self.w;
        (0..self.n_z).map(|z| self.values[z * cells + y * self.w + x]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub n_z: usize,
    /// Row-major: entries[k * n_z ..].
    pub entries: Vec<f64>,
}

impl Codebook {
    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.n_z..(k + 1) * self.n_z]
    }
}

struct Ids {
    enc_w: [ParamId; 4],
    enc_b: [ParamId; 4],
    codebook: ParamId,
    dec_w: [ParamId; 4],
    dec_b: [ParamId; 4],
}

/// The model: parameters plus architecture config.
pub struct VqVae {
    pub cfg: VqVaeConfig,
    store: ParamStore,
    ids: Ids,
}

pub struct QuantizeResult {
    pub z_q: LatentGrid,
    pub indices: Vec<usize>,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub dead_code_fraction: Vec<f64>,
}

impl VqVae {
    pub fn new(cfg: VqVaeConfig) -> Result<Self> {
        if cfg.image_size % 4 != 0 || cfg.image_size < 8 {
            return Err(Error::validation("image_size", "must be a multiple of 4 and >= 8"));
        }
        if cfg.codebook_size < 2 {
            return Err(Error::validation("codebook_size", "K must be >= 2"));
        }
        let mut rng = Rng::seed_from(cfg.seed).fork(0x5651);
        let mut store = ParamStore::new();
        let [c1, c2] = cfg.channels;
        let nz = cfg.n_z;
        let conv = |store: &mut ParamStore, rng: &mut Rng, name: &str, cout: usize, cin: usize| {
            (
                store.add_randn(&format!("{name}.w"), &[cout, cin, 3, 3], cin * 9, rng),
                store.add_zeros(&format!("{name}.b"), &[cout]),
            )
        };
        let (w1, b1) = conv(&mut store, &mut rng, "enc1", c1, 1);
        let (w2, b2) = conv(&mut store, &mut rng, "enc2", c2, c1);
        let (w3, b3) = conv(&mut store, &mut rng, "enc3", c2, c2);
        let (wz, bz) = conv(&mut store, &mut rng, "enc_z", nz, c2);
        let codebook = {
            let mut data = vec![0.0; cfg.codebook_size * nz];
            let std = 1.0 / (nz as f64).sqrt();
            for v in data.iter_mut() {
                *v = std * rng.normal();
            }
            store.add("codebook", &[cfg.codebook_size, nz], data)
        };
        let (w4, b4) = conv(&mut store, &mut rng, "dec1", c2, nz);
        let (w5, b5) = conv(&mut store, &mut rng, "dec_up1", c1, c2);
        let (w6, b6) = conv(&mut store, &mut rng, "dec_up2", c1, c1);
        let (w7, b7) = conv(&mut store, &mut rng, "dec_out", 1, c1);
        Ok(VqVae {
            cfg,
            store,
            ids: Ids {
                enc_w: [w1, w2, w3, wz],
                enc_b: [b1, b2, b3, bz],
                codebook,
                dec_w: [w4, w5, w6, w7],
                dec_b: [b4, b5, b6, b7],
            },
        })
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.store.get(self.ids.codebook);
        Codebook {
            k: t.shape[0],
            n_z: t.shape[1],
            entries: t.data.clone(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_hw(&self) -> usize {
        self.cfg.image_size / 4
    }

    fn check_input(&self, x: &Image2D) -> Result<()> {
        if x.width != self.cfg.image_size || x.height != self.cfg.image_size {
            return Err(Error::DimMismatch {
                context: "vqvae input",
                left: vec![x.width, x.height],
                right: vec![self.cfg.image_size, self.cfg.image_size],
            });
        }
        Ok(())
    }

    /// Encoder forward on a tape; returns (z node, per-level feature nodes).
    fn encode_on(&self, g: &mut Graph, x: ValueId) -> (ValueId, Vec<ValueId>) {
        let c1 = g.conv2d(x, self.ids.enc_w[0], Some(self.ids.enc_b[0]), 2, 1);
        let a1 = g.silu(c1);
        let c2 = g.conv2d(a1, self.ids.enc_w[1], Some(self.ids.enc_b[1]), 2, 1);
        let a2 = g.silu(c2);
        let c3 = g.conv2d(a2, self.ids.enc_w[2], Some(self.ids.enc_b[2]), 1, 1);
        let a3 = g.silu(c3);
        let z = g.conv2d(a3, self.ids.enc_w[3], Some(self.ids.enc_b[3]), 1, 1);
        (z, vec![a1, a2, a3])
    }

    fn decode_on(&self, g: &mut Graph, zq: ValueId) -> ValueId {
        let d1 = g.conv2d(zq, self.ids.dec_w[0], Some(self.ids.dec_b[0]), 1, 1);
        let a1 = g.silu(d1);
        let u1 = g.upsample2x(a1);
        let d2 = g.conv2d(u1, self.ids.dec_w[1], Some(self.ids.dec_b[1]), 1, 1);
        let a2 = g.silu(d2);
        let u2 = g.upsample2x(a2);
        let d3 = g.conv2d(u2, self.ids.dec_w[2], Some(self.ids.dec_b[2]), 1, 1);
        let a3 = g.silu(d3);
        let out = g.conv2d(a3, self.ids.dec_w[3], Some(self.ids.dec_b[3]), 1, 1);
        g.sigmoid(out)
    }

    /// Deterministic inference-mode encoding.
    pub fn encode(&self, x: &Image2D) -> Result<LatentGrid> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xin = g.leaf(Shape::new(1, x.height, x.width), x.pixels.clone());
        let (z, _) = self.encode_on(&mut g, xin);
        let s = g.shape(z);
        Ok(LatentGrid {
            h: s.h,
            w: s.w,
            n_z: s.c,
            values: g.data(z).to_vec(),
        })
    }

    /// Per-level encoder feature maps (inference mode), for the perceptual
    /// distance in anomaly maps.
    pub fn encoder_features(&self, x: &Image2D) -> Result<Vec<(Shape, Vec<f64>)>> {
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xin = g.leaf(Shape::new(1, x.height, x.width), x.pixels.clone());
        let (_, feats) = self.encode_on(&mut g, xin);
        Ok(feats.into_iter().map(|f| (g.shape(f), g.data(f).to_vec())).collect())
    }

    pub fn decode(&self, z_q: &LatentGrid) -> Result<Image2D> {
        let hw = self.latent_hw();
        if z_q.h != hw || z_q.w != hw || z_q.n_z != self.cfg.n_z {
            return Err(Error::DimMismatch {
                context: "vqvae latent",
                left: vec![z_q.n_z, z_q.h, z_q.w],
                right: vec![self.cfg.n_z, hw, hw],
            });
        }
        let mut g = Graph::new(&self.store);
        let zin = g.leaf(Shape::new(z_q.n_z, z_q.h, z_q.w), z_q.values.clone());
        let out = self.decode_on(&mut g, zin);
        let s = g.shape(out);
        Ok(Image2D {
            width: s.w,
            height: s.h,
            pixels: g.data(out).to_vec(),
        })
    }

    /// Full reconstruction x -> decode(quantize(encode(x))).
    pub fn reconstruct(&self, x: &Image2D) -> Result<Image2D> {
        let z = self.encode(x)?;
        let q = quantize(&z, &self.codebook())?;
        self.decode(&q.z_q)
    }

    /// Analytic gradients of the composite training loss for one image
    /// (used by the finite-difference checks).
    pub fn training_gradients(&self, x: &Image2D) -> Result<(ParamGrads, f64)> {
        self.check_input(x)?;
        let out = train_step(self, x);
        Ok((out.grads, out.loss))
    }

    /// The composite training loss value for one image.
    pub fn training_loss(&self, x: &Image2D) -> Result<f64> {
        self.check_input(x)?;
        Ok(train_step(self, x).loss)
    }
}

/// Nearest-codebook quantization with lowest-index tie-break. The two loss
/// terms are mean squared error over all latent elements.
pub fn quantize(z: &LatentGrid, cb: &Codebook) -> Result<QuantizeResult> {
    if z.n_z != cb.n_z {
        return Err(Error::DimMismatch {
            context: "quantize",
            left: vec![z.n_z],
            right: vec![cb.n_z],
        });
    }
    let cells = z.h * z.w;
    let mut indices = vec![0usize; cells];
    let mut z_q = vec![0.0; z.values.len()];
    let mut sq_dist = 0.0;
    for cell in 0..cells {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..cb.k {
            let e = cb.entry(k);
            let mut d = 0.0;
            for zi in 0..z.n_z {
                let diff = z.values[zi * cells + cell] - e[zi];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        indices[cell] = best;
        sq_dist += best_d;
        let e = cb.entry(best);
        for zi in 0..z.n_z {
            z_q[zi * cells + cell] = e[zi];
        }
    }
    let loss = sq_dist / z.values.len() as f64;
    Ok(QuantizeResult {
        z_q: LatentGrid {
            h: z.h,
            w: z.w,
            n_z: z.n_z,
            values: z_q,
        },
        indices,
        // Same value either side of the stop-gradient; the placement only
        // matters for which parameters receive the gradient.
        codebook_loss: loss,
        commitment_loss: loss,
    })
}

/// Composite training objective: mean|x - x_hat| + codebook + beta * commitment.
pub fn vqvae_loss(
    x: &Image2D,
    x_hat: &Image2D,
    codebook_loss: f64,
    commitment_loss: f64,
    beta: f64,
) -> f64 {
    let n = x.pixels.len() as f64;
    let l1: f64 = x
        .pixels
        .iter()
        .zip(&x_hat.pixels)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    l1 + codebook_loss + beta * commitment_loss
}

fn nearest_indices(g: &Graph, z: ValueId, store: &ParamStore, cb_id: ParamId) -> Vec<usize> {
    let s = g.shape(z);
    let cells = s.h * s.w;
    let zdata = g.data(z);
    let cb = store.get(cb_id);
    let (k_total, nz) = (cb.shape[0], cb.shape[1]);
    let mut out = vec![0usize; cells];
    for cell in 0..cells {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..k_total {
            let e = &cb.data[k * nz..(k + 1) * nz];
            let mut d = 0.0;
            for zi in 0..nz {
                let diff = zdata[zi * cells + cell] - e[zi];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        out[cell] = best;
    }
    out
}

struct SampleGrads {
    grads: ParamGrads,
    loss: f64,
    used_codes: Vec<usize>,
}

/// Trains on EU-only slices; refuses anything else.
pub fn train_vqvae(set: &SliceSet, cfg: VqVaeConfig) -> Result<(VqVae, TrainStats)> {
    set.require_eu_only()?;
    let mut model = VqVae::new(cfg.clone())?;
    let mut adam = Adam::new(&model.store);
    let mut stats = TrainStats {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        dead_code_fraction: Vec::with_capacity(cfg.epochs),
    };
    let root = Rng::seed_from(cfg.seed).fork(0x545256);

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..set.len()).collect();
        epoch_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut used = vec![false; cfg.codebook_size];

        for batch in order.chunks(cfg.batch_size) {
            let angles: Vec<f64> = batch
                .iter()
                .map(|_| {
                    if cfg.augment_deg > 0.0 {
                        epoch_rng.uniform(-cfg.augment_deg, cfg.augment_deg)
                    } else {
                        0.0
                    }
                })
                .collect();
            let results: Vec<SampleGrads> = batch
                .par_iter()
                .zip(angles.par_iter())
                .map(|(&i, &angle)| {
                    let img = if angle != 0.0 {
                        rotate2d(&set.slices[i], angle)
                    } else {
                        set.slices[i].clone()
                    };
                    train_step(&model, &img)
                })
                .collect();

            let mut grads = ParamGrads::zeros_like(&model.store);
            let scale = 1.0 / results.len() as f64;
            for r in &results {
                grads.accumulate(&r.grads, scale);
                epoch_loss += r.loss;
                for &c in &r.used_codes {
                    used[c] = true;
                }
            }
            adam.step(&mut model.store, &grads, cfg.learning_rate, None);
        }

        stats.epoch_losses.push(epoch_loss / set.len() as f64);
        let dead = used.iter().filter(|&&u| !u).count();
        stats.dead_code_fraction.push(dead as f64 / cfg.codebook_size as f64);
        if model.store.any_non_finite() {
            return Err(Error::NonFinite("vqvae parameters"));
        }
    }

    Ok((model, stats))
}

fn train_step(model: &VqVae, img: &Image2D) -> SampleGrads {
    let mut g = Graph::new(&model.store);
    let x = g.leaf(Shape::new(1, img.height, img.width), img.pixels.clone());
    let (z, _) = model.encode_on(&mut g, x);
    let indices = nearest_indices(&g, z, &model.store, model.ids.codebook);
    let s = g.shape(z);
    let lookup = g.codebook_lookup(model.ids.codebook, indices.clone(), s.h, s.w);

    let z_sg = g.detach(z);
    let codebook_loss = g.mse_loss(z_sg, lookup);
    let e_sg = g.detach(lookup);
    let commitment = g.mse_loss(z, e_sg);

    // Straight-through: z_q = z + sg(e - z).
    let diff = g.sub(lookup, z);
    let diff_sg = g.detach(diff);
    let z_q = g.add(z, diff_sg);

    let x_hat = model.decode_on(&mut g, z_q);
    let recon = g.l1_loss(x_hat, x);

    let commit_scaled = g.scale(commitment, model.cfg.beta);
    let partial = g.add(recon, codebook_loss);
    let loss = g.add(partial, commit_scaled);

    let back = g.backward(loss);
    SampleGrads {
        grads: back.param_grads,
        loss: g.scalar_value(loss),
        used_codes: indices,
    }
}
