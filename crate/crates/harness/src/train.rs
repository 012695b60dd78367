//! Training dispatch: assembles slice sets, applies the histogram-template
//! preprocessing for H-trained variants, trains the requested family, and
//! writes the checkpoint plus a per-epoch curve CSV.

use crate::config::{ExperimentConfig, ModelFamily, TrainVariant};
use crate::data::{load_manifest, training_set};
use crate::paths::RunPaths;
use anomap_core::dataset::SliceSet;
use anomap_core::ddim::{
    make_schedule, train_classifier, train_ddpm, ClassifierConfig, DdimConfig, DiffusionSchedule,
    NoisePredictor, NoisyClassifier,
};
use anomap_core::imageproc::{average_histograms, histogram_match_to_cdf};
use anomap_core::io::{self, CheckpointMeta};
use anomap_core::phantom::Split;
use anomap_core::rae::{train_rae, Rae, RaeConfig};
use anomap_core::rng::Rng;
use anomap_core::vqvae::{train_vqvae, VqVae, VqVaeConfig};
use anomap_core::{Error, Result};
use std::path::Path;

pub fn checkpoint_stem(family: ModelFamily, variant: TrainVariant) -> String {
    format!("{}_{}", family.name(), variant.name())
}

/// The stored 256-bin template histogram (normalized CDF source), computed
/// once from the raw training split and reused verbatim at evaluation time.
pub fn template_cdf(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<f64>> {
    let path = paths.template_histogram_path();
    if path.exists() {
        let hist: Vec<f64> = io::read_json(&path)?;
        return Ok(cdf_of(&hist));
    }
    let set = training_set(cfg, paths, false)?;
    let hist = average_histograms(&set.slices, cfg.eval.histogram_bins)?;
    std::fs::create_dir_all(paths.checkpoints_dir())?;
    io::write_json(&path, &hist)?;
    Ok(cdf_of(&hist))
}

fn cdf_of(hist: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    hist.iter()
        .map(|&h| {
            acc += h;
            acc
        })
        .collect()
}

fn match_set_to_template(set: &SliceSet, cdf: &[f64]) -> SliceSet {
    let mut out = SliceSet::new();
    for i in 0..set.len() {
        out.push(
            set.subject_ids[i].clone(),
            set.groups[i],
            histogram_match_to_cdf(&set.slices[i], cdf),
        );
    }
    out
}

fn family_seed(cfg: &ExperimentConfig, family: ModelFamily, variant: TrainVariant) -> u64 {
    let tag = match (family, variant) {
        (ModelFamily::VqVae, TrainVariant::Base) => 11,
        (ModelFamily::VqVae, TrainVariant::HTrained) => 12,
        (ModelFamily::Rae, TrainVariant::Base) => 21,
        (ModelFamily::Rae, TrainVariant::HTrained) => 22,
        (ModelFamily::Ddim, _) => 31,
        (ModelFamily::Classifier, _) => 41,
    };
    Rng::seed_from(cfg.seed).fork(tag).next_u64()
}

fn write_curve(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Other(e.to_string()))?;
    let mut full_header = vec!["epoch".to_string()];
    full_header.extend(header.iter().map(|s| s.to_string()));
    w.write_record(&full_header).map_err(|e| Error::Other(e.to_string()))?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(|e| Error::Other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one family/variant and writes checkpoint + curve. Returns the
/// checkpoint stem.
pub fn train(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    family: ModelFamily,
    variant: TrainVariant,
) -> Result<String> {
    if variant == TrainVariant::HTrained
        && matches!(family, ModelFamily::Ddim | ModelFamily::Classifier)
    {
        return Err(Error::validation(
            "variant",
            "h_trained applies to the autoencoder families only",
        ));
    }
    let stem = checkpoint_stem(family, variant);
    let seed = family_seed(cfg, family, variant);
    let augment = cfg.augmentation.rotation_deg;
    std::fs::create_dir_all(paths.checkpoints_dir())?;

    match family {
        ModelFamily::VqVae => {
            let mut set = training_set(cfg, paths, false)?;
            if variant == TrainVariant::HTrained {
                let cdf = template_cdf(cfg, paths)?;
                set = match_set_to_template(&set, &cdf);
            }
            let model_cfg = VqVaeConfig {
                epochs: cfg.epochs_for(family),
                batch_size: cfg.vqvae.batch_size,
                learning_rate: cfg.vqvae.learning_rate,
                augment_deg: augment,
                seed,
                ..VqVaeConfig::default()
            };
            let (model, stats) = train_vqvae(&set, model_cfg.clone())?;
            let rows: Vec<Vec<f64>> = stats
                .epoch_losses
                .iter()
                .zip(&stats.dead_code_fraction)
                .map(|(&l, &d)| vec![l, d])
                .collect();
            write_curve(&paths.curve_path(&stem), &["loss", "dead_code_fraction"], &rows)?;
            save(paths, &stem, "vqvae", &model_cfg, seed, model.params(), cfg)?;
        }
        ModelFamily::Rae => {
            let mut set = training_set(cfg, paths, false)?;
            if variant == TrainVariant::HTrained {
                let cdf = template_cdf(cfg, paths)?;
                set = match_set_to_template(&set, &cdf);
            }
            let model_cfg = RaeConfig {
                epochs: cfg.epochs_for(family),
                batch_size: cfg.rae.batch_size,
                learning_rate: cfg.rae.learning_rate,
                learning_rate_min: cfg.rae.learning_rate_min,
                augment_deg: augment,
                seed,
                ..RaeConfig::default()
            };
            let (model, stats) = train_rae(&set, model_cfg.clone())?;
            let rows: Vec<Vec<f64>> = (0..stats.elbo.len())
                .map(|i| vec![stats.encoder_losses[i], stats.decoder_losses[i], stats.elbo[i]])
                .collect();
            write_curve(
                &paths.curve_path(&stem),
                &["encoder_loss", "decoder_loss", "elbo"],
                &rows,
            )?;
            save(paths, &stem, "rae", &model_cfg, seed, model.params(), cfg)?;
        }
        ModelFamily::Ddim => {
            let set = training_set(cfg, paths, true)?;
            let model_cfg = ddim_config(cfg, seed);
            let sched = make_schedule(model_cfg.t_total, model_cfg.beta_min, model_cfg.beta_max)?;
            let (model, stats) = train_ddpm(&set, &sched, model_cfg.clone())?;
            if stats.single_class_warning {
                eprintln!("warning: ddim training set contains a single class");
            }
            let rows: Vec<Vec<f64>> = stats.epoch_losses.iter().map(|&l| vec![l]).collect();
            write_curve(&paths.curve_path(&stem), &["loss"], &rows)?;
            save(paths, &stem, "ddim", &model_cfg, seed, model.params(), cfg)?;
        }
        ModelFamily::Classifier => {
            let set = training_set(cfg, paths, true)?;
            let model_cfg = classifier_config(cfg, seed);
            let sched = make_schedule(cfg.ddim.t_total, 1e-4, 0.02)?;
            let (model, stats) = train_classifier(&set, &sched, model_cfg.clone())?;
            let rows: Vec<Vec<f64>> = stats.epoch_losses.iter().map(|&l| vec![l]).collect();
            write_curve(&paths.curve_path(&stem), &["loss"], &rows)?;
            save(paths, &stem, "classifier", &model_cfg, seed, model.params(), cfg)?;
        }
    }
    Ok(stem)
}

fn ddim_config(cfg: &ExperimentConfig, seed: u64) -> DdimConfig {
    DdimConfig {
        epochs: cfg.epochs_for(ModelFamily::Ddim),
        batch_size: cfg.ddim.batch_size,
        learning_rate: if cfg.paper_scale {
            cfg.ddim.paper_learning_rate
        } else {
            cfg.ddim.learning_rate
        },
        t_total: cfg.ddim.t_total,
        inference_steps: cfg.ddim.inference_steps,
        augment_deg: cfg.augmentation.rotation_deg,
        seed,
        ..DdimConfig::default()
    }
}

fn classifier_config(cfg: &ExperimentConfig, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        epochs: cfg.epochs_for(ModelFamily::Classifier),
        batch_size: cfg.classifier.batch_size,
        learning_rate: if cfg.paper_scale {
            cfg.classifier.paper_learning_rate
        } else {
            cfg.classifier.learning_rate
        },
        augment_deg: cfg.augmentation.rotation_deg,
        seed,
        ..ClassifierConfig::default()
    }
}

fn save<C: serde::Serialize>(
    paths: &RunPaths,
    stem: &str,
    family: &str,
    model_cfg: &C,
    seed: u64,
    params: &anomap_core::nn::ParamStore,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let meta = CheckpointMeta {
        family: family.to_string(),
        config: serde_json::to_value(model_cfg)?,
        seed,
        param_meta: params.meta(),
        trained: true,
        config_hash: cfg.hash(),
        extra: serde_json::Value::Null,
    };
    io::save_checkpoint(&paths.checkpoints_dir(), stem, &meta, params)
}

/// Loads a trained VQ-VAE checkpoint.
pub fn load_vqvae(paths: &RunPaths, variant: TrainVariant) -> Result<VqVae> {
    let stem = checkpoint_stem(ModelFamily::VqVae, variant);
    let (meta, blob) = io::load_checkpoint(&paths.checkpoints_dir(), &stem)?;
    let model_cfg: VqVaeConfig = serde_json::from_value(meta.config)?;
    let mut model = VqVae::new(model_cfg)?;
    model.params_mut().load_blob(&blob)?;
    Ok(model)
}

pub fn load_rae(paths: &RunPaths, variant: TrainVariant) -> Result<Rae> {
    let stem = checkpoint_stem(ModelFamily::Rae, variant);
    let (meta, blob) = io::load_checkpoint(&paths.checkpoints_dir(), &stem)?;
    let model_cfg: RaeConfig = serde_json::from_value(meta.config)?;
    let mut model = Rae::new(model_cfg)?;
    model.params_mut().load_blob(&blob)?;
    Ok(model)
}

pub fn load_ddim(paths: &RunPaths) -> Result<(NoisePredictor, DiffusionSchedule)> {
    let stem = checkpoint_stem(ModelFamily::Ddim, TrainVariant::Base);
    let (meta, blob) = io::load_checkpoint(&paths.checkpoints_dir(), &stem)?;
    let model_cfg: DdimConfig = serde_json::from_value(meta.config)?;
    let sched = make_schedule(model_cfg.t_total, model_cfg.beta_min, model_cfg.beta_max)?;
    let mut model = NoisePredictor::new(model_cfg)?;
    model.params_mut().load_blob(&blob)?;
    model.trained = meta.trained;
    Ok((model, sched))
}

pub fn load_classifier(paths: &RunPaths) -> Result<NoisyClassifier> {
    let stem = checkpoint_stem(ModelFamily::Classifier, TrainVariant::Base);
    let (meta, blob) = io::load_checkpoint(&paths.checkpoints_dir(), &stem)?;
    let model_cfg: ClassifierConfig = serde_json::from_value(meta.config)?;
    let mut model = NoisyClassifier::new(model_cfg)?;
    model.params_mut().load_blob(&blob)?;
    model.trained = meta.trained;
    Ok(model)
}

/// Returns EU-only training slices plus held-out EU evaluation slices, used
/// by the acceptance suite's fidelity checks.
pub fn eu_split_sets(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<(SliceSet, SliceSet)> {
    let train = training_set(cfg, paths, false)?;
    let eval = load_manifest(paths, Split::Eval)?;
    let refs: Vec<_> = eval
        .subjects
        .iter()
        .filter(|s| s.group == anomap_core::phantom::Group::Eu)
        .collect();
    let eval_eu = crate::data::load_slices(cfg, paths, Split::Eval, &refs)?;
    Ok((train, eval_eu))
}
