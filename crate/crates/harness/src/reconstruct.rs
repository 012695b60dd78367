//! Reconstruction + anomaly-map emission for the evaluation split.

use crate::config::{ExperimentConfig, ModelFamily, TrainVariant};
use crate::data::eval_all_slices;
use crate::paths::RunPaths;
use crate::train::{load_classifier, load_ddim, load_rae, load_vqvae, template_cdf};
use anomap_core::anomaly::{translate_with_map, vae_anomaly_map, AnomalyMap, PerceptualExtractor};
use anomap_core::ddim::{ClassLabel, GuidanceConfig};
use anomap_core::imageproc::{histogram_match, histogram_match_to_cdf, Image2D};
use anomap_core::io;
use anomap_core::{Error, Result};
use rayon::prelude::*;

pub struct ReconOptions {
    pub family: ModelFamily,
    pub variant: TrainVariant,
    /// Post-hoc histogram matching of the output to the input (HIST M).
    pub hist_m: bool,
}

/// One reconstructed slice with its anomaly map.
pub struct ReconOutput {
    pub subject: String,
    pub group: anomap_core::phantom::Group,
    pub slice_index: usize,
    pub input: Image2D,
    pub reconstruction: Image2D,
    pub map: AnomalyMap,
}

enum AeModel {
    VqVae(anomap_core::vqvae::VqVae),
    Rae(anomap_core::rae::Rae),
}

impl AeModel {
    fn reconstruct(&self, x: &Image2D) -> Result<Image2D> {
        match self {
            AeModel::VqVae(m) => m.reconstruct(x),
            AeModel::Rae(m) => m.reconstruct(x),
        }
    }

    fn extractor(&self) -> &dyn PerceptualExtractor {
        match self {
            AeModel::VqVae(m) => m,
            AeModel::Rae(m) => m,
        }
    }
}

/// Runs reconstruction over every evaluation slice. The autoencoder path
/// optionally matches the output back to the input (HIST M); the anomaly
/// map always applies its own pipeline-internal matching. The diffusion
/// path translates toward the EU class with the configured guidance.
pub fn reconstruct_eval(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    options: &ReconOptions,
) -> Result<Vec<ReconOutput>> {
    let subjects = eval_all_slices(cfg, paths)?;
    if subjects.is_empty() {
        return Err(Error::Other("evaluation split is empty".into()));
    }
    let bins = cfg.eval.histogram_bins;

    match options.family {
        ModelFamily::VqVae | ModelFamily::Rae => {
            let model = match options.family {
                ModelFamily::VqVae => AeModel::VqVae(load_vqvae(paths, options.variant)?),
                _ => AeModel::Rae(load_rae(paths, options.variant)?),
            };
            let template = if options.variant == TrainVariant::HTrained {
                Some(template_cdf(cfg, paths)?)
            } else {
                None
            };
            let jobs: Vec<(usize, usize)> = subjects
                .iter()
                .enumerate()
                .flat_map(|(si, (_, slices))| (0..slices.len()).map(move |k| (si, k)))
                .collect();
            jobs.par_iter()
                .map(|&(si, k)| {
                    let (subject, slices) = &subjects[si];
                    let input = match &template {
                        Some(cdf) => histogram_match_to_cdf(&slices[k], cdf),
                        None => slices[k].clone(),
                    };
                    let raw = model.reconstruct(&input)?;
                    let recon = if options.hist_m {
                        histogram_match(&raw, &input, bins)?
                    } else {
                        raw.clone()
                    };
                    let mut map = vae_anomaly_map(
                        &input,
                        &raw,
                        model.extractor(),
                        cfg.anomaly.w_pix,
                        cfg.anomaly.w_per,
                    )?;
                    map.metadata.subject = format!("{}_s{}", subject.id, k);
                    map.metadata
                        .options
                        .insert("config_hash".into(), cfg.hash());
                    Ok(ReconOutput {
                        subject: subject.id.clone(),
                        group: subject.group,
                        slice_index: k,
                        input,
                        reconstruction: recon,
                        map,
                    })
                })
                .collect()
        }
        ModelFamily::Ddim => {
            let (predictor, sched) = load_ddim(paths)?;
            let guidance = GuidanceConfig {
                noise_level: cfg.guidance.noise_level,
                scale: cfg.guidance.scale,
                target: ClassLabel::Eu,
            };
            let classifier = if guidance.scale > 0.0 {
                Some(load_classifier(paths).map_err(|e| {
                    Error::Other(format!(
                        "guided diffusion reconstruction requires a classifier checkpoint: {e}"
                    ))
                })?)
            } else {
                None
            };
            let jobs: Vec<(usize, usize)> = subjects
                .iter()
                .enumerate()
                .flat_map(|(si, (_, slices))| (0..slices.len()).map(move |k| (si, k)))
                .collect();
            jobs.par_iter()
                .map(|&(si, k)| {
                    let (subject, slices) = &subjects[si];
                    let input = slices[k].clone();
                    let (x0, mut map) = translate_with_map(
                        &input,
                        &guidance,
                        &predictor,
                        classifier.as_ref(),
                        &sched,
                    )?;
                    let recon = if options.hist_m {
                        histogram_match(&x0, &input, bins)?
                    } else {
                        x0
                    };
                    map.metadata.subject = format!("{}_s{}", subject.id, k);
                    map.metadata
                        .options
                        .insert("config_hash".into(), cfg.hash());
                    Ok(ReconOutput {
                        subject: subject.id.clone(),
                        group: subject.group,
                        slice_index: k,
                        input,
                        reconstruction: recon,
                        map,
                    })
                })
                .collect()
        }
        ModelFamily::Classifier => Err(Error::validation(
            "family",
            "the classifier has no reconstruction pipeline",
        )),
    }
}

/// Writes reconstruction and map bundles under `recon/<family>/`.
pub fn write_outputs(
    paths: &RunPaths,
    family: ModelFamily,
    outputs: &[ReconOutput],
) -> Result<()> {
    let dir = paths.recon_dir(family.name());
    for out in outputs {
        let stem = format!("{}_s{}", out.subject, out.slice_index);
        io::write_slice(&dir, &format!("{stem}_recon"), &out.reconstruction)?;
        io::write_map(&dir, &format!("{stem}_map"), &out.map)?;
    }
    Ok(())
}
