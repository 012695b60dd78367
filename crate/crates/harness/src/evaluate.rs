//! Reconstruction-fidelity tables (SSIM/MSE) and the four-variant histogram
//! ablation.

use crate::config::{AblationVariant, ExperimentConfig, ModelFamily, TrainVariant};
use crate::data::load_manifest;
use crate::paths::RunPaths;
use crate::train::{
    checkpoint_stem, load_classifier, load_ddim, load_rae, load_vqvae, template_cdf,
};
use anomap_core::ddim::{ClassLabel, GuidanceConfig};
use anomap_core::imageproc::{histogram_match, histogram_match_to_cdf, mse, ssim_default, Image2D};
use anomap_core::io;
use anomap_core::phantom::{Group, Split};
use anomap_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    pub ssim_mean: f64,
    pub ssim_sd: f64,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub n: usize,
}

/// Per-slice metric pair, kept for paired comparisons.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub subject: String,
    pub slice_index: usize,
    pub ssim: f64,
    pub mse: f64,
}

fn aggregate(dataset: &str, method: &str, slices: &[SliceMetrics]) -> Result<MetricsRow> {
    if slices.is_empty() {
        return Err(Error::Other("empty evaluation set".into()));
    }
    let n = slices.len() as f64;
    let ssim_mean = slices.iter().map(|s| s.ssim).sum::<f64>() / n;
    let mse_mean = slices.iter().map(|s| s.mse).sum::<f64>() / n;
    let ssim_sd =
        (slices.iter().map(|s| (s.ssim - ssim_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mse_sd = (slices.iter().map(|s| (s.mse - mse_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MetricsRow {
        dataset: dataset.to_string(),
        method: method.to_string(),
        ssim_mean,
        ssim_sd,
        mse_mean,
        mse_sd,
        n: slices.len(),
    })
}

/// EU evaluation slices (fidelity is measured on the held-out EU split).
fn eu_eval_slices(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<Vec<(String, usize, Image2D)>> {
    let eval = load_manifest(paths, Split::Eval)?;
    let mut out = Vec::new();
    let mut seen = 0usize;
    for subject in eval.subjects.iter().filter(|s| s.group == Group::Eu) {
        if cfg.eval.max_subjects > 0 && seen >= cfg.eval.max_subjects {
            break;
        }
        seen += 1;
        let dir = paths.slices_dir(Split::Eval, &subject.id);
        for k in 0..cfg.data.slices_per_subject {
            let img = io::read_slice(&dir, &format!("slice_{k}"), 64, 64)?;
            out.push((subject.id.clone(), k, img));
        }
    }
    if out.is_empty() {
        return Err(Error::Other("no EU subjects in the evaluation split".into()));
    }
    Ok(out)
}

/// Per-slice fidelity of one family/variant pipeline on the EU eval split.
/// `template` preprocesses inputs (H-trained variants); `hist_m` matches the
/// output back to the input before scoring.
pub fn family_slice_metrics(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    family: ModelFamily,
    variant: TrainVariant,
    hist_m: bool,
    inputs: &[(String, usize, Image2D)],
) -> Result<Vec<SliceMetrics>> {
    let bins = cfg.eval.histogram_bins;
    let template = if variant == TrainVariant::HTrained {
        Some(template_cdf(cfg, paths)?)
    } else {
        None
    };

    let score = |input_used: &Image2D, recon: &Image2D| -> Result<(f64, f64)> {
        let final_recon = if hist_m {
            histogram_match(recon, input_used, bins)?
        } else {
            recon.clone()
        };
        Ok((ssim_default(input_used, &final_recon)?, mse(input_used, &final_recon)?))
    };

    match family {
        ModelFamily::VqVae => {
            let model = load_vqvae(paths, variant)?;
            inputs
                .par_iter()
                .map(|(subject, k, img)| {
                    let input_used = match &template {
                        Some(cdf) => histogram_match_to_cdf(img, cdf),
                        None => img.clone(),
                    };
                    let recon = model.reconstruct(&input_used)?;
                    let (ssim, mse) = score(&input_used, &recon)?;
                    Ok(SliceMetrics {
                        subject: subject.clone(),
                        slice_index: *k,
                        ssim,
                        mse,
                    })
                })
                .collect()
        }
        ModelFamily::Rae => {
            let model = load_rae(paths, variant)?;
            inputs
                .par_iter()
                .map(|(subject, k, img)| {
                    let input_used = match &template {
                        Some(cdf) => histogram_match_to_cdf(img, cdf),
                        None => img.clone(),
                    };
                    let recon = model.reconstruct(&input_used)?;
                    let (ssim, mse) = score(&input_used, &recon)?;
                    Ok(SliceMetrics {
                        subject: subject.clone(),
                        slice_index: *k,
                        ssim,
                        mse,
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
                Some(load_classifier(paths)?)
            } else {
                None
            };
            inputs
                .par_iter()
                .map(|(subject, k, img)| {
                    let x_l = anomap_core::ddim::ddim_encode(
                        img,
                        guidance.noise_level,
                        &predictor,
                        &sched,
                    )?;
                    let x0 = anomap_core::ddim::ddim_decode_guided(
                        &x_l,
                        &guidance,
                        &predictor,
                        classifier.as_ref(),
                        &sched,
                    )?;
                    let (ssim, mse) = score(img, &x0)?;
                    Ok(SliceMetrics {
                        subject: subject.clone(),
                        slice_index: *k,
                        ssim,
                        mse,
                    })
                })
                .collect()
        }
        ModelFamily::Classifier => Err(Error::validation(
            "family",
            "the classifier has no reconstruction fidelity",
        )),
    }
}

/// Table-1-style evaluation over every available base checkpoint, with and
/// without HIST M.
pub fn evaluate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<MetricsRow>> {
    let inputs = eu_eval_slices(cfg, paths)?;
    let dataset = cfg.data.dataset_tag.clone();
    let mut rows = Vec::new();

    let candidates = [
        (ModelFamily::VqVae, "VQ-VAE"),
        (ModelFamily::Rae, "RAE"),
        (ModelFamily::Ddim, "DM"),
    ];
    for (family, label) in candidates {
        let stem = checkpoint_stem(family, TrainVariant::Base);
        if !paths.checkpoints_dir().join(format!("{stem}.json")).exists() {
            continue;
        }
        for hist_m in [false, true] {
            let slices =
                family_slice_metrics(cfg, paths, family, TrainVariant::Base, hist_m, &inputs)?;
            let method = if hist_m { format!("{label} + HM") } else { label.to_string() };
            rows.push(aggregate(&dataset, &method, &slices)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Other(
            "no checkpoints found; train at least one model first".into(),
        ));
    }
    write_metric_tables(&paths.tables_dir(), "metrics", &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub family: String,
    pub rows: Vec<MetricsRow>,
    /// Directional finding: HIST M improves SSIM and MSE over BASE.
    pub hist_m_improves_ssim: bool,
    pub hist_m_improves_mse: bool,
}

/// Table-2-style four-variant ablation for one autoencoder family.
pub fn ablation(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    family: ModelFamily,
) -> Result<AblationReport> {
    if !matches!(family, ModelFamily::VqVae | ModelFamily::Rae) {
        return Err(Error::validation(
            "family",
            "the histogram ablation applies to vqvae and rae",
        ));
    }
    for variant in [TrainVariant::Base, TrainVariant::HTrained] {
        let stem = checkpoint_stem(family, variant);
        if !paths.checkpoints_dir().join(format!("{stem}.json")).exists() {
            return Err(Error::Other(format!(
                "ablation requires the {} checkpoint ({stem}); train it first",
                variant.name()
            )));
        }
    }

    let inputs = eu_eval_slices(cfg, paths)?;
    let dataset = cfg.data.dataset_tag.clone();
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let train_variant = if variant.trained_on_template() {
            TrainVariant::HTrained
        } else {
            TrainVariant::Base
        };
        let slices = family_slice_metrics(
            cfg,
            paths,
            family,
            train_variant,
            variant.output_matched(),
            &inputs,
        )?;
        rows.push(aggregate(&dataset, &variant.label(family.name()), &slices)?);
    }

    let hist_m_improves_ssim = rows[2].ssim_mean >= rows[0].ssim_mean;
    let hist_m_improves_mse = rows[2].mse_mean <= rows[0].mse_mean;
    if !hist_m_improves_ssim || !hist_m_improves_mse {
        eprintln!(
            "warning: HIST M did not improve {} fidelity on this run",
            family.name()
        );
    }
    let report = AblationReport {
        family: family.name().to_string(),
        rows: rows.clone(),
        hist_m_improves_ssim,
        hist_m_improves_mse,
    };
    write_metric_tables(
        &paths.tables_dir(),
        &format!("ablation_{}", family.name()),
        &rows,
    )?;
    io::write_json(
        &paths.tables_dir().join(format!("ablation_{}_summary.json", family.name())),
        &report,
    )?;
    Ok(report)
}

/// Emits `<stem>.csv`, `<stem>.json`, and a formatted `<stem>.txt`.
pub fn write_metric_tables(dir: &Path, stem: &str, rows: &[MetricsRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))
        .map_err(|e| Error::Other(e.to_string()))?;
    w.write_record(["dataset", "method", "ssim_mean", "ssim_sd", "mse_mean", "mse_sd", "n"])
        .map_err(|e| Error::Other(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.dataset.as_str(),
            r.method.as_str(),
            &format!("{:.6}", r.ssim_mean),
            &format!("{:.6}", r.ssim_sd),
            &format!("{:.8}", r.mse_mean),
            &format!("{:.8}", r.mse_sd),
            &r.n.to_string(),
        ])
        .map_err(|e| Error::Other(e.to_string()))?;
    }
    w.flush()?;

    io::write_json(&dir.join(format!("{stem}.json")), &rows)?;

    let mut text = String::new();
    text.push_str(&format!(
        "{:<22} {:<10} {:>8} {:>8} {:>10} {:>10} {:>4}\n",
        "method", "dataset", "SSIM", "sd", "MSE", "sd", "n"
    ));
    for r in rows {
        text.push_str(&format!(
            "{:<22} {:<10} {:>8.3} {:>8.3} {:>10.5} {:>10.5} {:>4}\n",
            r.method, r.dataset, r.ssim_mean, r.ssim_sd, r.mse_mean, r.mse_sd, r.n
        ));
    }
    std::fs::write(dir.join(format!("{stem}.txt")), text)?;
    Ok(())
}
