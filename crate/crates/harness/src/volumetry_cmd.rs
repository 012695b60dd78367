//! Cohort volumetry: per-subject region volumes from the generated labels
//! and the Table-3-style report.

use crate::config::ExperimentConfig;
use crate::data::load_manifest;
use crate::paths::RunPaths;
use anomap_core::io;
use anomap_core::phantom::{Group, Split};
use anomap_core::volumetry::{cohort_report, region_volumes, VolumetryReport, DEFAULT_ROW_CAP};
use anomap_core::{Error, Result};
use std::collections::BTreeMap;

pub fn run_volumetry(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<VolumetryReport> {
    let eval = load_manifest(paths, Split::Eval)?;
    let mut per_subject: Vec<(Group, BTreeMap<u16, f64>)> = Vec::new();
    for subject in &eval.subjects {
        let dir = paths.subject_dir(Split::Eval, subject.group.name(), &subject.id);
        let (_vol, labels, meta) = io::read_subject_volume(&dir)?;
        let volumes = region_volumes(&labels, meta.spacing_mm)?;
        per_subject.push((subject.group, volumes));
    }
    let report = cohort_report(&per_subject, DEFAULT_ROW_CAP)?;
    write_report(paths, &report, cfg)?;
    Ok(report)
}

fn write_report(paths: &RunPaths, report: &VolumetryReport, cfg: &ExperimentConfig) -> Result<()> {
    let dir = paths.tables_dir();
    std::fs::create_dir_all(&dir)?;

    io::write_json(&dir.join("volumetry.json"), report)?;

    let mut w = csv::Writer::from_path(dir.join("volumetry.csv"))
        .map_err(|e| Error::Other(e.to_string()))?;
    w.write_record([
        "region",
        "eu_mean_mm3",
        "noad_mean_mm3",
        "noad_pct",
        "prodromal_mean_mm3",
        "prodromal_pct",
        "ad_mean_mm3",
        "ad_pct",
    ])
    .map_err(|e| Error::Other(e.to_string()))?;
    for row in &report.rows {
        let pct = row.rel_diff_percent();
        w.write_record([
            row.region.as_str(),
            &format!("{:.1}", row.eu_mean),
            &format!("{:.1}", row.ds_means[0]),
            &pct[0].to_string(),
            &format!("{:.1}", row.ds_means[1]),
            &pct[1].to_string(),
            &format!("{:.1}", row.ds_means[2]),
            &pct[2].to_string(),
        ])
        .map_err(|e| Error::Other(e.to_string()))?;
    }
    w.flush()?;

    // Formatted text table mirroring the volumes-and-percent layout.
    let mut text = String::new();
    text.push_str(&format!("config {} seed {}\n", cfg.hash(), cfg.seed));
    text.push_str(&format!(
        "{:<30} {:>10} {:>10} {:>6} {:>10} {:>6} {:>10} {:>6}\n",
        "Region", "Euploid", "No AD", "(%)", "Prodromal", "(%)", "AD", "(%)"
    ));
    for row in &report.rows {
        let pct = row.rel_diff_percent();
        text.push_str(&format!(
            "{:<30} {:>10.1} {:>10.1} {:>5}% {:>10.1} {:>5}% {:>10.1} {:>5}%\n",
            row.region,
            row.eu_mean,
            row.ds_means[0],
            pct[0],
            row.ds_means[1],
            pct[1],
            row.ds_means[2],
            pct[2],
        ));
    }
    std::fs::write(dir.join("volumetry.txt"), text)?;
    Ok(())
}
