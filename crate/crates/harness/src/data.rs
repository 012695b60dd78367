//! Dataset generation (phantom cohorts + MSP slices) and slice loading.

use crate::config::ExperimentConfig;
use crate::paths::RunPaths;
use anomap_core::dataset::SliceSet;
use anomap_core::imageproc::{adjacent_slices, extract_msp, Image2D, PlaneParams};
use anomap_core::io;
use anomap_core::phantom::{
    make_phantom, sample_cohort, CohortManifest, EffectTable, Group, Split, SubjectEntry,
};
use anomap_core::rng::Rng;
use anomap_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub subject: String,
    pub plane: PlaneParams,
    pub symmetry_score: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Generates both splits: volumes + labels, MSP extraction, slice files,
/// and one manifest per split. Refuses to overwrite existing non-empty
/// output without `force`.
pub fn generate_data(cfg: &ExperimentConfig, paths: &RunPaths, force: bool) -> Result<()> {
    let data_dir = paths.data_dir();
    if data_dir.exists() && data_dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Other(format!(
                "output directory {} is not empty (use --force to overwrite)",
                data_dir.display()
            )));
        }
        std::fs::remove_dir_all(&data_dir)?;
        let slices_root = paths.root.join("slices");
        if slices_root.exists() {
            std::fs::remove_dir_all(&slices_root)?;
        }
    }

    let effects = EffectTable::default();
    let train_seed = Rng::seed_from(cfg.seed).fork(101).next_u64();
    let eval_seed = Rng::seed_from(cfg.seed).fork(102).next_u64();

    // Default protocol: the training split is EU-only (the autoencoders'
    // guard requires it); the diffusion pair additionally trains on the
    // evaluation DS subjects, mirroring how scarce DS data is used.
    let train_counts = [(Group::Eu, cfg.data.train_eu)];
    let mut train = sample_cohort(&train_counts, &effects, train_seed, Split::Train)?;

    let eval_counts = [
        (Group::Eu, cfg.data.eval_eu),
        (Group::DsNoAd, cfg.data.eval_ds_per_group),
        (Group::DsProdromal, cfg.data.eval_ds_per_group),
        (Group::DsAd, cfg.data.eval_ds_per_group),
    ];
    let eval_counts: Vec<(Group, usize)> = eval_counts
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .collect();
    let mut eval = sample_cohort(&eval_counts, &effects, eval_seed, Split::Eval)?;

    let k = (cfg.data.slices_per_subject - 1) / 2;
    write_split(cfg, paths, &mut train, k)?;
    write_split(cfg, paths, &mut eval, k)?;
    Ok(())
}

fn write_split(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    manifest: &mut CohortManifest,
    k: usize,
) -> Result<()> {
    let split = manifest.split;
    let hash = cfg.hash();
    let results: Vec<Result<(usize, String, String)>> = manifest
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, subject)| {
            let (volume, labels) = make_phantom(&subject.spec)?;
            let dir = paths.subject_dir(split, subject.group.name(), &subject.id);
            io::write_subject_volume(&dir, &volume, &labels, &subject.spec)?;

            let (plane, _msp) = extract_msp(&volume)?;
            let score = anomap_core::imageproc::reflect_and_score(&volume, &plane)?;
            let slices = adjacent_slices(&volume, &plane, k)?;
            let slice_dir = paths.slices_dir(split, &subject.id);
            for (s, img) in slices.iter().enumerate() {
                io::write_slice(&slice_dir, &format!("slice_{s}"), img)?;
            }
            io::write_json(
                &slice_dir.join("plane.json"),
                &PlaneRecord {
                    subject: subject.id.clone(),
                    plane,
                    symmetry_score: score,
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                },
            )?;

            let rel_dir = dir.strip_prefix(&paths.root).unwrap_or(&dir);
            Ok((
                i,
                rel_dir.join("volume.raw").to_string_lossy().into_owned(),
                rel_dir.join("labels.raw").to_string_lossy().into_owned(),
            ))
        })
        .collect();

    for r in results {
        let (i, vol_path, label_path) = r?;
        manifest.subjects[i].volume_path = vol_path;
        manifest.subjects[i].labels_path = label_path;
    }

    std::fs::create_dir_all(paths.split_dir(split))?;
    io::write_json(&paths.manifest_path(split), manifest)?;
    Ok(())
}

pub fn load_manifest(paths: &RunPaths, split: Split) -> Result<CohortManifest> {
    io::read_json(&paths.manifest_path(split))
}

/// Loads every slice of the listed subjects into a [`SliceSet`].
pub fn load_slices(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    split: Split,
    subjects: &[&SubjectEntry],
) -> Result<SliceSet> {
    let size = 64;
    let mut set = SliceSet::new();
    for subject in subjects {
        let dir = paths.slices_dir(split, &subject.id);
        for s in 0..cfg.data.slices_per_subject {
            let img = io::read_slice(&dir, &format!("slice_{s}"), size, size)?;
            set.push(subject.id.clone(), subject.group, img);
        }
    }
    Ok(set)
}

/// Training set for a family: EU train slices for the autoencoders; the
/// diffusion pair additionally sees the evaluation DS slices.
pub fn training_set(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    include_eval_ds: bool,
) -> Result<SliceSet> {
    let train = load_manifest(paths, Split::Train)?;
    let refs: Vec<&SubjectEntry> = train.subjects.iter().collect();
    let mut set = load_slices(cfg, paths, Split::Train, &refs)?;
    if include_eval_ds {
        let eval = load_manifest(paths, Split::Eval)?;
        let ds_refs: Vec<&SubjectEntry> =
            eval.subjects.iter().filter(|s| s.group.is_ds()).collect();
        let ds = load_slices(cfg, paths, Split::Eval, &ds_refs)?;
        for i in 0..ds.len() {
            set.push(ds.subject_ids[i].clone(), ds.groups[i], ds.slices[i].clone());
        }
    }
    Ok(set)
}

/// Per-subject center (MSP) slice of the evaluation split, capped by
/// `eval.max_subjects` per group when nonzero.
pub fn eval_center_slices(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<Vec<(SubjectEntry, Image2D)>> {
    let eval = load_manifest(paths, Split::Eval)?;
    let center = (cfg.data.slices_per_subject - 1) / 2;
    let mut out = Vec::new();
    let mut per_group: std::collections::BTreeMap<Group, usize> = Default::default();
    for subject in &eval.subjects {
        let seen = per_group.entry(subject.group).or_insert(0);
        if cfg.eval.max_subjects > 0 && *seen >= cfg.eval.max_subjects {
            continue;
        }
        *seen += 1;
        let dir = paths.slices_dir(Split::Eval, &subject.id);
        let img = io::read_slice(&dir, &format!("slice_{center}"), 64, 64)?;
        out.push((subject.clone(), img));
    }
    Ok(out)
}

/// All slices of the evaluation split grouped by subject.
pub fn eval_all_slices(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
) -> Result<Vec<(SubjectEntry, Vec<Image2D>)>> {
    let eval = load_manifest(paths, Split::Eval)?;
    let mut out = Vec::new();
    let mut per_group: std::collections::BTreeMap<Group, usize> = Default::default();
    for subject in &eval.subjects {
        let seen = per_group.entry(subject.group).or_insert(0);
        if cfg.eval.max_subjects > 0 && *seen >= cfg.eval.max_subjects {
            continue;
        }
        *seen += 1;
        let dir = paths.slices_dir(Split::Eval, &subject.id);
        let mut slices = Vec::new();
        for s in 0..cfg.data.slices_per_subject {
            slices.push(io::read_slice(&dir, &format!("slice_{s}"), 64, 64)?);
        }
        out.push((subject.clone(), slices));
    }
    Ok(out)
}

pub fn load_plane(paths: &RunPaths, split: Split, subject_id: &str) -> Result<PlaneRecord> {
    io::read_json(&paths.slices_dir(split, subject_id).join("plane.json"))
}

/// Recursively hashes a directory tree (paths + bytes), for reproducibility
/// checks.
pub fn hash_tree(root: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut entries = Vec::new();
    collect_files(root, &mut entries)?;
    entries.sort();
    let mut hasher = Sha256::new();
    for path in entries {
        let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        hasher.update(rel.as_bytes());
        hasher.update(std::fs::read(&path)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
