//! Figure emission: per-subject panels (input | reconstruction | anomaly map
//! per model) and per-group average-map panels.

use crate::config::ExperimentConfig;
use crate::data::load_manifest;
use crate::paths::RunPaths;
use anomap_core::anomaly::{average_maps, AnomalyMap, MapMetadata};
use anomap_core::imageproc::Image2D;
use anomap_core::io;
use anomap_core::phantom::{Group, Split};
use anomap_core::{Error, Result};
use serde::Serialize;
use std::path::Path;

const MODELS: [&str; 3] = ["vqvae", "rae", "ddim"];
const SEP: usize = 2;

#[derive(Serialize)]
struct FigureMeta {
    subject: String,
    models: Vec<String>,
    config_hash: String,
    seed: u64,
}

/// RGB canvas assembled from grayscale tiles and heat-mapped tiles.
struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            rgb: vec![255u8; width * height * 3],
        }
    }

    fn blit_gray(&mut self, x0: usize, img: &Image2D) {
        for y in 0..img.height {
            for x in 0..img.width {
                let v = (img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                let idx = (y * self.width + x0 + x) * 3;
                self.rgb[idx] = v;
                self.rgb[idx + 1] = v;
                self.rgb[idx + 2] = v;
            }
        }
    }

    fn blit_heat(&mut self, x0: usize, img: &Image2D) {
        for y in 0..img.height {
            for x in 0..img.width {
                let v = img.get(x, y).clamp(0.0, 1.0);
                let idx = (y * self.width + x0 + x) * 3;
                self.rgb[idx] = ((3.0 * v).clamp(0.0, 1.0) * 255.0).round() as u8;
                self.rgb[idx + 1] = ((3.0 * v - 1.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                self.rgb[idx + 2] = ((3.0 * v - 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        io::write_png_rgb(path, self.width, self.height, &self.rgb)
    }
}

fn load_map(paths: &RunPaths, model: &str, stem: &str) -> Result<AnomalyMap> {
    let dir = paths.recon_dir(model);
    let scores = io::read_f32_raw(&dir.join(format!("{stem}_map.raw")), 64 * 64)?;
    let metadata: MapMetadata = io::read_json(&dir.join(format!("{stem}_map.json")))?;
    Ok(AnomalyMap {
        width: 64,
        height: 64,
        scores,
        metadata,
    })
}

/// Emits all figures. Requires at least one model's reconstructions.
pub fn run_report(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<String>> {
    let eval = load_manifest(paths, Split::Eval)?;
    let available: Vec<&str> = MODELS
        .iter()
        .copied()
        .filter(|m| paths.recon_dir(m).exists())
        .collect();
    if available.is_empty() {
        return Err(Error::Other(
            "nothing to report: no reconstructions found (run reconstruct first)".into(),
        ));
    }
    std::fs::create_dir_all(paths.figures_dir())?;
    let center = (cfg.data.slices_per_subject - 1) / 2;
    let mut written = Vec::new();

    // Per-subject panels on the MSP slice.
    for subject in &eval.subjects {
        let stem = format!("{}_s{center}", subject.id);
        let input = match io::read_slice(
            &paths.slices_dir(Split::Eval, &subject.id),
            &format!("slice_{center}"),
            64,
            64,
        ) {
            Ok(img) => img,
            Err(_) => continue,
        };
        let mut tiles: Vec<(bool, Image2D)> = vec![(false, input)];
        let mut models_used = Vec::new();
        for model in &available {
            let recon_path = paths.recon_dir(model).join(format!("{stem}_recon.raw"));
            if !recon_path.exists() {
                continue;
            }
            let recon = io::read_slice(&paths.recon_dir(model), &format!("{stem}_recon"), 64, 64)?;
            let map = load_map(paths, model, &stem)?;
            tiles.push((false, recon));
            tiles.push((true, map.as_image()));
            models_used.push(model.to_string());
        }
        if models_used.is_empty() {
            continue;
        }
        let width = tiles.len() * 64 + (tiles.len() - 1) * SEP;
        let mut canvas = Canvas::new(width, 64);
        for (i, (heat, img)) in tiles.iter().enumerate() {
            let x0 = i * (64 + SEP);
            if *heat {
                canvas.blit_heat(x0, img);
            } else {
                canvas.blit_gray(x0, img);
            }
        }
        let name = format!("subject_{}.png", subject.id);
        canvas.write(&paths.figures_dir().join(&name))?;
        io::write_json(
            &paths.figures_dir().join(format!("subject_{}.json", subject.id)),
            &FigureMeta {
                subject: subject.id.clone(),
                models: models_used,
                config_hash: cfg.hash(),
                seed: cfg.seed,
            },
        )?;
        written.push(name);
    }

    // Per-group average maps per model (all slices of all group subjects).
    for group in [Group::DsNoAd, Group::DsProdromal, Group::DsAd, Group::Eu] {
        let subjects: Vec<_> = eval.subjects.iter().filter(|s| s.group == group).collect();
        if subjects.is_empty() {
            continue;
        }
        for model in &available {
            let mut maps = Vec::new();
            for subject in &subjects {
                for k in 0..cfg.data.slices_per_subject {
                    let stem = format!("{}_s{k}", subject.id);
                    if paths.recon_dir(model).join(format!("{stem}_map.raw")).exists() {
                        maps.push(load_map(paths, model, &stem)?);
                    }
                }
            }
            if maps.is_empty() {
                continue;
            }
            let avg = average_maps(&maps)?;
            let name = format!("group_{}_{}_avg", group.name(), model);
            io::write_map(&paths.figures_dir(), &name, &avg)?;
            written.push(format!("{name}.png"));
        }
    }

    if written.is_empty() {
        return Err(Error::Other("nothing to report: no matching outputs".into()));
    }
    Ok(written)
}
