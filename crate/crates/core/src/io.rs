//! On-disk formats: little-endian raw grids, 16-bit grayscale PNG plus
//! float sidecars for slices, heat PNGs for maps, and the checkpoint
//! envelope (parameter blob + JSON metadata sidecar).

use crate::anomaly::AnomalyMap;
use crate::error::{Error, Result};
use crate::imageproc::Image2D;
use crate::nn::ParamStore;
use crate::phantom::{LabelMap, PhantomSpec, Region, Volume3D};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Little-endian f32 raw (values converted from the in-memory f64).
pub fn write_f32_raw(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_raw(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Other(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn write_u16_raw(path: &Path, values: &[u16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 2);
    for &v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_u16_raw(path: &Path, expected_len: usize) -> Result<Vec<u16>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_len * 2 {
        return Err(Error::Other(format!(
            "{}: expected {} u16 values, found {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionTableEntry {
    pub id: u16,
    pub name: String,
}

/// Writes `volume.raw` + `volume.json` and `labels.raw` + `labels.json`
/// into `dir` (x-fastest voxel order).
pub fn write_subject_volume(
    dir: &Path,
    volume: &Volume3D,
    labels: &LabelMap,
    spec: &PhantomSpec,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_f32_raw(&dir.join("volume.raw"), &volume.voxels)?;
    write_json(
        &dir.join("volume.json"),
        &VolumeMeta {
            dims: volume.dims,
            spacing_mm: volume.spacing,
            spec: spec.clone(),
        },
    )?;
    write_u16_raw(&dir.join("labels.raw"), &labels.labels)?;
    let table: Vec<RegionTableEntry> = Region::ALL
        .iter()
        .map(|r| RegionTableEntry {
            id: r.id(),
            name: r.name().to_string(),
        })
        .collect();
    write_json(&dir.join("labels.json"), &table)?;
    Ok(())
}

pub fn read_subject_volume(dir: &Path) -> Result<(Volume3D, LabelMap, VolumeMeta)> {
    let meta: VolumeMeta = read_json(&dir.join("volume.json"))?;
    let n = meta.dims[0] * meta.dims[1] * meta.dims[2];
    let voxels = read_f32_raw(&dir.join("volume.raw"), n)?;
    let labels = read_u16_raw(&dir.join("labels.raw"), n)?;
    Ok((
        Volume3D {
            dims: meta.dims,
            spacing: meta.spacing_mm,
            voxels,
        },
        LabelMap {
            dims: meta.dims,
            labels,
        },
        meta,
    ))
}

/// 16-bit grayscale PNG; values clamped to [0,1] and scaled to 0..65535.
pub fn write_png16(path: &Path, image: &Image2D) -> Result<()> {
    let file = fs::File::create(path)?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    let mut data = Vec::with_capacity(image.pixels.len() * 2);
    for &v in &image.pixels {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        data.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    Ok(())
}

/// 8-bit RGB "hot" colormap PNG for anomaly maps.
pub fn write_png_heat(path: &Path, image: &Image2D) -> Result<()> {
    let file = fs::File::create(path)?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    let mut data = Vec::with_capacity(image.pixels.len() * 3);
    for &v in &image.pixels {
        let v = v.clamp(0.0, 1.0);
        let r = (3.0 * v).clamp(0.0, 1.0);
        let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
        let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
        data.push((r * 255.0).round() as u8);
        data.push((g * 255.0).round() as u8);
        data.push((b * 255.0).round() as u8);
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    Ok(())
}

/// 8-bit RGB PNG from a raw interleaved buffer (figure panels).
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Other("rgb buffer length mismatch".into()));
    }
    let file = fs::File::create(path)?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    Ok(())
}

/// 8-bit grayscale PNG (used for figure panels).
pub fn write_png8(path: &Path, image: &Image2D) -> Result<()> {
    let file = fs::File::create(path)?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    let data: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Other(format!("png: {e}")))?;
    Ok(())
}

/// Slice bundle: float sidecar + 16-bit PNG.
pub fn write_slice(dir: &Path, stem: &str, image: &Image2D) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_f32_raw(&dir.join(format!("{stem}.raw")), &image.pixels)?;
    write_png16(&dir.join(format!("{stem}.png")), image)?;
    Ok(())
}

pub fn read_slice(dir: &Path, stem: &str, width: usize, height: usize) -> Result<Image2D> {
    let pixels = read_f32_raw(&dir.join(format!("{stem}.raw")), width * height)?;
    Ok(Image2D { width, height, pixels })
}

/// Anomaly-map bundle: float raw + heat PNG + metadata JSON.
pub fn write_map(dir: &Path, stem: &str, map: &AnomalyMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_f32_raw(&dir.join(format!("{stem}.raw")), &map.scores)?;
    write_png_heat(&dir.join(format!("{stem}.png")), &map.as_image())?;
    write_json(&dir.join(format!("{stem}.json")), &map.metadata)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub family: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub param_meta: Vec<crate::nn::ParamMeta>,
    pub trained: bool,
    /// Hash of the experiment config that produced the checkpoint (set by
    /// the harness; empty for bare module-level saves).
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Writes `<stem>.bin` (f64 LE parameter blob, registration order) and
/// `<stem>.json` (metadata sidecar). Round-trips bit-exactly.
pub fn save_checkpoint(dir: &Path, stem: &str, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.bin")), params.to_blob())?;
    write_json(&dir.join(format!("{stem}.json")), meta)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(CheckpointMeta, Vec<u8>)> {
    let meta: CheckpointMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let blob = fs::read(dir.join(format!("{stem}.bin")))?;
    Ok((meta, blob))
}
