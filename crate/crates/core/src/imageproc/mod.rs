//! Image-processing and metric kernel: MSE/SSIM/NCC, histogram matching and
//! equalization, affine resampling, and the multi-scale mid-sagittal-plane
//! (MSP) extractor. All operations are pure and reentrant.

mod histogram;
mod metrics;
mod msp;
mod resample;

pub use histogram::{
    average_histograms, histogram, histogram_equalize, histogram_match, histogram_match_to_cdf,
    Histogram,
};
pub use metrics::{mse, ncc, ssim, ssim_default, NccScore, SSIM_K1, SSIM_K2, SSIM_WINDOW};
pub use msp::{
    adjacent_slices, extract_msp, reflect_and_score, slice_labels_on_plane, slice_on_plane,
    LABEL_OUTSIDE,
};
pub use resample::{downsample_block_mean, rigid_transform_volume, rotate2d, trilinear_sample};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major 2D scalar image; intensities are expected in [0,1] at pipeline
/// boundaries (validated there, not on every intermediate).
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image2D {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image2D { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::validation("pixels", "length != width*height"));
        }
        Ok(Image2D { width, height, pixels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn validate_unit_range(&self) -> Result<()> {
        if self.pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation("pixels", "must be finite in [0,1]"));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn check_same_dims(context: &'static str, a: &Image2D, b: &Image2D) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimMismatch {
            context,
            left: vec![a.width, a.height],
            right: vec![b.width, b.height],
        });
    }
    Ok(())
}

/// Candidate mid-sagittal plane: pitch/yaw in degrees around the sagittal
/// normal, offset in voxels along the plane normal from the volume center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneParams {
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub offset_vox: f64,
}

impl PlaneParams {
    pub const CENTERED: PlaneParams = PlaneParams {
        pitch_deg: 0.0,
        yaw_deg: 0.0,
        offset_vox: 0.0,
    };

    pub fn new(pitch_deg: f64, yaw_deg: f64, offset_vox: f64) -> Self {
        PlaneParams { pitch_deg, yaw_deg, offset_vox }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.pitch_deg.abs() > 15.0 || !self.pitch_deg.is_finite() {
            return Err(Error::validation("pitch_deg", "|pitch| must be <= 15 degrees"));
        }
        if self.yaw_deg.abs() > 15.0 || !self.yaw_deg.is_finite() {
            return Err(Error::validation("yaw_deg", "|yaw| must be <= 15 degrees"));
        }
        let max_offset = dims[0] as f64 / 4.0;
        if self.offset_vox.abs() > max_offset || !self.offset_vox.is_finite() {
            return Err(Error::validation(
                "offset_vox",
                format!("|offset| must be <= {max_offset} voxels"),
            ));
        }
        Ok(())
    }

    /// Unit normal; (0,0) maps to the x axis (sagittal).
    pub fn normal(&self) -> [f64; 3] {
        let p = self.pitch_deg.to_radians();
        let y = self.yaw_deg.to_radians();
        [p.cos() * y.cos(), p.cos() * y.sin(), p.sin()]
    }

    /// Orthonormal in-plane axes (u along +y, v along +z at identity).
    pub fn plane_axes(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.normal();
        // u = normalize(ez x n), well conditioned because |pitch| <= 15 deg.
        let u = [-n[1], n[0], 0.0];
        let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let u = [u[0] / norm, u[1] / norm, 0.0];
        let v = [
            n[1] * u[2] - n[2] * u[1],
            n[2] * u[0] - n[0] * u[2],
            n[0] * u[1] - n[1] * u[0],
        ];
        (u, v)
    }
}
