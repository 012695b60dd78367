//! Reconstruction-fidelity metrics: MSE, windowed SSIM, and Pearson NCC.

use super::{check_same_dims, Image2D};
use crate::error::{Error, Result};
use crate::phantom::Volume3D;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean squared pixel difference.
pub fn mse(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_same_dims("mse", a, b)?;
    let n = a.pixels.len() as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Mean local SSIM over all fully-interior `window` x `window` positions,
/// uniform window, dynamic range 1.0.
pub fn ssim(a: &Image2D, b: &Image2D, window: usize, k1: f64, k2: f64) -> Result<f64> {
    check_same_dims("ssim", a, b)?;
    if window < 1 || window > a.width || window > a.height {
        return Err(Error::validation(
            "window",
            format!("window {window} does not fit {}x{}", a.width, a.height),
        ));
    }
    let c1 = (k1 * 1.0) * (k1 * 1.0);
    let c2 = (k2 * 1.0) * (k2 * 1.0);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(a.height - window) {
        for x0 in 0..=(a.width - window) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..window {
                let row = (y0 + dy) * a.width + x0;
                for dx in 0..window {
                    let pa = a.pixels[row + dx];
                    let pb = b.pixels[row + dx];
                    sa += pa;
                    sb += pb;
                    saa += pa * pa;
                    sbb += pb * pb;
                    sab += pa * pb;
                }
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let local = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += local;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the project defaults (7x7 uniform window, k1=0.01, k2=0.03).
pub fn ssim_default(a: &Image2D, b: &Image2D) -> Result<f64> {
    ssim(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

/// Pearson correlation of two voxel fields. A constant input has no defined
/// correlation; the score is 0 with `degenerate` set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NccScore {
    pub value: f64,
    pub degenerate: bool,
}

pub fn ncc(a: &Volume3D, b: &Volume3D) -> Result<NccScore> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch {
            context: "ncc",
            left: a.dims.to_vec(),
            right: b.dims.to_vec(),
        });
    }
    Ok(pearson(&a.voxels, &b.voxels))
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> NccScore {
    let n = a.len() as f64;
    let mean_a: f64 = a.iter().sum::<f64>() / n;
    let mean_b: f64 = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return NccScore { value: 0.0, degenerate: true };
    }
    NccScore {
        value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image2D {
        let mut rng = Rng::seed_from(seed);
        Image2D::from_fn(w, h, |_, _| rng.uniform01())
    }

    #[test]
    fn mse_identity_and_extremes() {
        let x = random_image(8, 8, 1);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let zeros = Image2D::zeros(8, 8);
        let ones = zeros.map(|_| 1.0);
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
    }

    /// Straight double-loop oracle.
    #[test]
    fn mse_matches_loop_oracle() {
        for seed in 0..20 {
            let a = random_image(8, 8, seed);
            let b = random_image(8, 8, seed + 1000);
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let d = a.get(x, y) - b.get(x, y);
                    acc += d * d;
                }
            }
            let oracle = acc / 64.0;
            assert!((mse(&a, &b).unwrap() - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn mse_dim_mismatch() {
        let a = Image2D::zeros(8, 8);
        let b = Image2D::zeros(8, 9);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = random_image(16, 16, 3);
        let s = ssim_default(&x, &x).unwrap();
        assert!((s - 1.0).abs() <= 1e-9, "ssim {s}");
    }

    /// Closed form for constant images a=0, b=1:
    /// (2*0*1 + C1)/(0 + 1 + C1) with C1 = 1e-4 => ~9.999e-5.
    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Image2D::zeros(16, 16);
        let b = a.map(|_| 1.0);
        let s = ssim_default(&a, &b).unwrap();
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((s - expected).abs() <= 1e-12, "ssim {s} vs {expected}");
    }

    #[test]
    fn ssim_symmetry() {
        for seed in 0..10 {
            let a = random_image(12, 12, seed);
            let b = random_image(12, 12, seed + 77);
            let sab = ssim_default(&a, &b).unwrap();
            let sba = ssim_default(&b, &a).unwrap();
            assert!((sab - sba).abs() <= 1e-12);
        }
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Image2D::zeros(4, 4);
        assert!(ssim(&a, &a, 7, SSIM_K1, SSIM_K2).is_err());
    }

    fn random_volume(seed: u64) -> Volume3D {
        let mut rng = Rng::seed_from(seed);
        let mut v = Volume3D::zeros([16, 16, 16], 1.0);
        for vox in v.voxels.iter_mut() {
            *vox = rng.uniform01();
        }
        v
    }

    #[test]
    fn ncc_identity_and_antisymmetry() {
        let v = random_volume(5);
        let s = ncc(&v, &v).unwrap();
        assert!(!s.degenerate);
        assert!((s.value - 1.0).abs() <= 1e-12);
        let mut w = v.clone();
        for vox in w.voxels.iter_mut() {
            *vox = 1.0 - *vox;
        }
        let s = ncc(&v, &w).unwrap();
        assert!((s.value + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ncc_constant_is_degenerate_zero() {
        let v = random_volume(6);
        let c = Volume3D::zeros([16, 16, 16], 1.0);
        let s = ncc(&v, &c).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.value, 0.0);
    }

    /// Loop oracle at 1e-10.
    #[test]
    fn ncc_matches_loop_oracle() {
        for seed in 0..10 {
            let a = random_volume(seed);
            let b = random_volume(seed + 31);
            let n = a.voxels.len() as f64;
            let ma = a.voxels.iter().sum::<f64>() / n;
            let mb = b.voxels.iter().sum::<f64>() / n;
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for i in 0..a.voxels.len() {
                saa += (a.voxels[i] - ma).powi(2);
                sbb += (b.voxels[i] - mb).powi(2);
                sab += (a.voxels[i] - ma) * (b.voxels[i] - mb);
            }
            let oracle = sab / (saa.sqrt() * sbb.sqrt());
            let got = ncc(&a, &b).unwrap().value;
            assert!((got - oracle).abs() <= 1e-10);
        }
    }
}
