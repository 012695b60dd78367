//! Mid-sagittal-plane extraction by maximizing reflected-volume
//! cross-correlation: a coarse grid at 1/4 scale followed by step-halving
//! refinement on the full volume.

use super::metrics::pearson;
use super::resample::{downsample_block_mean, trilinear_sample};
use super::{Image2D, PlaneParams};
use crate::error::{Error, Result};
use crate::phantom::{LabelMap, Volume3D};
use rayon::prelude::*;

/// Coarse grid half-range in degrees/voxels (step 2), refinement floor.
const COARSE_RANGE: f64 = 8.0;
const COARSE_STEP: f64 = 2.0;
const REFINE_FLOOR: f64 = 0.25;

/// Symmetry score of `v` about plane `p`: Pearson correlation between the
/// volume and its reflection, over voxels whose reflection samples inside
/// the volume (so the score is exactly invariant to intensity gain/bias).
pub fn reflect_and_score(v: &Volume3D, p: &PlaneParams) -> Result<f64> {
    p.validate(v.dims)?;
    Ok(reflect_score_unchecked(v, p))
}

fn reflect_score_unchecked(v: &Volume3D, p: &PlaneParams) -> f64 {
    let n = p.normal();
    let c = [
        (v.dims[0] as f64 - 1.0) / 2.0,
        (v.dims[1] as f64 - 1.0) / 2.0,
        (v.dims[2] as f64 - 1.0) / 2.0,
    ];
    let [nx, ny, nz] = v.dims;
    let mut orig = Vec::with_capacity(v.voxels.len());
    let mut refl = Vec::with_capacity(v.voxels.len());
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = (x as f64 - c[0]) * n[0] + (y as f64 - c[1]) * n[1]
                    + (z as f64 - c[2]) * n[2]
                    - p.offset_vox;
                let rx = x as f64 - 2.0 * d * n[0];
                let ry = y as f64 - 2.0 * d * n[1];
                let rz = z as f64 - 2.0 * d * n[2];
                if rx >= 0.0
                    && ry >= 0.0
                    && rz >= 0.0
                    && rx <= (nx - 1) as f64
                    && ry <= (ny - 1) as f64
                    && rz <= (nz - 1) as f64
                {
                    orig.push(v.voxels[idx]);
                    refl.push(trilinear_sample(v, [rx, ry, rz]));
                }
                idx += 1;
            }
        }
    }
    if orig.is_empty() {
        return 0.0;
    }
    let score = pearson(&orig, &refl);
    if score.degenerate {
        0.0
    } else {
        score.value
    }
}

fn is_constant(v: &Volume3D) -> bool {
    let first = v.voxels[0];
    v.voxels.iter().all(|&x| x == first)
}

/// Two-stage MSP search. Returns the best plane and the resampled MSP slice
/// (width = y extent, height = z extent of the volume).
pub fn extract_msp(v: &Volume3D) -> Result<(PlaneParams, Image2D)> {
    if v.dims.iter().any(|&d| d < 32) {
        return Err(Error::validation("dims", "extract_msp needs >= 32 voxels per axis"));
    }
    if is_constant(v) {
        return Err(Error::Degenerate("constant volume has no symmetry plane".into()));
    }

    // Stage 1: coarse grid on the volume downsampled by 4. Offsets are in
    // full-resolution voxels throughout; they shrink by 4 at coarse scale.
    let coarse_vol = downsample_block_mean(v, 4);
    let steps = (2.0 * COARSE_RANGE / COARSE_STEP) as usize + 1;
    let mut grid = Vec::with_capacity(steps * steps * steps);
    for pi in 0..steps {
        for yi in 0..steps {
            for oi in 0..steps {
                grid.push(PlaneParams::new(
                    -COARSE_RANGE + pi as f64 * COARSE_STEP,
                    -COARSE_RANGE + yi as f64 * COARSE_STEP,
                    -COARSE_RANGE + oi as f64 * COARSE_STEP,
                ));
            }
        }
    }
    let scored: Vec<(f64, PlaneParams)> = grid
        .par_iter()
        .map(|p| {
            let coarse = PlaneParams::new(p.pitch_deg, p.yaw_deg, p.offset_vox / 4.0);
            (reflect_score_unchecked(&coarse_vol, &coarse), *p)
        })
        .collect();
    // Deterministic ranking: by score descending, ties by lowest
    // lexicographic (pitch, yaw, offset) which is the grid emission order.
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..scored.len()).collect();
        idx.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap().then(a.cmp(&b)));
        idx
    };

    // Stage 2: step-halving pattern search at full resolution from the top
    // coarse candidates.
    let starts: Vec<PlaneParams> = order.iter().take(3).map(|&i| scored[i].1).collect();
    let refined: Vec<(f64, PlaneParams)> = starts
        .par_iter()
        .map(|s| refine_full_res(v, *s))
        .collect();
    let mut best = refined[0];
    for cand in refined.into_iter().skip(1) {
        if cand.0 > best.0 {
            best = cand;
        }
    }

    let slice = slice_on_plane(v, &best.1);
    Ok((best.1, slice))
}

fn refine_full_res(v: &Volume3D, start: PlaneParams) -> (f64, PlaneParams) {
    let max_offset = v.dims[0] as f64 / 4.0;
    let clamp = |p: PlaneParams| PlaneParams {
        pitch_deg: p.pitch_deg.clamp(-15.0, 15.0),
        yaw_deg: p.yaw_deg.clamp(-15.0, 15.0),
        offset_vox: p.offset_vox.clamp(-max_offset, max_offset),
    };
    let mut current = clamp(start);
    let mut current_score = reflect_score_unchecked(v, &current);
    let mut step = COARSE_STEP;
    while step >= REFINE_FLOOR {
        let neighbors = [
            PlaneParams::new(current.pitch_deg - step, current.yaw_deg, current.offset_vox),
            PlaneParams::new(current.pitch_deg + step, current.yaw_deg, current.offset_vox),
            PlaneParams::new(current.pitch_deg, current.yaw_deg - step, current.offset_vox),
            PlaneParams::new(current.pitch_deg, current.yaw_deg + step, current.offset_vox),
            PlaneParams::new(current.pitch_deg, current.yaw_deg, current.offset_vox - step),
            PlaneParams::new(current.pitch_deg, current.yaw_deg, current.offset_vox + step),
        ];
        let scores: Vec<(f64, PlaneParams)> = neighbors
            .par_iter()
            .map(|p| {
                let p = clamp(*p);
                (reflect_score_unchecked(v, &p), p)
            })
            .collect();
        let mut improved = false;
        for (s, p) in scores {
            if s > current_score {
                current_score = s;
                current = p;
                improved = true;
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    (current_score, current)
}

/// Resamples the image content of plane `p` (trilinear, 0 outside).
pub fn slice_on_plane(v: &Volume3D, p: &PlaneParams) -> Image2D {
    let n = p.normal();
    let (u, w) = p.plane_axes();
    let c = [
        (v.dims[0] as f64 - 1.0) / 2.0,
        (v.dims[1] as f64 - 1.0) / 2.0,
        (v.dims[2] as f64 - 1.0) / 2.0,
    ];
    let width = v.dims[1];
    let height = v.dims[2];
    let base = [
        c[0] + p.offset_vox * n[0],
        c[1] + p.offset_vox * n[1],
        c[2] + p.offset_vox * n[2],
    ];
    Image2D::from_fn(width, height, |i, j| {
        let a = i as f64 - (width as f64 - 1.0) / 2.0;
        let b = j as f64 - (height as f64 - 1.0) / 2.0;
        let pt = [
            base[0] + a * u[0] + b * w[0],
            base[1] + a * u[1] + b * w[1],
            base[2] + a * u[2] + b * w[2],
        ];
        trilinear_sample(v, pt)
    })
}

/// Label id of the slice pixel sampled nearest-neighbor on the plane;
/// `u16::MAX` marks samples outside the volume.
pub const LABEL_OUTSIDE: u16 = u16::MAX;

pub fn slice_labels_on_plane(labels: &LabelMap, p: &PlaneParams) -> Vec<u16> {
    let n = p.normal();
    let (u, w) = p.plane_axes();
    let c = [
        (labels.dims[0] as f64 - 1.0) / 2.0,
        (labels.dims[1] as f64 - 1.0) / 2.0,
        (labels.dims[2] as f64 - 1.0) / 2.0,
    ];
    let width = labels.dims[1];
    let height = labels.dims[2];
    let base = [
        c[0] + p.offset_vox * n[0],
        c[1] + p.offset_vox * n[1],
        c[2] + p.offset_vox * n[2],
    ];
    let mut out = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let a = i as f64 - (width as f64 - 1.0) / 2.0;
            let b = j as f64 - (height as f64 - 1.0) / 2.0;
            let pt = [
                base[0] + a * u[0] + b * w[0],
                base[1] + a * u[1] + b * w[1],
                base[2] + a * u[2] + b * w[2],
            ];
            let xi = pt[0].round() as isize;
            let yi = pt[1].round() as isize;
            let zi = pt[2].round() as isize;
            if xi < 0
                || yi < 0
                || zi < 0
                || xi >= labels.dims[0] as isize
                || yi >= labels.dims[1] as isize
                || zi >= labels.dims[2] as isize
            {
                out.push(LABEL_OUTSIDE);
            } else {
                out.push(labels.get(xi as usize, yi as usize, zi as usize));
            }
        }
    }
    out
}

/// 2k+1 slices at integer-voxel offsets along the plane normal; the center
/// slice equals `extract_msp`'s slice for the same plane.
pub fn adjacent_slices(v: &Volume3D, p: &PlaneParams, k: usize) -> Result<Vec<Image2D>> {
    let mut out = Vec::with_capacity(2 * k + 1);
    for d in -(k as isize)..=(k as isize) {
        let shifted = PlaneParams::new(p.pitch_deg, p.yaw_deg, p.offset_vox + d as f64);
        shifted.validate(v.dims)?;
        out.push(slice_on_plane(v, &shifted));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};

    fn phantom() -> Volume3D {
        make_phantom(&PhantomSpec::baseline(17)).unwrap().0
    }

    #[test]
    fn symmetric_phantom_scores_high_at_center() {
        let v = phantom();
        let s = reflect_and_score(&v, &PlaneParams::CENTERED).unwrap();
        assert!(s >= 0.98, "center symmetry score {s}");
    }

    #[test]
    fn tilted_plane_scores_lower() {
        let v = phantom();
        let s0 = reflect_and_score(&v, &PlaneParams::CENTERED).unwrap();
        let s10 = reflect_and_score(&v, &PlaneParams::new(10.0, 0.0, 0.0)).unwrap();
        assert!(s10 < s0, "{s10} !< {s0}");
    }

    #[test]
    fn score_invariant_to_gain_and_bias() {
        let v = phantom();
        let mut w = v.clone();
        for vox in w.voxels.iter_mut() {
            *vox = 0.4 * *vox + 0.1;
        }
        for p in [PlaneParams::CENTERED, PlaneParams::new(4.0, -2.0, 3.0)] {
            let a = reflect_and_score(&v, &p).unwrap();
            let b = reflect_and_score(&w, &p).unwrap();
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_plane_rejected() {
        let v = phantom();
        assert!(reflect_and_score(&v, &PlaneParams::new(20.0, 0.0, 0.0)).is_err());
        assert!(reflect_and_score(&v, &PlaneParams::new(0.0, 0.0, 40.0)).is_err());
    }

    #[test]
    fn msp_on_symmetric_phantom_is_centered() {
        let v = phantom();
        let (p, _slice) = extract_msp(&v).unwrap();
        assert!(p.pitch_deg.abs() <= 1.0, "pitch {}", p.pitch_deg);
        assert!(p.yaw_deg.abs() <= 1.0, "yaw {}", p.yaw_deg);
        assert!(p.offset_vox.abs() <= 1.0, "offset {}", p.offset_vox);
    }

    #[test]
    fn msp_constant_volume_rejected() {
        let v = Volume3D::zeros([32, 32, 32], 1.0);
        assert!(matches!(extract_msp(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn msp_invariant_to_gain_and_bias() {
        let v = phantom();
        let mut w = v.clone();
        for vox in w.voxels.iter_mut() {
            *vox = 0.5 * *vox + 0.2;
        }
        let (pa, _) = extract_msp(&v).unwrap();
        let (pb, _) = extract_msp(&w).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn adjacent_slices_center_matches_msp() {
        let v = phantom();
        let (p, slice) = extract_msp(&v).unwrap();
        let k0 = adjacent_slices(&v, &p, 0).unwrap();
        assert_eq!(k0.len(), 1);
        assert_eq!(k0[0].pixels, slice.pixels);
        let k2 = adjacent_slices(&v, &p, 2).unwrap();
        assert_eq!(k2.len(), 5);
        assert_eq!(k2[2].pixels, slice.pixels);
        // Off-center slices differ on non-constant volumes.
        assert_ne!(k2[1].pixels, k2[2].pixels);
        assert_ne!(k2[3].pixels, k2[2].pixels);
    }

    #[test]
    fn adjacent_slices_out_of_volume_rejected() {
        let v = phantom();
        let p = PlaneParams::new(0.0, 0.0, 15.0);
        assert!(adjacent_slices(&v, &p, 2).is_err());
    }
}
