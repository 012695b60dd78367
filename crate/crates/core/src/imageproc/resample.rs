//! Bilinear/trilinear resampling helpers. Out-of-bounds samples are 0.

use super::Image2D;
use crate::phantom::Volume3D;

/// Trilinear interpolation at a fractional voxel coordinate; 0 outside.
#[inline]
pub fn trilinear_sample(v: &Volume3D, p: [f64; 3]) -> f64 {
    let [nx, ny, nz] = v.dims;
    let x0f = p[0].floor();
    let y0f = p[1].floor();
    let z0f = p[2].floor();
    let fx = p[0] - x0f;
    let fy = p[1] - y0f;
    let fz = p[2] - z0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let z0 = z0f as isize;

    #[inline]
    fn at(v: &Volume3D, nx: usize, ny: usize, nz: usize, x: isize, y: isize, z: isize) -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            0.0
        } else {
            v.voxels[x as usize + nx * (y as usize + ny * z as usize)]
        }
    }

    let c000 = at(v, nx, ny, nz, x0, y0, z0);
    let c100 = at(v, nx, ny, nz, x0 + 1, y0, z0);
    let c010 = at(v, nx, ny, nz, x0, y0 + 1, z0);
    let c110 = at(v, nx, ny, nz, x0 + 1, y0 + 1, z0);
    let c001 = at(v, nx, ny, nz, x0, y0, z0 + 1);
    let c101 = at(v, nx, ny, nz, x0 + 1, y0, z0 + 1);
    let c011 = at(v, nx, ny, nz, x0, y0 + 1, z0 + 1);
    let c111 = at(v, nx, ny, nz, x0 + 1, y0 + 1, z0 + 1);

    let c00 = c000 + (c100 - c000) * fx;
    let c10 = c010 + (c110 - c010) * fx;
    let c01 = c001 + (c101 - c001) * fx;
    let c11 = c011 + (c111 - c011) * fx;
    let c0 = c00 + (c10 - c00) * fy;
    let c1 = c01 + (c11 - c01) * fy;
    c0 + (c1 - c0) * fz
}

/// Bilinear rotation about the image center; out-of-bounds filled with 0.
pub fn rotate2d(x: &Image2D, angle_deg: f64) -> Image2D {
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (x.width as f64 - 1.0) / 2.0;
    let cy = (x.height as f64 - 1.0) / 2.0;
    Image2D::from_fn(x.width, x.height, |xi, yi| {
        let dx = xi as f64 - cx;
        let dy = yi as f64 - cy;
        // Inverse rotation of the output coordinate.
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        bilinear_sample(x, sx, sy)
    })
}

#[inline]
fn bilinear_sample(img: &Image2D, x: f64, y: f64) -> f64 {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let at = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= img.width as isize || yi >= img.height as isize {
            0.0
        } else {
            img.pixels[yi as usize * img.width + xi as usize]
        }
    };
    let c00 = at(x0, y0);
    let c10 = at(x0 + 1, y0);
    let c01 = at(x0, y0 + 1);
    let c11 = at(x0 + 1, y0 + 1);
    let c0 = c00 + (c10 - c00) * fx;
    let c1 = c01 + (c11 - c01) * fx;
    c0 + (c1 - c0) * fy
}

/// Rigidly transforms a volume: rotation Rz(yaw) * Ry(-pitch) about the
/// center plus a translation of `offset_vox` along the rotated sagittal
/// normal. A volume that is mirror symmetric about the centered sagittal
/// plane becomes symmetric about the plane with exactly these parameters.
pub fn rigid_transform_volume(v: &Volume3D, pitch_deg: f64, yaw_deg: f64, offset_vox: f64) -> Volume3D {
    let p = pitch_deg.to_radians();
    let yw = yaw_deg.to_radians();
    let (sp, cp) = p.sin_cos();
    let (sy, cy) = yw.sin_cos();
    // R = Rz(yaw) * Ry(-pitch); R * ex = (cp*cy, cp*sy, sp).
    let r = [
        [cp * cy, -sy, -sp * cy],
        [cp * sy, cy, -sp * sy],
        [sp, 0.0, cp],
    ];
    let n = [cp * cy, cp * sy, sp];
    let c = [
        (v.dims[0] as f64 - 1.0) / 2.0,
        (v.dims[1] as f64 - 1.0) / 2.0,
        (v.dims[2] as f64 - 1.0) / 2.0,
    ];
    let t = [offset_vox * n[0], offset_vox * n[1], offset_vox * n[2]];

    let mut out = Volume3D::zeros(v.dims, v.spacing);
    let mut idx = 0;
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[0] {
                // Inverse map: source = R^T * (dst - c - t) + c.
                let d = [x as f64 - c[0] - t[0], y as f64 - c[1] - t[1], z as f64 - c[2] - t[2]];
                let src = [
                    r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2] + c[0],
                    r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2] + c[1],
                    r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2] + c[2],
                ];
                out.voxels[idx] = trilinear_sample(v, src);
                idx += 1;
            }
        }
    }
    out
}

/// Block-mean downsampling by an integer factor (trailing partial blocks
/// average over the in-bounds voxels).
pub fn downsample_block_mean(v: &Volume3D, factor: usize) -> Volume3D {
    assert!(factor >= 1);
    let nd = [
        v.dims[0].div_ceil(factor),
        v.dims[1].div_ceil(factor),
        v.dims[2].div_ceil(factor),
    ];
    let mut out = Volume3D::zeros(nd, v.spacing * factor as f64);
    for z in 0..nd[2] {
        for y in 0..nd[1] {
            for x in 0..nd[0] {
                let mut sum = 0.0;
                let mut count = 0usize;
                for dz in 0..factor {
                    let sz = z * factor + dz;
                    if sz >= v.dims[2] {
                        break;
                    }
                    for dy in 0..factor {
                        let sy = y * factor + dy;
                        if sy >= v.dims[1] {
                            break;
                        }
                        for dx in 0..factor {
                            let sx = x * factor + dx;
                            if sx >= v.dims[0] {
                                break;
                            }
                            sum += v.get(sx, sy, sz);
                            count += 1;
                        }
                    }
                }
                let idx = out.idx(x, y, z);
                out.voxels[idx] = sum / count as f64;
            }
        }
    }
    out
}
