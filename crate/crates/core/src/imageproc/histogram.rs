//! Discrete histograms on [0,1], histogram matching and equalization.
//!
//! Conventions (fixed across the pipeline): `bins` uniform bins over [0,1];
//! the CDF at bin b includes bin b itself; the inverse CDF at probability p
//! is the smallest bin center whose CDF reaches p. Matching evaluates the
//! source side by exact value rank so that any strictly monotone rescale of
//! the source maps to the identical output.

use super::Image2D;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Inclusive CDF, exact at 1.0 in the last occupied bin.
    pub fn cdf(&self) -> Vec<f64> {
        let total = self.total() as f64;
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total
            })
            .collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

#[inline]
fn bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) / bins as f64
}

pub fn histogram(x: &Image2D, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::validation("bins", "must be >= 2"));
    }
    let mut counts = vec![0u64; bins];
    for &v in &x.pixels {
        counts[bin_of(v, bins)] += 1;
    }
    Ok(Histogram { bins, counts })
}

/// Mean of per-image normalized histograms (the training-template histogram).
pub fn average_histograms(images: &[Image2D], bins: usize) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::validation("images", "must not be empty"));
    }
    let mut avg = vec![0.0; bins];
    for img in images {
        let h = histogram(img, bins)?.normalized();
        for (a, v) in avg.iter_mut().zip(h) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    for a in avg.iter_mut() {
        *a /= n;
    }
    Ok(avg)
}

/// Smallest bin index whose CDF reaches p (falling back to the last rise for
/// p beyond the CDF's top, which only happens through float dust).
fn invert_cdf(cdf: &[f64], p: f64) -> usize {
    let top = *cdf.last().unwrap();
    let p = p.min(top);
    match cdf.binary_search_by(|c| c.partial_cmp(&p).unwrap()) {
        Ok(mut i) => {
            // Land on the first bin attaining this CDF value.
            while i > 0 && cdf[i - 1] >= p {
                i -= 1;
            }
            i
        }
        Err(i) => i.min(cdf.len() - 1),
    }
}

/// Shared matching core: assigns every source pixel its <=-tie rank quantile
/// p = #{v_j <= v_i} / n and maps it through `lookup(p)`.
fn match_by_rank(source: &Image2D, lookup: impl Fn(f64) -> f64) -> Image2D {
    let n = source.pixels.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        source.pixels[a as usize]
            .partial_cmp(&source.pixels[b as usize])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let v = source.pixels[order[i] as usize];
        let mut j = i + 1;
        while j < n && source.pixels[order[j] as usize] == v {
            j += 1;
        }
        let p = j as f64 / n as f64;
        let mapped = lookup(p);
        for &idx in &order[i..j] {
            out[idx as usize] = mapped;
        }
        i = j;
    }

    Image2D {
        width: source.width,
        height: source.height,
        pixels: out,
    }
}

/// Remaps `source` so its intensity distribution follows a binned reference
/// CDF; outputs are bin centers (the reference is only known at bin
/// resolution). Used for template-histogram references.
pub fn histogram_match_to_cdf(source: &Image2D, ref_cdf: &[f64]) -> Image2D {
    let bins = ref_cdf.len();
    match_by_rank(source, |p| bin_center(invert_cdf(ref_cdf, p), bins))
}

/// Histogram matching of `source` onto a reference image. The inverse CDF
/// reads the reference's empirical quantile values (which lie inside the
/// inverted bins), so matching an image to itself is exactly the identity
/// and any strictly monotone rescale of the source maps identically.
pub fn histogram_match(source: &Image2D, reference: &Image2D, bins: usize) -> Result<Image2D> {
    if bins < 2 {
        return Err(Error::validation("bins", "must be >= 2"));
    }
    let mut ref_sorted = reference.pixels.clone();
    ref_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_ref = ref_sorted.len();
    Ok(match_by_rank(source, |p| {
        // k = min{ j : (j+1)/n_ref >= p }, with a float-dust guard so exact
        // rank ratios stay on their integer.
        let k = (((p * n_ref as f64) - 1e-9).ceil() as usize).clamp(1, n_ref) - 1;
        ref_sorted[k]
    }))
}

/// CDF-valued equalization: pixel v -> F_x(bin(v)).
pub fn histogram_equalize(x: &Image2D, bins: usize) -> Result<Image2D> {
    let cdf = histogram(x, bins)?.cdf();
    Ok(x.map(|v| cdf[bin_of(v, bins)]))
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
    fn match_identity_within_one_bin() {
        let x = random_image(16, 16, 2);
        let m = histogram_match(&x, &x, 256).unwrap();
        for (a, b) in x.pixels.iter().zip(&m.pixels) {
            assert!((a - b).abs() <= 1.0 / 256.0, "{a} vs {b}");
        }
        // The quantile-value convention makes the identity exact.
        assert_eq!(x.pixels, m.pixels);
    }

    #[test]
    fn match_constant_source_hits_top_reference_bin() {
        let src = Image2D::zeros(8, 8).map(|_| 0.3);
        let reference = random_image(8, 8, 9);
        let m = histogram_match(&src, &reference, 256).unwrap();
        // The <=-CDF convention at p = 1 lands in the reference's highest
        // occupied bin (the output value is the reference's top quantile).
        let top_bin = reference
            .pixels
            .iter()
            .map(|&v| bin_of(v, 256))
            .max()
            .unwrap();
        let top_value = reference.pixels.iter().cloned().fold(0.0f64, f64::max);
        let expected_center = bin_center(top_bin, 256);
        for &v in &m.pixels {
            assert_eq!(bin_of(v, 256), top_bin);
            assert!((v - expected_center).abs() <= 0.5 / 256.0);
            assert_eq!(v, top_value);
        }
    }

    /// Sort-based quantile-mapping oracle, within 1/bins per pixel.
    /// The oracle quantizes exactly like the implementation's conventions
    /// (<=-ties on the source, reference read at matching quantile) but goes
    /// through plain sorting rather than CDF arrays.
    #[test]
    fn match_agrees_with_sort_oracle() {
        let bins = 256;
        for seed in 0..50 {
            let src = random_image(8, 8, seed);
            let reference = random_image(8, 8, seed + 500);
            let m = histogram_match(&src, &reference, bins).unwrap();

            let n = src.pixels.len();
            let mut ref_sorted = reference.pixels.clone();
            ref_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (i, &v) in src.pixels.iter().enumerate() {
                let le = src.pixels.iter().filter(|&&w| w <= v).count();
                let p = le as f64 / n as f64;
                let k = (0..n)
                    .find(|&j| (j + 1) as f64 / n as f64 >= p)
                    .unwrap();
                let oracle = ref_sorted[k];
                assert!(
                    (m.pixels[i] - oracle).abs() <= 1.0 / bins as f64,
                    "pixel {i}: {} vs oracle {oracle}",
                    m.pixels[i]
                );
            }
        }
    }

    #[test]
    fn match_output_histogram_near_reference() {
        // L1 distance between output and reference histograms <= 2*npix/bins.
        let bins = 256;
        for seed in 0..20 {
            let src = random_image(32, 32, seed);
            let reference = random_image(32, 32, seed + 100);
            let m = histogram_match(&src, &reference, bins).unwrap();
            let hm = histogram(&m, bins).unwrap().counts;
            let hr = histogram(&reference, bins).unwrap().counts;
            let l1: u64 = hm
                .iter()
                .zip(&hr)
                .map(|(&a, &b)| a.abs_diff(b))
                .sum();
            let npix = (32 * 32) as u64;
            assert!(l1 <= 2 * npix / bins as u64 + 8, "L1 {l1}");
        }
    }

    /// Matching is invariant to strictly monotone rescale of the source.
    #[test]
    fn match_gain_invariant() {
        for seed in 0..10 {
            let src = random_image(12, 12, seed);
            let scaled = src.map(|v| 0.37 * v + 0.05);
            let reference = random_image(12, 12, seed + 19);
            let a = histogram_match(&src, &reference, 256).unwrap();
            let b = histogram_match(&scaled, &reference, 256).unwrap();
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn equalize_constant_is_one() {
        let x = Image2D::zeros(8, 8).map(|_| 0.42);
        let e = histogram_equalize(&x, 256).unwrap();
        assert!(e.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn equalize_two_levels() {
        // Two equal-mass levels map to 0.5 and 1.0.
        let x = Image2D::from_fn(8, 8, |x, _| if x < 4 { 0.2 } else { 0.8 });
        let e = histogram_equalize(&x, 256).unwrap();
        for y in 0..8 {
            assert_eq!(e.get(0, y), 0.5);
            assert_eq!(e.get(7, y), 1.0);
        }
    }

    #[test]
    fn equalize_monotone() {
        for seed in 0..10 {
            let x = random_image(10, 10, seed);
            let e = histogram_equalize(&x, 64).unwrap();
            let mut pairs: Vec<(f64, f64)> = x.pixels.iter().copied().zip(e.pixels.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in pairs.windows(2) {
                assert!(w[0].1 <= w[1].1);
            }
        }
    }

    #[test]
    fn bins_validation() {
        let x = Image2D::zeros(4, 4);
        assert!(histogram(&x, 1).is_err());
        assert!(histogram_equalize(&x, 1).is_err());
    }
}
