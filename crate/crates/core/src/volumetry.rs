//! Region volumes from label maps and the cohort report of relative volume
//! differences between DS subgroups and EU.

use crate::error::{Error, Result};
use crate::phantom::{Group, LabelMap, Region};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Per-region volume in mm^3 (voxel count x spacing^3).
pub fn region_volumes(labels: &LabelMap, spacing_mm: f64) -> Result<BTreeMap<u16, f64>> {
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::validation("spacing", "must be > 0"));
    }
    let voxel_mm3 = spacing_mm.powi(3);
    let mut volumes = BTreeMap::new();
    for &l in &labels.labels {
        *volumes.entry(l).or_insert(0.0) += voxel_mm3;
    }
    Ok(volumes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumetryRow {
    pub region_id: u16,
    pub region: String,
    /// EU group mean volume in mm^3.
    pub eu_mean: f64,
    /// Per-DS-subgroup mean volume and exact relative difference
    /// (subgroup_mean / eu_mean - 1), ordered noAD, prodromal, AD.
    pub ds_means: [f64; 3],
    pub rel_diff: [f64; 3],
}

impl VolumetryRow {
    /// Relative difference as integer percent, the table presentation.
    pub fn rel_diff_percent(&self) -> [i64; 3] {
        self.rel_diff.map(|d| (d * 100.0).round() as i64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumetryReport {
    /// Rows sorted by descending max |relative difference|, region-name
    /// tie-break, capped at `row_cap`.
    pub rows: Vec<VolumetryRow>,
    pub row_cap: usize,
    pub subjects_per_group: [usize; 4],
}

pub const DEFAULT_ROW_CAP: usize = 12;

/// Builds the cohort report from per-subject region volumes grouped by
/// {EU, noAD, prodromal, AD}. Background is excluded.
pub fn cohort_report(
    per_subject: &[(Group, BTreeMap<u16, f64>)],
    row_cap: usize,
) -> Result<VolumetryReport> {
    let mut group_totals: [BTreeMap<u16, f64>; 4] = Default::default();
    let mut group_counts = [0usize; 4];
    for (group, volumes) in per_subject {
        let gi = match group {
            Group::Eu => 0,
            Group::DsNoAd => 1,
            Group::DsProdromal => 2,
            Group::DsAd => 3,
        };
        group_counts[gi] += 1;
        for (&region, &vol) in volumes {
            *group_totals[gi].entry(region).or_insert(0.0) += vol;
        }
    }
    if group_counts[0] == 0 {
        return Err(Error::validation("per_subject", "EU group must be non-empty"));
    }

    let mean_of = |gi: usize, region: u16| -> f64 {
        if group_counts[gi] == 0 {
            0.0
        } else {
            group_totals[gi].get(&region).copied().unwrap_or(0.0) / group_counts[gi] as f64
        }
    };

    let mut rows = Vec::new();
    for region in Region::ALL {
        if region == Region::Background {
            continue;
        }
        let id = region.id();
        let eu_mean = mean_of(0, id);
        if eu_mean <= 0.0 {
            continue;
        }
        let ds_means = [mean_of(1, id), mean_of(2, id), mean_of(3, id)];
        let rel_diff = ds_means.map(|m| m / eu_mean - 1.0);
        rows.push(VolumetryRow {
            region_id: id,
            region: region.name().to_string(),
            eu_mean,
            ds_means,
            rel_diff,
        });
    }

    rows.sort_by(|a, b| {
        let ka = a.rel_diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let kb = b.rel_diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        kb.partial_cmp(&ka).unwrap().then(a.region.cmp(&b.region))
    });
    rows.truncate(row_cap);

    Ok(VolumetryReport {
        rows,
        row_cap,
        subjects_per_group: group_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};

    #[test]
    fn volumes_count_times_spacing_cubed() {
        let labels = LabelMap {
            dims: [32, 32, 32],
            labels: {
                let mut l = vec![0u16; 32 * 32 * 32];
                for v in l.iter_mut().take(10) {
                    *v = Region::HippocampusL.id();
                }
                l
            },
        };
        let v1 = region_volumes(&labels, 1.0).unwrap();
        assert_eq!(v1[&Region::HippocampusL.id()], 10.0);
        // Doubling spacing multiplies all volumes by 8.
        let v2 = region_volumes(&labels, 2.0).unwrap();
        assert_eq!(v2[&Region::HippocampusL.id()], 80.0);
        assert_eq!(v2[&0], v1[&0] * 8.0);
    }

    #[test]
    fn volumes_match_loop_oracle() {
        let (_, labels) = make_phantom(&PhantomSpec::baseline(31)).unwrap();
        let vols = region_volumes(&labels, 2.0).unwrap();
        for region in Region::ALL {
            let count = labels.labels.iter().filter(|&&l| l == region.id()).count();
            let expected = count as f64 * 8.0;
            let got = vols.get(&region.id()).copied().unwrap_or(0.0);
            assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }

    #[test]
    fn spacing_validation() {
        let labels = LabelMap { dims: [32, 32, 32], labels: vec![0; 32 * 32 * 32] };
        assert!(region_volumes(&labels, 0.0).is_err());
    }

    /// The published example row: EU 16094.5, noAD 21115.9 -> +31%.
    #[test]
    fn percent_formula_on_published_row() {
        let mut eu = BTreeMap::new();
        eu.insert(Region::LateralVentricleL.id(), 16094.5);
        let mut noad = BTreeMap::new();
        noad.insert(Region::LateralVentricleL.id(), 21115.9);
        let report = cohort_report(
            &[(Group::Eu, eu), (Group::DsNoAd, noad)],
            DEFAULT_ROW_CAP,
        )
        .unwrap();
        let row = &report.rows[0];
        assert_eq!(row.rel_diff_percent()[0], 31);
        // Exactness: no re-rounded intermediate.
        let exact = 21115.9f64 / 16094.5 - 1.0;
        assert_eq!(row.rel_diff[0], exact);
        assert!((exact * 100.0 - 31.0).abs() <= 0.5);
    }

    #[test]
    fn identical_subgroup_zero_percent() {
        let mut vols = BTreeMap::new();
        vols.insert(Region::HippocampusL.id(), 5000.0);
        vols.insert(Region::CerebellumWmL.id(), 25000.0);
        let report = cohort_report(
            &[
                (Group::Eu, vols.clone()),
                (Group::DsAd, vols.clone()),
            ],
            DEFAULT_ROW_CAP,
        )
        .unwrap();
        for row in &report.rows {
            assert_eq!(row.rel_diff_percent()[2], 0);
        }
    }

    #[test]
    fn empty_eu_rejected() {
        let mut vols = BTreeMap::new();
        vols.insert(1u16, 10.0);
        assert!(cohort_report(&[(Group::DsAd, vols)], 12).is_err());
    }

    #[test]
    fn ordering_is_deterministic() {
        let mut eu = BTreeMap::new();
        eu.insert(Region::HippocampusL.id(), 1000.0);
        eu.insert(Region::HippocampusR.id(), 1000.0);
        let mut ds = BTreeMap::new();
        ds.insert(Region::HippocampusL.id(), 500.0);
        ds.insert(Region::HippocampusR.id(), 500.0);
        let report = cohort_report(&[(Group::Eu, eu), (Group::DsNoAd, ds)], 12).unwrap();
        // Equal effect sizes: tie broken by region name.
        assert_eq!(report.rows[0].region, "L hippocampus");
        assert_eq!(report.rows[1].region, "R hippocampus");
    }
}
