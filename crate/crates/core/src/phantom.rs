//! Deterministic synthetic brain phantoms with ground-truth region labels.
//!
//! Phantoms are built from smooth ellipsoidal primitives on a 64^3 grid
//! (2 mm isotropic by default). Group-level effect sizes (ventricle growth,
//! cerebellum and hippocampus shrinkage, parietal intensity loss) are
//! controllable per subject, so cohorts with known alterations can be
//! generated for training and evaluation. Generation is a pure function of
//! the spec, including its seed.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Subject group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "EU")]
    Eu,
    #[serde(rename = "DS_noAD")]
    DsNoAd,
    #[serde(rename = "DS_prodromal")]
    DsProdromal,
    #[serde(rename = "DS_AD")]
    DsAd,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Eu, Group::DsNoAd, Group::DsProdromal, Group::DsAd];

    pub fn name(self) -> &'static str {
        match self {
            Group::Eu => "EU",
            Group::DsNoAd => "DS_noAD",
            Group::DsProdromal => "DS_prodromal",
            Group::DsAd => "DS_AD",
        }
    }

    pub fn is_ds(self) -> bool {
        self != Group::Eu
    }

    pub fn parse(s: &str) -> Option<Group> {
        Group::ALL.iter().copied().find(|g| g.name() == s)
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed region table; ids are stable across runs and releases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Region {
    Background = 0,
    Cortex = 1,
    ParietalCortex = 2,
    LateralVentricleL = 3,
    LateralVentricleR = 4,
    InferiorLateralVentricleL = 5,
    InferiorLateralVentricleR = 6,
    CerebellumWmL = 7,
    CerebellumWmR = 8,
    CerebellumCortexL = 9,
    CerebellumCortexR = 10,
    HippocampusL = 11,
    HippocampusR = 12,
    PutamenL = 13,
    PutamenR = 14,
    Brainstem = 15,
}

impl Region {
    pub const ALL: [Region; 16] = [
        Region::Background,
        Region::Cortex,
        Region::ParietalCortex,
        Region::LateralVentricleL,
        Region::LateralVentricleR,
        Region::InferiorLateralVentricleL,
        Region::InferiorLateralVentricleR,
        Region::CerebellumWmL,
        Region::CerebellumWmR,
        Region::CerebellumCortexL,
        Region::CerebellumCortexR,
        Region::HippocampusL,
        Region::HippocampusR,
        Region::PutamenL,
        Region::PutamenR,
        Region::Brainstem,
    ];

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn from_id(id: u16) -> Option<Region> {
        Region::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Background => "background",
            Region::Cortex => "cortex",
            Region::ParietalCortex => "parietal cortex",
            Region::LateralVentricleL => "L lateral ventricle",
            Region::LateralVentricleR => "R lateral ventricle",
            Region::InferiorLateralVentricleL => "L inferior lateral ventricle",
            Region::InferiorLateralVentricleR => "R inferior lateral ventricle",
            Region::CerebellumWmL => "L cerebellum white matter",
            Region::CerebellumWmR => "R cerebellum white matter",
            Region::CerebellumCortexL => "L cerebellum cortex",
            Region::CerebellumCortexR => "R cerebellum cortex",
            Region::HippocampusL => "L hippocampus",
            Region::HippocampusR => "R hippocampus",
            Region::PutamenL => "L putamen",
            Region::PutamenR => "R putamen",
            Region::Brainstem => "brainstem",
        }
    }

    /// Ventricle labels (lateral + inferior lateral, both sides).
    pub fn is_ventricle(self) -> bool {
        matches!(
            self,
            Region::LateralVentricleL
                | Region::LateralVentricleR
                | Region::InferiorLateralVentricleL
                | Region::InferiorLateralVentricleR
        )
    }

    pub fn is_cerebellum(self) -> bool {
        matches!(
            self,
            Region::CerebellumWmL
                | Region::CerebellumWmR
                | Region::CerebellumCortexL
                | Region::CerebellumCortexR
        )
    }
}

/// Generative recipe for one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub group: Group,
    /// Volume factor for all ventricle compartments (> 0, 1 = EU baseline).
    pub ventricle_scale: f64,
    /// Volume factor for the cerebellum (cortex shell and WM core).
    pub cerebellum_scale: f64,
    /// Volume factor for the hippocampi.
    pub hippocampus_scale: f64,
    /// Parietal intensity loss in [0, 1]; 0 = none, 1 = maximal darkening.
    pub parietal_atrophy: f64,
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    /// Additive Gaussian intensity noise (clamped to [0,1] afterwards).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// EU baseline with unit factors.
    pub fn baseline(seed: u64) -> Self {
        PhantomSpec {
            group: Group::Eu,
            ventricle_scale: 1.0,
            cerebellum_scale: 1.0,
            hippocampus_scale: 1.0,
            parietal_atrophy: 0.0,
            intensity_gain: 1.0,
            intensity_bias: 0.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ventricle_scale", self.ventricle_scale),
            ("cerebellum_scale", self.cerebellum_scale),
            ("hippocampus_scale", self.hippocampus_scale),
            ("intensity_gain", self.intensity_gain),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(field, format!("must be > 0, got {v}")));
            }
        }
        if !(self.parietal_atrophy.is_finite() && (0.0..=1.0).contains(&self.parietal_atrophy)) {
            return Err(Error::validation(
                "parietal_atrophy",
                format!("must be in [0,1], got {}", self.parietal_atrophy),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation(
                "noise_sigma",
                format!("must be >= 0, got {}", self.noise_sigma),
            ));
        }
        if !self.intensity_bias.is_finite() {
            return Err(Error::validation("intensity_bias", "must be finite"));
        }
        Ok(())
    }
}

/// Normalized 3D intensity grid, x-fastest layout, intensities in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub voxels: Vec<f64>,
}

impl Volume3D {
    pub fn zeros(dims: [usize; 3], spacing: f64) -> Self {
        Volume3D {
            dims,
            spacing,
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.idx(x, y, z)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 32) {
            return Err(Error::validation("dims", "each axis must be >= 32 voxels"));
        }
        if self.voxels.len() != self.dims[0] * self.dims[1] * self.dims[2] {
            return Err(Error::validation("voxels", "length does not match dims"));
        }
        if self.voxels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation("voxels", "intensities must be finite in [0,1]"));
        }
        Ok(())
    }
}

/// Integer region labels on the same grid as a [`Volume3D`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Voxel count per region id, indexed by id.
    pub fn region_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; Region::ALL.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub group: Group,
    pub spec: PhantomSpec,
    /// Relative paths, filled in once the subject is written to disk.
    #[serde(default)]
    pub volume_path: String,
    #[serde(default)]
    pub labels_path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub split: Split,
    pub subjects: Vec<SubjectEntry>,
    /// Subject count per group, keyed by group name.
    pub counts: Vec<(String, usize)>,
}

impl CohortManifest {
    pub fn subjects_of(&self, group: Group) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.group == group)
    }

    pub fn is_eu_only(&self) -> bool {
        self.subjects.iter().all(|s| s.group == Group::Eu)
    }
}

/// Per-group factor targets used by [`sample_cohort`]; each subject jitters
/// uniformly within `jitter` of its group target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectTable {
    pub ventricle: [f64; 4],
    pub cerebellum: [f64; 4],
    pub hippocampus: [f64; 4],
    pub parietal: [f64; 4],
    /// Relative jitter, e.g. 0.10 for +/-10%.
    pub jitter: f64,
    pub gain_range: (f64, f64),
    pub bias_range: (f64, f64),
    pub noise_range: (f64, f64),
}

impl Default for EffectTable {
    /// Group targets: ventricles +31/+101/+115%, cerebellum WM -22/-19/-26%,
    /// hippocampus -9/-21/-36% for noAD/prodromal/AD relative to EU.
    /// Parietal darkening has no volumetric reference and is a free,
    /// documented parameter chosen to grow with neurodegeneration stage.
    fn default() -> Self {
        EffectTable {
            ventricle: [1.0, 1.31, 2.01, 2.15],
            cerebellum: [1.0, 0.78, 0.81, 0.74],
            hippocampus: [1.0, 0.91, 0.79, 0.64],
            parietal: [0.0, 0.05, 0.45, 0.85],
            jitter: 0.10,
            gain_range: (0.90, 1.10),
            bias_range: (0.0, 0.03),
            noise_range: (0.008, 0.012),
        }
    }
}

impl EffectTable {
    fn group_index(group: Group) -> usize {
        match group {
            Group::Eu => 0,
            Group::DsNoAd => 1,
            Group::DsProdromal => 2,
            Group::DsAd => 3,
        }
    }
}

const GRID: usize = 64;
const SPACING_MM: f64 = 2.0;

struct Ellipsoid {
    c: [f64; 3],
    a: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn rho2(&self, p: [f64; 3]) -> f64 {
        let dx = (p[0] - self.c[0]) / self.a[0];
        let dy = (p[1] - self.c[1]) / self.a[1];
        let dz = (p[2] - self.c[2]) / self.a[2];
        dx * dx + dy * dy + dz * dz
    }

    /// Smooth interior weight: 1 deep inside, 0 outside, ~1.5 voxel wide ramp.
    #[inline]
    fn weight(&self, p: [f64; 3]) -> f64 {
        let rho = self.rho2(p).sqrt();
        let half_width = 0.75 / (self.a[0] * self.a[1] * self.a[2]).cbrt();
        smoothstep((1.0 + half_width - rho) / (2.0 * half_width))
    }

    #[inline]
    fn inside(&self, p: [f64; 3]) -> bool {
        self.rho2(p) <= 1.0
    }

    fn mirrored(&self, cx: f64) -> Ellipsoid {
        Ellipsoid {
            c: [2.0 * cx - self.c[0], self.c[1], self.c[2]],
            a: self.a,
        }
    }
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Anatomy of one subject: all primitives in voxel coordinates, mirror
/// symmetric about the central sagittal plane.
struct Anatomy {
    cerebrum: Ellipsoid,
    lat_vent_l: Ellipsoid,
    inf_vent_l: Ellipsoid,
    cereb_outer: Ellipsoid,
    cereb_core: Ellipsoid,
    hippo_l: Ellipsoid,
    putamen_l: Ellipsoid,
    brainstem: Ellipsoid,
    /// Parietal wedge thresholds in cerebrum-normalized (y, z) coordinates.
    parietal_u0: f64,
    parietal_w0: f64,
    parietal_darkening: f64,
    mid_x: f64,
}

impl Anatomy {
    fn build(spec: &PhantomSpec, rng: &mut Rng) -> Anatomy {
        let mid_x = (GRID as f64 - 1.0) / 2.0;
        // Per-subject anatomical jitter, symmetric by construction: only
        // y/z placement and semi-axes vary; x centers stay mirrored.
        let mut j = |lo: f64, hi: f64| rng.uniform(lo, hi);

        let cer_ax = 24.0 * j(0.96, 1.04);
        let cer_ay = 27.0 * j(0.96, 1.04);
        let cer_az = 22.0 * j(0.96, 1.04);
        let cer_cy = 29.0 + j(-1.0, 1.0);
        let cer_cz = 38.0 + j(-1.0, 1.0);
        let cerebrum = Ellipsoid {
            c: [mid_x, cer_cy, cer_cz],
            a: [cer_ax, cer_ay, cer_az],
        };

        // The two lobes of each ventricle pair share their (y,z) center and
        // straddle the midline. Keeping the x semi-axis fixed and scaling the
        // in-plane axes by sqrt(scale) makes the union volume exactly
        // proportional to ventricle_scale (the lobes' x-overlap region stays
        // concentric slice by slice).
        let v = spec.ventricle_scale.sqrt();
        let lat_vent_l = Ellipsoid {
            c: [mid_x - 3.2, cer_cy - 1.0 + j(-0.5, 0.5), cer_cz + 2.0 + j(-0.5, 0.5)],
            a: [4.0, 11.0 * v * j(0.97, 1.03), 5.5 * v * j(0.97, 1.03)],
        };
        let inf_vent_l = Ellipsoid {
            c: [mid_x - 4.5, cer_cy + 6.5 + j(-0.5, 0.5), cer_cz - 9.0 + j(-0.5, 0.5)],
            a: [2.2, 5.0 * v, 2.5 * v],
        };

        let c = spec.cerebellum_scale.cbrt();
        let cereb_c = [mid_x, 44.0 + j(-1.0, 1.0), 22.0 + j(-1.0, 1.0)];
        let cereb_outer = Ellipsoid {
            c: cereb_c,
            a: [15.0 * c, 11.0 * c * j(0.97, 1.03), 9.0 * c * j(0.97, 1.03)],
        };
        let cereb_core = Ellipsoid {
            c: cereb_c,
            a: [9.0 * c, 6.5 * c, 5.0 * c],
        };

        let h = spec.hippocampus_scale.cbrt();
        let hippo_l = Ellipsoid {
            c: [mid_x - 3.4, cer_cy + 4.5 + j(-0.5, 0.5), cer_cz - 8.0 + j(-0.5, 0.5)],
            a: [2.8 * h, 6.0 * h, 2.6 * h],
        };

        let putamen_l = Ellipsoid {
            c: [mid_x - 8.0, cer_cy - 2.0 + j(-0.5, 0.5), cer_cz - 4.0 + j(-0.5, 0.5)],
            a: [2.5, 4.5, 3.0],
        };

        let brainstem = Ellipsoid {
            c: [mid_x, 35.0 + j(-0.5, 0.5), 20.0 + j(-0.5, 0.5)],
            a: [5.0, 5.5, 11.0 * j(0.97, 1.03)],
        };

        Anatomy {
            cerebrum,
            lat_vent_l,
            inf_vent_l,
            cereb_outer,
            cereb_core,
            hippo_l,
            putamen_l,
            brainstem,
            parietal_u0: 0.25,
            parietal_w0: 0.25,
            parietal_darkening: 0.38 * spec.parietal_atrophy,
            mid_x,
        }
    }

    /// Smooth parietal wedge weight at cerebrum-normalized coordinates.
    #[inline]
    fn parietal_weight(&self, p: [f64; 3]) -> f64 {
        let u = (p[1] - self.cerebrum.c[1]) / self.cerebrum.a[1];
        let w = (p[2] - self.cerebrum.c[2]) / self.cerebrum.a[2];
        smoothstep((u - self.parietal_u0) / 0.06) * smoothstep((w - self.parietal_w0) / 0.06)
    }

    fn label_at(&self, p: [f64; 3]) -> Region {
        let left = p[0] < self.mid_x;
        let mut label = Region::Background;
        if self.cerebrum.inside(p) {
            label = Region::Cortex;
            if self.parietal_weight(p) >= 0.5 {
                label = Region::ParietalCortex;
            }
            if self.putamen_l.inside(p) || self.putamen_l.mirrored(self.mid_x).inside(p) {
                label = if left { Region::PutamenL } else { Region::PutamenR };
            }
            if self.hippo_l.inside(p) || self.hippo_l.mirrored(self.mid_x).inside(p) {
                label = if left { Region::HippocampusL } else { Region::HippocampusR };
            }
            if self.inf_vent_l.inside(p) || self.inf_vent_l.mirrored(self.mid_x).inside(p) {
                label = if left {
                    Region::InferiorLateralVentricleL
                } else {
                    Region::InferiorLateralVentricleR
                };
            }
            if self.lat_vent_l.inside(p) || self.lat_vent_l.mirrored(self.mid_x).inside(p) {
                label = if left {
                    Region::LateralVentricleL
                } else {
                    Region::LateralVentricleR
                };
            }
        }
        if self.cereb_outer.inside(p) {
            label = if left {
                Region::CerebellumCortexL
            } else {
                Region::CerebellumCortexR
            };
            if self.cereb_core.inside(p) {
                label = if left { Region::CerebellumWmL } else { Region::CerebellumWmR };
            }
        }
        if self.brainstem.inside(p) {
            label = Region::Brainstem;
        }
        label
    }

    fn intensity_at(&self, p: [f64; 3]) -> f64 {
        let mut i = 0.0;

        let w_cer = self.cerebrum.weight(p);
        if w_cer > 0.0 {
            let rho2 = self.cerebrum.rho2(p).min(1.0);
            let mut cer = 0.42 + 0.30 * (1.0 - rho2);
            let wp = self.parietal_weight(p);
            cer *= 1.0 - self.parietal_darkening * wp;
            i = mix(i, cer, w_cer);
        }

        let w_put = self
            .putamen_l
            .weight(p)
            .max(self.putamen_l.mirrored(self.mid_x).weight(p));
        if w_put > 0.0 {
            i = mix(i, 0.52, w_put);
        }

        let w_hip = self
            .hippo_l
            .weight(p)
            .max(self.hippo_l.mirrored(self.mid_x).weight(p));
        if w_hip > 0.0 {
            i = mix(i, 0.40, w_hip);
        }

        let w_vent = self
            .lat_vent_l
            .weight(p)
            .max(self.lat_vent_l.mirrored(self.mid_x).weight(p))
            .max(self.inf_vent_l.weight(p))
            .max(self.inf_vent_l.mirrored(self.mid_x).weight(p));
        if w_vent > 0.0 {
            i = mix(i, 0.08, w_vent);
        }

        let w_cereb = self.cereb_outer.weight(p);
        if w_cereb > 0.0 {
            // Foliation-like banding in cerebellum-normalized coordinates:
            // shrinking the cerebellum changes the apparent band frequency.
            let zt = (p[2] - self.cereb_outer.c[2]) / self.cereb_outer.a[2];
            let band = 0.46 + 0.05 * (3.0 * std::f64::consts::PI * zt).cos();
            i = mix(i, band, w_cereb);
            let w_core = self.cereb_core.weight(p);
            if w_core > 0.0 {
                i = mix(i, 0.66, w_core);
            }
        }

        let w_bs = self.brainstem.weight(p);
        if w_bs > 0.0 {
            let rho2 = self.brainstem.rho2(p).min(1.0);
            i = mix(i, 0.58 + 0.06 * (1.0 - rho2), w_bs);
        }

        i
    }
}

#[inline]
fn mix(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Generates one phantom. Bit-identical output for identical specs.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume3D, LabelMap)> {
    spec.validate()?;
    let mut anatomy_rng = Rng::seed_from(spec.seed).fork(0x414e41);
    let anatomy = Anatomy::build(spec, &mut anatomy_rng);
    let mut noise_rng = Rng::seed_from(spec.seed).fork(0x4e4f49);

    let dims = [GRID, GRID, GRID];
    let mut vol = Volume3D::zeros(dims, SPACING_MM);
    let mut labels = vec![0u16; GRID * GRID * GRID];

    let mut idx = 0;
    for z in 0..GRID {
        for y in 0..GRID {
            for x in 0..GRID {
                let p = [x as f64, y as f64, z as f64];
                let mut i = anatomy.intensity_at(p);
                i = spec.intensity_gain * i + spec.intensity_bias;
                if spec.noise_sigma > 0.0 {
                    i += spec.noise_sigma * noise_rng.normal();
                }
                vol.voxels[idx] = i.clamp(0.0, 1.0);
                labels[idx] = anatomy.label_at(p).id();
                idx += 1;
            }
        }
    }

    Ok((vol, LabelMap { dims, labels }))
}

/// Draws per-subject specs for the requested group counts, deterministically
/// from `master_seed`. Severity ordering holds in expectation via the group
/// targets; each subject jitters around its target.
pub fn sample_cohort(
    counts_per_group: &[(Group, usize)],
    effect_table: &EffectTable,
    master_seed: u64,
    split: Split,
) -> Result<CohortManifest> {
    if counts_per_group.is_empty() {
        return Err(Error::validation("counts_per_group", "must not be empty"));
    }
    for (g, n) in counts_per_group {
        if *n < 1 {
            return Err(Error::validation(
                "counts_per_group",
                format!("count for {g} must be >= 1"),
            ));
        }
    }

    let root = Rng::seed_from(master_seed).fork(0x434f48);
    let mut subjects = Vec::new();
    let mut counts = Vec::new();
    for (gi, (group, n)) in counts_per_group.iter().enumerate() {
        let tidx = EffectTable::group_index(*group);
        for k in 0..*n {
            let mut rng = root.fork((gi as u64) << 32 | k as u64);
            let jit = |rng: &mut Rng, t: f64, j: f64| t * rng.uniform(1.0 - j, 1.0 + j);
            let j = effect_table.jitter;
            let spec = PhantomSpec {
                group: *group,
                ventricle_scale: jit(&mut rng, effect_table.ventricle[tidx], j),
                cerebellum_scale: jit(&mut rng, effect_table.cerebellum[tidx], j),
                hippocampus_scale: jit(&mut rng, effect_table.hippocampus[tidx], j),
                parietal_atrophy: (effect_table.parietal[tidx] * rng.uniform(1.0 - j, 1.0 + j))
                    .clamp(0.0, 1.0),
                intensity_gain: rng.uniform(effect_table.gain_range.0, effect_table.gain_range.1),
                intensity_bias: rng.uniform(effect_table.bias_range.0, effect_table.bias_range.1),
                noise_sigma: rng.uniform(effect_table.noise_range.0, effect_table.noise_range.1),
                seed: rng.next_u64(),
            };
            subjects.push(SubjectEntry {
                id: format!("{}_{}_{:04}", split.name(), group.name().to_lowercase(), k),
                group: *group,
                spec,
                volume_path: String::new(),
                labels_path: String::new(),
            });
        }
        counts.push((group.name().to_string(), *n));
    }

    Ok(CohortManifest { split, subjects, counts })
}
