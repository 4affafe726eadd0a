//! Follow-up pairs, augmentation, patient-grouped folds and a synthetic
//! nodule generator whose deformation is known in closed form.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{assess_masks, classify_pd_nodule};
use crate::volgrid::{load_mask, load_volume, normalize_hu, save_mask, save_volume, SegMask, Volume};
use crate::warp::{DisplacementField, WarpFunction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub nodule_id: String,
    pub timepoint_index: u32,
    pub days_from_first: i64,
    pub volume_path: String,
    pub mask_path: String,
}

/// Scan table. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

pub type NoduleKey = (String, String);

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Manifest { rows, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|source| Error::Open { path: path.to_path_buf(), source })?;
        let mut reader = csv::Reader::from_reader(file);
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::new(rows, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per nodule: unique timepoint indices, days strictly increasing with
    /// the index, first day non-negative.
    pub fn validate(&self) -> Result<()> {
        for (key, rows) in self.nodules() {
            let mut seen = BTreeSet::new();
            for r in &rows {
                if !seen.insert(r.timepoint_index) {
                    return Err(Error::Manifest(format!(
                        "nodule {}/{}: duplicate timepoint {}",
                        key.0, key.1, r.timepoint_index
                    )));
                }
                if r.days_from_first < 0 {
                    return Err(Error::Manifest(format!("nodule {}/{}: negative day", key.0, key.1)));
                }
            }
            for w in rows.windows(2) {
                if w[1].days_from_first <= w[0].days_from_first {
                    return Err(Error::Manifest(format!(
                        "nodule {}/{}: days not strictly increasing at timepoint {}",
                        key.0, key.1, w[1].timepoint_index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Rows grouped by nodule in first-appearance order, each sorted by
    /// timepoint index.
    pub fn nodules(&self) -> IndexMap<NoduleKey, Vec<&ManifestRow>> {
        let mut out: IndexMap<NoduleKey, Vec<&ManifestRow>> = IndexMap::new();
        for r in &self.rows {
            out.entry((r.patient_id.clone(), r.nodule_id.clone())).or_default().push(r);
        }
        for rows in out.values_mut() {
            rows.sort_by_key(|r| r.timepoint_index);
        }
        out
    }

    /// Sorted, so the fold assignment does not depend on row order.
    pub fn patients(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Loads every referenced scan, checking that it parses and pairs up.
    pub fn validate_files(&self) -> Result<()> {
        for r in &self.rows {
            load_scan(self, r)?;
        }
        Ok(())
    }
}

fn load_scan(m: &Manifest, r: &ManifestRow) -> Result<(Volume, SegMask)> {
    let vol = load_volume(&m.resolve(&r.volume_path))?;
    let mask = load_mask(&m.resolve(&r.mask_path))?;
    mask.check_pairs_with(&vol)?;
    Ok((vol, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowUpPair {
    pub patient_id: String,
    pub nodule_id: String,
    pub baseline: Volume,
    pub baseline_mask: SegMask,
    pub target: Volume,
    pub target_mask: SegMask,
    pub t_day: i64,
}

impl FollowUpPair {
    pub fn shape(&self) -> [usize; 3] {
        self.baseline.shape()
    }

    pub fn check(&self) -> Result<()> {
        self.baseline_mask.check_pairs_with(&self.baseline)?;
        self.target_mask.check_pairs_with(&self.target)?;
        if self.baseline.shape() != self.target.shape() {
            return Err(Error::Shape {
                op: "FollowUpPair",
                expected: self.baseline.shape().to_vec(),
                got: self.target.shape().to_vec(),
            });
        }
        if self.t_day < 0 {
            return Err(Error::invalid(format!("negative interval {}", self.t_day)));
        }
        Ok(())
    }
}

/// Which manifest rows form a pair, without touching the files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub patient_id: String,
    pub nodule_id: String,
    pub base_timepoint: u32,
    pub follow_timepoint: u32,
    pub t_day: i64,
}

pub fn pair_plan(manifest: &Manifest) -> Result<Vec<PairRef>> {
    manifest.validate()?;
    let mut out = Vec::new();
    for ((pid, nid), rows) in manifest.nodules() {
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                out.push(PairRef {
                    patient_id: pid.clone(),
                    nodule_id: nid.clone(),
                    base_timepoint: rows[i].timepoint_index,
                    follow_timepoint: rows[j].timepoint_index,
                    t_day: rows[j].days_from_first - rows[i].days_from_first,
                });
            }
        }
    }
    Ok(out)
}

/// Every two-scan combination per nodule, earlier scan as baseline.
pub fn make_pairs(manifest: &Manifest) -> Result<Vec<FollowUpPair>> {
    let plan = pair_plan(manifest)?;
    let mut cache: BTreeMap<(String, String, u32), (Volume, SegMask)> = BTreeMap::new();
    for r in &manifest.rows {
        cache.insert((r.patient_id.clone(), r.nodule_id.clone(), r.timepoint_index), load_scan(manifest, r)?);
    }
    plan.into_iter()
        .map(|p| {
            let (b, bm) = &cache[&(p.patient_id.clone(), p.nodule_id.clone(), p.base_timepoint)];
            let (t, tm) = &cache[&(p.patient_id.clone(), p.nodule_id.clone(), p.follow_timepoint)];
            let pair = FollowUpPair {
                patient_id: p.patient_id,
                nodule_id: p.nodule_id,
                baseline: b.clone(),
                baseline_mask: bm.clone(),
                target: t.clone(),
                target_mask: tm.clone(),
                t_day: p.t_day,
            };
            pair.check()?;
            Ok(pair)
        })
        .collect()
}

/// Element of the cube symmetry group: output axis `a` reads input axis
/// `perm[a]`, reversed when `flip[a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Augmentation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { perm: [0, 1, 2], flip: [false; 3] };

    /// All 48 axis permutations combined with axis flips.
    pub fn all() -> Vec<Augmentation> {
        let mut out = Vec::with_capacity(48);
        for perm in PERMS {
            for bits in 0..8u8 {
                out.push(Augmentation { perm, flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0] });
            }
        }
        out
    }

    pub fn random(rng: &mut impl Rng) -> Augmentation {
        let all = Augmentation::all();
        all[rng.random_range(0..all.len())]
    }

    /// `self.compose(other)` applies `other` first.
    pub fn compose(self, other: Augmentation) -> Augmentation {
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for a in 0..3 {
            perm[a] = other.perm[self.perm[a]];
            flip[a] = self.flip[a] ^ other.flip[self.perm[a]];
        }
        Augmentation { perm, flip }
    }

    pub fn inverse(self) -> Augmentation {
        Augmentation::all()
            .into_iter()
            .find(|c| c.compose(self) == Augmentation::IDENTITY)
            .expect("group element has an inverse")
    }

    /// Whether this is a proper rotation rather than a reflection.
    pub fn is_rotation(self) -> bool {
        let p = self.perm;
        let inversions = (p[0] > p[1]) as u8 + (p[0] > p[2]) as u8 + (p[1] > p[2]) as u8;
        let flips = self.flip.iter().filter(|&&f| f).count() as u8;
        (inversions + flips) % 2 == 0
    }

    pub fn apply(self, vol: &Volume) -> Result<Volume> {
        if !vol.is_cube() {
            return Err(Error::invalid(format!("augmentation needs a cube, got {:?}", vol.shape())));
        }
        let n = vol.shape()[0];
        let src = vol.data();
        let mut data = vec![0f32; src.len()];
        let mut q = [0usize; 3];
        for (o, out) in data.iter_mut().enumerate() {
            q[0] = o / (n * n);
            q[1] = (o / n) % n;
            q[2] = o % n;
            let mut p = [0usize; 3];
            for a in 0..3 {
                p[self.perm[a]] = if self.flip[a] { n - 1 - q[a] } else { q[a] };
            }
            *out = src[(p[0] * n + p[1]) * n + p[2]];
        }
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            spacing[a] = vol.spacing[self.perm[a]];
        }
        Ok(Volume::new([n; 3], data, spacing)?.with_origin(vol.origin))
    }

    pub fn apply_mask(self, mask: &SegMask) -> Result<SegMask> {
        SegMask::new(self.apply(mask.volume())?)
    }

    pub fn apply_pair(self, pair: &FollowUpPair) -> Result<FollowUpPair> {
        Ok(FollowUpPair {
            patient_id: pair.patient_id.clone(),
            nodule_id: pair.nodule_id.clone(),
            baseline: self.apply(&pair.baseline)?,
            baseline_mask: self.apply_mask(&pair.baseline_mask)?,
            target: self.apply(&pair.target)?,
            target_mask: self.apply_mask(&pair.target_mask)?,
            t_day: pair.t_day,
        })
    }
}

/// Applies one group element, drawn uniformly from `seed`, to all four grids.
pub fn augment(pair: &FollowUpPair, seed: u64) -> Result<FollowUpPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Augmentation::random(&mut rng).apply_pair(pair)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub by_patient: IndexMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.by_patient.get(patient).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.by_patient.iter().filter(|(_, &f)| f == fold).map(|(p, _)| p.as_str()).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.by_patient.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles the (deduplicated, sorted) patients by `seed` and deals them
/// round-robin into `k` folds.
pub fn split_patients(patients: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut ids: Vec<String> = patients.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::invalid(format!("{} patients cannot fill {k} folds", ids.len())));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let by_patient = ids.into_iter().enumerate().map(|(i, p)| (p, i % k)).collect();
    Ok(FoldAssignment { k, by_patient })
}

pub fn split_cv(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    split_patients(&manifest.patients(), k, seed)
}

/// Synthetic nodule description. Lengths are in mm on a 1 mm grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub base_radius: f64,
    /// mm³/day; negative values shrink the nodule.
    pub growth_rate: f64,
    /// Relative semi-axis lengths; rescaled to unit product so the volume
    /// stays that of a sphere of `base_radius`.
    pub anisotropy: [f64; 3],
    pub texture_seed: u64,
    /// Standard deviation of background noise, HU.
    pub background_noise_sd: f64,
    /// Offset of the nodule center from the cube center, voxels.
    pub center_jitter: [f64; 3],
    /// Mean nodule attenuation, HU.
    pub nodule_hu: f64,
    /// Added to the target image inside the target mask, normalized units.
    #[serde(default)]
    pub target_shift: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            base_radius: 6.0,
            growth_rate: 2.0,
            anisotropy: [1.0; 3],
            texture_seed: 0,
            background_noise_sd: 20.0,
            center_jitter: [0.0; 3],
            nodule_hu: 0.0,
            target_shift: 0.0,
        }
    }
}

pub const BACKGROUND_HU: f64 = -850.0;
pub const SYNTH_MARGIN: f64 = 2.0;
/// Shrinking stops at this fraction of the baseline volume.
pub const MIN_VOLUME_FRACTION: f64 = 0.125;
const TEXTURE_HU: f64 = 40.0;
/// Width of the soft image boundary, mm.
const EDGE_MM: f64 = 1.0;

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_radius > 0.0) {
            return Err(Error::invalid("base_radius must be positive"));
        }
        if self.anisotropy.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("anisotropy components must be positive"));
        }
        if !(self.background_noise_sd >= 0.0) || !self.growth_rate.is_finite() {
            return Err(Error::invalid("bad noise or growth rate"));
        }
        Ok(())
    }

    pub fn semi_axes(&self) -> [f64; 3] {
        let norm = self.anisotropy.iter().product::<f64>().cbrt();
        self.anisotropy.map(|a| self.base_radius * a / norm)
    }

    pub fn base_volume(&self) -> f64 {
        4.0 / 3.0 * PI * self.base_radius.powi(3)
    }

    /// Analytic nodule volume after `t_day` days.
    pub fn volume_at(&self, t_day: i64) -> f64 {
        let v0 = self.base_volume();
        (v0 + self.growth_rate * t_day as f64).max(MIN_VOLUME_FRACTION * v0)
    }

    /// Linear scale factor of the ellipsoid after `t_day` days.
    pub fn scale_at(&self, t_day: i64) -> f64 {
        if self.growth_rate == 0.0 {
            return 1.0;
        }
        (self.volume_at(t_day) / self.base_volume()).cbrt()
    }

    fn center(&self, cube: usize) -> [f64; 3] {
        let mid = (cube as f64 - 1.0) / 2.0;
        self.center_jitter.map(|j| mid + j)
    }
}

/// Normalized ellipsoidal radius of voxel `p`.
fn rho(p: [f64; 3], c: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3).map(|k| ((p[k] - c[k]) / axes[k]).powi(2)).sum::<f64>().sqrt()
}

fn check_margin(params: &SynthParams, cube: usize, scale: f64) -> Result<()> {
    let c = params.center(cube);
    let axes = params.semi_axes();
    let hi = cube as f64 - 1.0 - SYNTH_MARGIN;
    for k in 0..3 {
        let r = axes[k] * scale.max(1.0);
        if c[k] - r < SYNTH_MARGIN || c[k] + r > hi {
            return Err(Error::invalid(format!(
                "nodule (extent {:.2} about {:.2} on axis {k}) leaves the {SYNTH_MARGIN}-voxel margin of a {cube}³ cube",
                r, c[k]
            )));
        }
    }
    Ok(())
}

/// Baseline scan: soft-edged textured ellipsoid over noisy parenchyma.
pub fn synth_baseline(params: &SynthParams, cube: usize) -> Result<(Volume, SegMask)> {
    params.validate()?;
    check_margin(params, cube, 1.0)?;
    let c = params.center(cube);
    let axes = params.semi_axes();
    let mean_axis = axes.iter().sum::<f64>() / 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(params.texture_seed);
    let waves: Vec<([f64; 3], f64)> = (0..3)
        .map(|_| {
            let k = [0, 1, 2].map(|_| rng.random_range(-0.9..0.9));
            (k, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let noise = Normal::new(0.0, params.background_noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let n = cube;
    let mut data = Vec::with_capacity(n * n * n);
    let mut mask = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let r = rho(p, c, axes);
                let bg = BACKGROUND_HU + if params.background_noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let tex: f64 = waves
                    .iter()
                    .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin())
                    .sum::<f64>()
                    * TEXTURE_HU
                    / 3.0;
                let w = ((1.0 - r) * mean_axis / EDGE_MM + 0.5).clamp(0.0, 1.0);
                let hu = bg + w * (params.nodule_hu + tex - bg);
                data.push(normalize_hu(hu)? as f32);
                mask.push(if r <= 1.0 { 1.0 } else { 0.0 });
            }
        }
    }
    let vol = Volume::new([n; 3], data, [1.0; 3])?;
    let mask = SegMask::new(Volume::new([n; 3], mask, [1.0; 3])?)?;
    Ok((vol, mask))
}

/// The radial field that scales the ellipsoid by `s`: normalized radius `ρ`
/// samples from `f(ρ)`, with `f(ρ) = ρ/s` inside, a linear blend out to
/// `ρ_out = max(1, s) + 1`, and the identity beyond.
pub fn synth_field(params: &SynthParams, t_day: i64, cube: usize) -> DisplacementField {
    let s = params.scale_at(t_day);
    if s == 1.0 {
        return DisplacementField::zeros([cube; 3]);
    }
    let c = params.center(cube);
    let axes = params.semi_axes();
    let outer = s.max(1.0) + 1.0;
    DisplacementField::from_fn([cube; 3], |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let r = rho(p, c, axes);
        let ratio = if r <= s {
            1.0 / s
        } else if r < outer {
            let f = 1.0 + (r - s) * (outer - 1.0) / (outer - s);
            f / r
        } else {
            1.0
        };
        [0, 1, 2].map(|k| (p[k] - c[k]) * (ratio - 1.0))
    })
}

/// One follow-up scan at `t_day` with the field that produced it. Image and
/// mask are both the baseline pulled through the analytic field; the mask is
/// thresholded at 0.5 so it stays hard.
pub fn synth_timepoint(
    params: &SynthParams,
    baseline: &Volume,
    baseline_mask: &SegMask,
    t_day: i64,
    cube: usize,
) -> Result<(Volume, SegMask, DisplacementField)> {
    check_margin(params, cube, params.scale_at(t_day))?;
    let field = synth_field(params, t_day, cube);
    let (mut target, mask) = if params.scale_at(t_day) == 1.0 {
        (baseline.clone(), baseline_mask.clone())
    } else {
        let w = WarpFunction::new(field.clone());
        (w.apply(baseline)?, w.apply_mask(baseline_mask)?.threshold(0.5))
    };
    if params.target_shift != 0.0 {
        let top = 1.0 - 1.0 / 128.0;
        for (v, &m) in target.data_mut().iter_mut().zip(mask.data()) {
            if m >= 0.5 {
                *v = (*v as f64 + params.target_shift).clamp(-1.0, top) as f32;
            }
        }
    }
    Ok((target, mask, field))
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub pair: FollowUpPair,
    pub field: DisplacementField,
}

pub fn synth_pair(params: &SynthParams, t_day: i64, cube: usize) -> Result<SynthPair> {
    if t_day < 0 {
        return Err(Error::invalid(format!("negative interval {t_day}")));
    }
    let (baseline, baseline_mask) = synth_baseline(params, cube)?;
    let (target, target_mask, field) = synth_timepoint(params, &baseline, &baseline_mask, t_day, cube)?;
    Ok(SynthPair {
        pair: FollowUpPair {
            patient_id: "synthetic".into(),
            nodule_id: format!("seed{}", params.texture_seed),
            baseline,
            baseline_mask,
            target,
            target_mask,
            t_day,
        },
        field,
    })
}

/// Sampling ranges for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub cube: usize,
    pub radius: (f64, f64),
    pub anisotropy_spread: f64,
    pub pd_growth: (f64, f64),
    pub stable_growth: (f64, f64),
    /// Days between consecutive scans.
    pub gap_days: (i64, i64),
    pub timepoints: usize,
    pub noise_sd: f64,
    pub jitter: f64,
    /// Attenuation of progressing (solid) and stable (ground-glass) nodules.
    pub pd_hu: f64,
    pub stable_hu: f64,
    pub max_nodules_per_patient: usize,
}

impl CohortSpec {
    /// Fast-growing versus frozen nodules on a small cube.
    pub fn easy(cube: usize) -> Self {
        let k = cube as f64 / 16.0;
        CohortSpec {
            cube,
            radius: (2.2 * k, 2.6 * k),
            anisotropy_spread: 0.1,
            pd_growth: (2.0 * k.powi(3), 3.0 * k.powi(3)),
            stable_growth: (0.0, 0.0),
            gap_days: (60, 90),
            timepoints: 2,
            noise_sd: 15.0,
            jitter: 0.5,
            pd_hu: 0.0,
            stable_hu: -500.0,
            max_nodules_per_patient: 2,
        }
    }

    /// Full-size cubes, three scans, slow growth for stable nodules.
    pub fn standard() -> Self {
        CohortSpec {
            cube: 48,
            radius: (4.0, 7.0),
            anisotropy_spread: 0.2,
            pd_growth: (1.5, 4.0),
            stable_growth: (0.0, 0.2),
            gap_days: (60, 180),
            timepoints: 3,
            noise_sd: 25.0,
            jitter: 2.0,
            pd_hu: 0.0,
            stable_hu: -500.0,
            max_nodules_per_patient: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timepoints < 2 {
            return Err(Error::invalid("a nodule needs at least two scans"));
        }
        if self.gap_days.0 < 1 || self.gap_days.1 < self.gap_days.0 {
            return Err(Error::invalid("gap_days must be an ascending range of positive days"));
        }
        if self.max_nodules_per_patient < 1 {
            return Err(Error::invalid("max_nodules_per_patient must be >= 1"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone)]
pub struct SynthNodule {
    pub patient_id: String,
    pub nodule_id: String,
    pub is_pd: bool,
    pub params: SynthParams,
    pub days: Vec<i64>,
    pub scans: Vec<(Volume, SegMask)>,
    /// Field from the first scan to each scan.
    pub fields: Vec<DisplacementField>,
}

impl SynthNodule {
    pub fn pairs(&self) -> Vec<FollowUpPair> {
        let mut out = Vec::new();
        for i in 0..self.scans.len() {
            for j in i + 1..self.scans.len() {
                out.push(FollowUpPair {
                    patient_id: self.patient_id.clone(),
                    nodule_id: self.nodule_id.clone(),
                    baseline: self.scans[i].0.clone(),
                    baseline_mask: self.scans[i].1.clone(),
                    target: self.scans[j].0.clone(),
                    target_mask: self.scans[j].1.clone(),
                    t_day: self.days[j] - self.days[i],
                });
            }
        }
        out
    }

    /// Label from the rasterized masks under the progression criterion.
    pub fn measured_pd(&self) -> Result<bool> {
        let mut assessments = Vec::new();
        for i in 0..self.scans.len() {
            for j in i + 1..self.scans.len() {
                let t = (self.days[j] - self.days[i]) as f64;
                assessments.push(assess_masks(&self.scans[i].1, &self.scans[j].1, t)?);
            }
        }
        Ok(classify_pd_nodule(&assessments))
    }
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub spec: CohortSpec,
    pub seed: u64,
    pub nodules: Vec<SynthNodule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthNodule {
    pub patient_id: String,
    pub nodule_id: String,
    pub is_pd: bool,
    pub params: SynthParams,
    pub days: Vec<i64>,
    pub field_paths: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: CohortSpec,
    pub nodules: Vec<GroundTruthNodule>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const MAX_RESAMPLES: usize = 100;

/// Generates `n_nodules` nodules, `round(n·pd_fraction)` of them progressing.
/// Each nodule is resampled until its measured label matches its target.
pub fn synth_cohort(spec: &CohortSpec, n_nodules: usize, pd_fraction: f64, seed: u64) -> Result<SynthCohort> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&pd_fraction) {
        return Err(Error::invalid(format!("pd_fraction {pd_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pd = (n_nodules as f64 * pd_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..n_nodules).map(|i| i < n_pd).collect();
    labels.shuffle(&mut rng);

    let mut nodules = Vec::with_capacity(n_nodules);
    let mut patient = 0usize;
    let mut left_for_patient = 0usize;
    let mut count_in_patient = 0usize;
    for (i, &is_pd) in labels.iter().enumerate() {
        if left_for_patient == 0 {
            patient += 1;
            left_for_patient = rng.random_range(1..=spec.max_nodules_per_patient);
            count_in_patient = 0;
        }
        left_for_patient -= 1;
        count_in_patient += 1;
        let mut attempt = 0;
        let nodule = loop {
            attempt += 1;
            if attempt > MAX_RESAMPLES {
                return Err(Error::invalid(format!("could not realize nodule {i} with label pd={is_pd}")));
            }
            let params = SynthParams {
                base_radius: uniform(&mut rng, spec.radius),
                growth_rate: uniform(&mut rng, if is_pd { spec.pd_growth } else { spec.stable_growth }),
                anisotropy: [0, 1, 2].map(|_| 1.0 + uniform(&mut rng, (-spec.anisotropy_spread, spec.anisotropy_spread))),
                texture_seed: rng.random(),
                background_noise_sd: spec.noise_sd,
                center_jitter: [0, 1, 2].map(|_| uniform(&mut rng, (-spec.jitter, spec.jitter))),
                nodule_hu: if is_pd { spec.pd_hu } else { spec.stable_hu },
                target_shift: 0.0,
            };
            let mut days = vec![0i64];
            for _ in 1..spec.timepoints {
                let gap = rng.random_range(spec.gap_days.0..=spec.gap_days.1);
                days.push(days.last().unwrap() + gap);
            }
            let Ok(base) = synth_baseline(&params, spec.cube) else { continue };
            let mut scans = vec![base];
            let mut fields = vec![DisplacementField::zeros([spec.cube; 3])];
            let mut ok = true;
            for &d in &days[1..] {
                match synth_timepoint(&params, &scans[0].0, &scans[0].1, d, spec.cube) {
                    Ok((v, m, f)) => {
                        scans.push((v, m));
                        fields.push(f);
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let n = SynthNodule {
                patient_id: format!("P{patient:03}"),
                nodule_id: format!("P{patient:03}N{count_in_patient}"),
                is_pd,
                params,
                days,
                scans,
                fields,
            };
            if n.measured_pd()? == is_pd {
                break n;
            }
        };
        nodules.push(nodule);
    }
    Ok(SynthCohort { spec: spec.clone(), seed, nodules })
}

impl SynthCohort {
    pub fn pairs(&self) -> Vec<FollowUpPair> {
        self.nodules.iter().flat_map(SynthNodule::pairs).collect()
    }

    pub fn labels(&self) -> IndexMap<String, bool> {
        self.nodules.iter().map(|n| (n.nodule_id.clone(), n.is_pd)).collect()
    }

    /// Writes VG01 scans and fields, `manifest.csv` and `ground_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for n in &self.nodules {
            let mut field_paths = Vec::new();
            for (k, ((vol, mask), field)) in n.scans.iter().zip(&n.fields).enumerate() {
                let stem = format!("{}_t{k}", n.nodule_id);
                let (vp, mp, fp) = (format!("{stem}.vg01"), format!("{stem}_mask.vg01"), format!("{stem}_field.vg01"));
                save_volume(&dir.join(&vp), vol)?;
                save_mask(&dir.join(&mp), mask)?;
                field.save(&dir.join(&fp))?;
                rows.push(ManifestRow {
                    patient_id: n.patient_id.clone(),
                    nodule_id: n.nodule_id.clone(),
                    timepoint_index: k as u32,
                    days_from_first: n.days[k],
                    volume_path: vp,
                    mask_path: mp,
                });
                field_paths.push(fp);
            }
            truth.push(GroundTruthNodule {
                patient_id: n.patient_id.clone(),
                nodule_id: n.nodule_id.clone(),
                is_pd: n.is_pd,
                params: n.params.clone(),
                days: n.days.clone(),
                field_paths,
            });
        }
        let manifest = Manifest::new(rows, dir)?;
        manifest.save(&dir.join(MANIFEST_FILE))?;
        let gt = GroundTruth { seed: self.seed, spec: self.spec.clone(), nodules: truth };
        fs::write(dir.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(&gt)?)?;
        Ok(manifest)
    }
}
