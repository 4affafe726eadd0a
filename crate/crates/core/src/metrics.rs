//! Image quality, overlap, progression criterion and classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NoFoNet;
use crate::volgrid::{mask_volume_mm3, SegMask, Volume};

/// Peak-to-peak range of normalized intensities.
pub const PSNR_PEAK: f64 = 2.0;
/// Reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Growth-rate threshold, mm³/day.
pub const AVGR_THRESHOLD: f64 = 1.0;
/// Absolute growth threshold, mm³.
pub const VD_THRESHOLD: f64 = 200.0;
/// Relative growth threshold, fraction of the baseline volume.
pub const RVD_THRESHOLD: f64 = 0.5;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn check_shapes(a: [usize; 3], b: [usize; 3], op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op, expected: a.to_vec(), got: b.to_vec() });
    }
    Ok(())
}

pub fn psnr(x: &Volume, y: &Volume, peak: f64) -> Result<f64> {
    check_shapes(x.shape(), y.shape(), "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// PSNR restricted to voxels where `mask >= 0.5`.
pub fn psnr_masked(x: &Volume, y: &Volume, mask: &SegMask, peak: f64) -> Result<f64> {
    check_shapes(x.shape(), y.shape(), "psnr_masked")?;
    check_shapes(x.shape(), mask.shape(), "psnr_masked mask")?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((&a, &b), &m) in x.data().iter().zip(y.data()).zip(mask.data()) {
        if m >= 0.5 {
            sum += (a as f64 - b as f64).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("psnr_masked: mask is empty"));
    }
    Ok(psnr_from_mse(sum / count as f64, peak))
}

/// Set Dice `2|A∩B|/(|A|+|B|)` after thresholding both masks at 0.5.
/// Two empty masks agree perfectly.
pub fn dice_coef(a: &SegMask, b: &SegMask) -> Result<f64> {
    check_shapes(a.shape(), b.shape(), "dice_coef")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAssessment {
    pub v_base: f64,
    pub v_follow: f64,
    pub t_days: f64,
    pub avgr: f64,
    pub vd: f64,
    pub rvd: f64,
    pub is_pd: bool,
}

/// Applies the progression criterion to one follow-up pair. Growth is
/// `v_follow − v_base`, so positive numbers mean the nodule grew.
pub fn classify_pd_pair(v_base: f64, v_follow: f64, t_days: f64) -> Result<PairAssessment> {
    if !(t_days > 0.0) {
        return Err(Error::invalid(format!("interval must be positive, got {t_days}")));
    }
    if !(v_base > 0.0) {
        return Err(Error::invalid(format!("baseline volume must be positive, got {v_base}")));
    }
    if !v_follow.is_finite() || v_follow < 0.0 {
        return Err(Error::invalid(format!("bad follow-up volume {v_follow}")));
    }
    let vd = v_follow - v_base;
    let avgr = vd / t_days;
    let rvd = vd / v_base;
    let is_pd = avgr >= AVGR_THRESHOLD || (vd >= VD_THRESHOLD && rvd >= RVD_THRESHOLD);
    Ok(PairAssessment { v_base, v_follow, t_days, avgr, vd, rvd, is_pd })
}

/// A nodule progresses if any of its pairs does.
pub fn classify_pd_nodule(assessments: &[PairAssessment]) -> bool {
    assessments.iter().any(|a| a.is_pd)
}

/// Pair assessment straight from two hard masks.
pub fn assess_masks(base: &SegMask, follow: &SegMask, t_days: f64) -> Result<PairAssessment> {
    classify_pd_pair(mask_volume_mm3(base)?, mask_volume_mm3(follow)?, t_days)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(predictions: &[bool], labels: &[bool]) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape {
                op: "confusion",
                expected: vec![labels.len()],
                got: vec![predictions.len()],
            });
        }
        let mut c = Confusion::default();
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn report(self) -> Result<ClassificationReport> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return Err(Error::invalid(format!(
                "g-mean undefined: {pos} positive and {neg} negative labels"
            )));
        }
        let sensitivity = self.tp as f64 / pos as f64;
        let specificity = self.tn as f64 / neg as f64;
        Ok(ClassificationReport { counts: self, sensitivity, specificity, g_mean: g_mean(sensitivity, specificity) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub counts: Confusion,
    pub sensitivity: f64,
    pub specificity: f64,
    pub g_mean: f64,
}

pub fn g_mean(sensitivity: f64, specificity: f64) -> f64 {
    (sensitivity * specificity).sqrt()
}

pub fn classification_report(predictions: &[bool], labels: &[bool]) -> Result<ClassificationReport> {
    Confusion::tally(predictions, labels)?.report()
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub t_day: i64,
    pub t_itv: u32,
    pub volume_mm3: f64,
    pub warped_mask: SegMask,
    pub predicted: Volume,
}

/// Predicted nodule volume at each requested interval.
pub fn growth_curve(baseline: &Volume, mask: &SegMask, t_days: &[i64], model: &NoFoNet) -> Result<Vec<CurvePoint>> {
    if t_days.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("t_days must be ascending"));
    }
    t_days
        .iter()
        .map(|&t| {
            let p = model.predict(baseline, mask, t)?;
            let hard = p.warped_mask.threshold(0.5);
            Ok(CurvePoint {
                t_day: t,
                t_itv: p.t_itv,
                volume_mm3: mask_volume_mm3(&hard)?,
                warped_mask: hard,
                predicted: p.predicted,
            })
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of length >= 2"));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f32) -> Volume {
        Volume::filled([4, 4, 4], v)
    }

    #[test]
    fn psnr_values() {
        let a = constant(0.0);
        assert!((psnr(&a, &constant(1.0), PSNR_PEAK).unwrap() - 6.0206).abs() < 1e-4);
        assert!((psnr(&a, &constant(0.2), PSNR_PEAK).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a, PSNR_PEAK).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = constant(0.0);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let p = psnr(&a, &constant(k as f32 * 0.05), PSNR_PEAK).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn masked_psnr_ignores_outside() {
        let a = constant(0.0);
        let mut b = constant(5.0);
        let m = SegMask::from_fn([4, 4, 4], |z, _, _| z == 0);
        for i in 0..16 {
            b.data_mut()[i] = 1.0;
        }
        assert!((psnr_masked(&a, &b, &m, PSNR_PEAK).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr_masked(&a, &b, &SegMask::empty([4, 4, 4]), PSNR_PEAK).is_err());
    }

    #[test]
    fn dice_coefficient_cases() {
        let a = SegMask::from_fn([4, 4, 4], |z, _, _| z < 2);
        let b = SegMask::from_fn([4, 4, 4], |z, _, _| z >= 2);
        assert_eq!(dice_coef(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_coef(&a, &b).unwrap(), 0.0);
        let e = SegMask::empty([4, 4, 4]);
        assert_eq!(dice_coef(&e, &e).unwrap(), 1.0);
        assert!(dice_coef(&a, &SegMask::empty([4, 4, 5])).is_err());
    }

    #[test]
    fn pd_truth_table() {
        let a = classify_pd_pair(100.0, 400.0, 200.0).unwrap();
        assert_eq!(a.avgr, 1.5);
        assert!(a.is_pd);
        let b = classify_pd_pair(300.0, 550.0, 400.0).unwrap();
        assert_eq!(b.avgr, 0.625);
        assert_eq!(b.vd, 250.0);
        assert!((b.rvd - 0.8333333).abs() < 1e-6);
        assert!(b.is_pd);
        let c = classify_pd_pair(100.0, 120.0, 100.0).unwrap();
        assert!((c.avgr - 0.2).abs() < 1e-12);
        assert_eq!(c.vd, 20.0);
        assert!(!c.is_pd);
        assert!(classify_pd_pair(100.0, 120.0, 0.0).is_err());
        assert!(classify_pd_pair(0.0, 120.0, 10.0).is_err());
        assert!(classify_pd_nodule(&[c, b]));
        assert!(!classify_pd_nodule(&[c]));
    }

    #[test]
    fn report_identities() {
        let r = classification_report(&[true, true, false, false, true], &[true, false, false, true, true]).unwrap();
        assert_eq!(r.counts, Confusion { tp: 2, fp: 1, tn: 1, fn_: 1 });
        assert!((r.sensitivity - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.specificity, 0.5);
        let perfect = classification_report(&[true, false], &[true, false]).unwrap();
        assert_eq!((perfect.sensitivity, perfect.specificity, perfect.g_mean), (1.0, 1.0, 1.0));
        assert!(classification_report(&[true], &[true]).is_err());
        assert!(classification_report(&[true], &[true, false]).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }
}
