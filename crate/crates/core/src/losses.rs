//! Training objectives for the warp and texture networks.
//!
//! Every loss is built from graph operators so its gradient comes from the
//! tape. Similarity measures are interchangeable behind [`Similarity`] and
//! can be looked up by name with [`similarity_by_name`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::warp::{spatial_gradient_var, warp_var};

pub const NCC_EPS: f64 = 1e-5;
pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_NCC_WINDOW: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// segmentation (Dice) weight
    pub seg: f64,
    /// displacement smoothness weight
    pub smooth: f64,
    /// zero-interval warp regularizer weight
    pub warp_reg: f64,
    /// zero-interval residual regularizer weight
    pub residual_reg: f64,
    /// extra similarity weight inside the target mask: `1 + alpha·s_t`
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 0.5, smooth: 10.0, warp_reg: 1.0, residual_reg: 1.0, alpha: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("seg", self.seg),
            ("smooth", self.smooth),
            ("warp_reg", self.warp_reg),
            ("residual_reg", self.residual_reg),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("loss weight {name} must be > 0, got {v}")));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-step record, one JSON line each.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub sim: f64,
    pub seg: f64,
    pub smooth: f64,
    pub reg: f64,
    pub total: f64,
}

/// Optional per-voxel emphasis: weight `1 + alpha·mask(p)`.
#[derive(Debug, Clone, Copy)]
pub struct Emphasis {
    pub mask: Var,
    pub alpha: f64,
}

fn emphasis_weights(g: &Graph, emphasis: Option<Emphasis>) -> Option<(Var, f64)> {
    emphasis.map(|e| {
        let w = g.value(e.mask).map(|m| 1.0 + e.alpha * m);
        let total = w.sum();
        (g.constant(w), total)
    })
}

/// Mean of `per_voxel`, optionally emphasis-weighted and renormalized.
fn weighted_mean(g: &Graph, per_voxel: Var, emphasis: Option<Emphasis>) -> Result<Var> {
    match emphasis_weights(g, emphasis) {
        None => Ok(g.mean(per_voxel)),
        Some((w, total)) => {
            let num = g.sum(g.mul(per_voxel, w)?);
            let den = g.constant(Tensor::scalar(total));
            g.div(num, den)
        }
    }
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape { op, expected: sa, got: sb });
    }
    Ok(())
}

fn check_emphasis(g: &Graph, op: &'static str, x: Var, emphasis: Option<Emphasis>) -> Result<()> {
    match emphasis {
        Some(e) => check_same(g, op, x, e.mask),
        None => Ok(()),
    }
}

/// Local normalized cross-correlation map over `window³` neighbourhoods.
///
/// Windows are truncated at the borders and statistics use the true voxel
/// count, so the map is exactly invariant to positive affine intensity maps.
pub fn local_ncc(g: &Graph, x: Var, y: Var, window: usize, eps: f64) -> Result<Var> {
    check_same(g, "ncc", x, y)?;
    if window % 2 == 0 {
        return Err(Error::invalid(format!("NCC window must be odd, got {window}")));
    }
    let r = window / 2;
    let count = g.box_sum(g.constant(Tensor::full(&g.shape(x), 1.0)), r)?;
    let sx = g.box_sum(x, r)?;
    let sy = g.box_sum(y, r)?;
    let sxx = g.box_sum(g.square(x), r)?;
    let syy = g.box_sum(g.square(y), r)?;
    let sxy = g.box_sum(g.mul(x, y)?, r)?;

    let cross = g.sub(sxy, g.div(g.mul(sx, sy)?, count)?)?;
    let var_x = g.sub(sxx, g.div(g.square(sx), count)?)?;
    let var_y = g.sub(syy, g.div(g.square(sy), count)?)?;
    let denom = g.sqrt(g.shift(g.mul(var_x, var_y)?, eps))?;
    g.div(cross, denom)
}

/// `1 − mean(local NCC)`; 0 for identical images, 2 for negated ones.
pub fn ncc_loss(g: &Graph, x: Var, y: Var, window: usize, eps: f64, emphasis: Option<Emphasis>) -> Result<Var> {
    check_emphasis(g, "ncc emphasis", x, emphasis)?;
    let cc = local_ncc(g, x, y, window, eps)?;
    let m = weighted_mean(g, cc, emphasis)?;
    Ok(g.shift(g.scale(m, -1.0), 1.0))
}

/// Mean squared error, optionally emphasis-weighted.
pub fn mse_loss(g: &Graph, pred: Var, target: Var, emphasis: Option<Emphasis>) -> Result<Var> {
    check_same(g, "mse", pred, target)?;
    check_emphasis(g, "mse emphasis", pred, emphasis)?;
    let diff = g.sub(pred, target)?;
    weighted_mean(g, g.square(diff), emphasis)
}

/// Soft Dice loss `1 − (2Σ a·b + ε)/(Σ a + Σ b + ε)`.
pub fn dice_loss(g: &Graph, warped: Var, target: Var, eps: f64) -> Result<Var> {
    check_same(g, "dice", warped, target)?;
    let inter = g.sum(g.mul(warped, target)?);
    let num = g.shift(g.scale(inter, 2.0), eps);
    let den = g.shift(g.add(g.sum(warped), g.sum(target))?, eps);
    let ratio = g.div(num, den)?;
    Ok(g.shift(g.scale(ratio, -1.0), 1.0))
}

/// Diffusion regularizer: mean over voxels of the squared norm of the nine
/// forward-difference partials.
pub fn smooth_loss(g: &Graph, field: Var) -> Result<Var> {
    let grads = spatial_gradient_var(g, field)?;
    let voxels: usize = g.shape(field)[1..].iter().product();
    let total = g.sum(g.square(grads));
    g.div(total, g.constant(Tensor::scalar(voxels as f64)))
}

/// Mean of `r₀²`.
pub fn residual_reg_loss(g: &Graph, residual: Var) -> Var {
    g.mean(g.square(residual))
}

/// A similarity loss between a prediction and its target.
pub trait Similarity: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn loss(&self, g: &Graph, pred: Var, target: Var, emphasis: Option<Emphasis>) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ncc {
    pub window: usize,
    pub eps: f64,
}

impl Default for Ncc {
    fn default() -> Self {
        Ncc { window: DEFAULT_NCC_WINDOW, eps: NCC_EPS }
    }
}

impl Similarity for Ncc {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn loss(&self, g: &Graph, pred: Var, target: Var, emphasis: Option<Emphasis>) -> Result<Var> {
        ncc_loss(g, pred, target, self.window, self.eps, emphasis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mse;

impl Similarity for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn loss(&self, g: &Graph, pred: Var, target: Var, emphasis: Option<Emphasis>) -> Result<Var> {
        mse_loss(g, pred, target, emphasis)
    }
}

pub const SIMILARITIES: &[&str] = &["ncc", "mse"];

pub fn similarity_by_name(name: &str, ncc_window: usize) -> Result<Box<dyn Similarity>> {
    match name {
        "ncc" => Ok(Box::new(Ncc { window: ncc_window, eps: NCC_EPS })),
        "mse" => Ok(Box::new(Mse)),
        other => Err(Error::UnknownStrategy {
            kind: "similarity",
            name: other.to_string(),
            available: SIMILARITIES.join(", "),
        }),
    }
}

/// `L_sim(φ₀∘x, x) + L_sim(φ₀∘y, y)` for a zero-interval field `φ₀`.
pub fn warp_reg_loss(g: &Graph, sim: &dyn Similarity, field0: Var, baseline: Var, target: Var) -> Result<Var> {
    let wx = warp_var(g, baseline, field0)?;
    let wy = warp_var(g, target, field0)?;
    let a = sim.loss(g, wx, baseline, None)?;
    let b = sim.loss(g, wy, target, None)?;
    g.add(a, b)
}

/// Scalar terms of the warp objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpTerms<T> {
    pub sim: T,
    pub seg: T,
    pub smooth: T,
    pub reg: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureTerms<T> {
    pub sim: T,
    pub reg: T,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {name} = {v}")))
    }
}

/// `sim + λ1·seg + λ2·smooth + λ3·reg`.
pub fn warpnet_objective(t: WarpTerms<f64>, w: &LossWeights) -> Result<f64> {
    let sim = finite("sim", t.sim)?;
    let seg = finite("seg", t.seg)?;
    let smooth = finite("smooth", t.smooth)?;
    let reg = finite("reg", t.reg)?;
    Ok(sim + w.seg * seg + w.smooth * smooth + w.warp_reg * reg)
}

/// `sim′ + λ1′·reg′`.
pub fn texturenet_objective(t: TextureTerms<f64>, w: &LossWeights) -> Result<f64> {
    Ok(finite("sim", t.sim)? + w.residual_reg * finite("reg", t.reg)?)
}

pub fn warpnet_objective_var(g: &Graph, t: WarpTerms<Var>, w: &LossWeights) -> Result<Var> {
    let total = g.add(t.sim, g.scale(t.seg, w.seg))?;
    let total = g.add(total, g.scale(t.smooth, w.smooth))?;
    g.add(total, g.scale(t.reg, w.warp_reg))
}

pub fn texturenet_objective_var(g: &Graph, t: TextureTerms<Var>, w: &LossWeights) -> Result<Var> {
    g.add(t.sim, g.scale(t.reg, w.residual_reg))
}

impl LossReport {
    pub fn warp(step: usize, t: WarpTerms<f64>, w: &LossWeights) -> Result<Self> {
        let total = warpnet_objective(t, w)?;
        Ok(LossReport { step, sim: t.sim, seg: t.seg, smooth: t.smooth, reg: t.reg, total })
    }

    pub fn texture(step: usize, t: TextureTerms<f64>, w: &LossWeights) -> Result<Self> {
        let total = texturenet_objective(t, w)?;
        Ok(LossReport { step, sim: t.sim, seg: 0.0, smooth: 0.0, reg: t.reg, total })
    }

    pub fn similarity_only(step: usize, sim: f64) -> Result<Self> {
        let sim = finite("sim", sim)?;
        Ok(LossReport { step, sim, total: sim, ..Default::default() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::DisplacementField;

    fn vol(n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, n, n, n], |i| f(i / (n * n), (i / n) % n, i % n))
    }

    fn texture(n: usize) -> Tensor {
        vol(n, |z, y, x| ((z as f64) * 0.7).sin() + ((y as f64) * 1.3).cos() * 0.5 + (x as f64 * 0.37).sin() * (z as f64 * 0.2))
    }

    fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&Graph, Var, Var) -> Result<Var>) -> f64 {
        let g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = f(&g, va, vb).unwrap();
        g.scalar_value(out)
    }

    #[test]
    fn ncc_self_affine_and_negated() {
        let x = texture(8);
        let ncc = |g: &Graph, a, b| ncc_loss(g, a, b, 9, NCC_EPS, None);
        assert!(eval2(&x, &x, ncc).abs() <= 1e-4);
        assert!(eval2(&x, &x.map(|v| 2.0 * v + 3.0), ncc).abs() <= 1e-4);
        assert!((eval2(&x, &x.map(|v| -v), ncc) - 2.0).abs() <= 1e-3);
    }

    #[test]
    fn ncc_constant_window_is_finite() {
        let c = Tensor::full(&[1, 5, 5, 5], 0.3);
        let l = eval2(&c, &c, |g, a, b| ncc_loss(g, a, b, 3, NCC_EPS, None));
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_rejects_even_window_and_shape_mismatch() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 4, 4, 5]));
        assert!(ncc_loss(&g, a, a, 4, NCC_EPS, None).is_err());
        assert!(ncc_loss(&g, a, b, 3, NCC_EPS, None).is_err());
    }

    #[test]
    fn dice_cases() {
        let n = 4;
        let a = vol(n, |z, y, x| if z == 0 && y == 0 && x < 4 { 1.0 } else { 0.0 });
        let b = vol(n, |z, y, x| if z == 0 && y == 0 && x >= 2 || z == 1 && y == 0 && x < 2 { 1.0 } else { 0.0 });
        let c = vol(n, |z, _, _| if z == 3 { 1.0 } else { 0.0 });
        let dice = |g: &Graph, p, q| dice_loss(g, p, q, DICE_EPS);
        assert!(eval2(&a, &a, dice).abs() <= 1e-4);
        assert!((eval2(&a, &c, dice) - 1.0).abs() <= 1e-4);
        assert!((eval2(&a, &b, dice) - 0.5).abs() <= 1e-4);
    }

    #[test]
    fn smooth_of_ramp_and_constant() {
        let ramp = DisplacementField::from_fn([4, 4, 4], |_, _, x| [0.0, 0.0, x as f64]);
        let g = Graph::new();
        let u = g.constant(ramp.tensor().clone());
        assert_eq!(g.scalar_value(smooth_loss(&g, u).unwrap()), 0.75);
        let c = g.constant(DisplacementField::constant([4, 4, 4], [1.0, -2.0, 0.5]).into_tensor());
        assert_eq!(g.scalar_value(smooth_loss(&g, c).unwrap()), 0.0);
    }

    #[test]
    fn mse_and_residual_values() {
        let x = texture(4);
        let mse = |g: &Graph, a, b| mse_loss(g, a, b, None);
        assert_eq!(eval2(&x, &x, mse), 0.0);
        assert!((eval2(&x.map(|v| v + 0.3), &x, mse) - 0.09).abs() < 1e-12);
        let g = Graph::new();
        let r = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert_eq!(g.scalar_value(residual_reg_loss(&g, r)), 0.0);
    }

    #[test]
    fn zero_alpha_emphasis_is_bit_identical() {
        let x = texture(6);
        let y = x.map(|v| (v * 1.7).sin());
        let m = vol(6, |z, y, _| if z > 2 && y < 3 { 1.0 } else { 0.0 });
        for sim in [similarity_by_name("ncc", 5).unwrap(), similarity_by_name("mse", 5).unwrap()] {
            let g = Graph::new();
            let (a, b, mv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(m.clone()));
            let plain = g.scalar_value(sim.loss(&g, a, b, None).unwrap());
            let zero = g.scalar_value(sim.loss(&g, a, b, Some(Emphasis { mask: mv, alpha: 0.0 })).unwrap());
            assert_eq!(plain.to_bits(), zero.to_bits(), "{}", sim.name());
            let heavy = g.scalar_value(sim.loss(&g, a, b, Some(Emphasis { mask: mv, alpha: 4.0 })).unwrap());
            assert_ne!(plain, heavy);
        }
    }

    #[test]
    fn unknown_similarity() {
        assert!(matches!(similarity_by_name("ssim", 9), Err(Error::UnknownStrategy { .. })));
    }

    #[test]
    fn objective_values() {
        let w = LossWeights::default();
        let ones = WarpTerms { sim: 1.0, seg: 1.0, smooth: 1.0, reg: 1.0 };
        assert_eq!(warpnet_objective(ones, &w).unwrap(), 12.5);
        let zeros = WarpTerms { sim: 0.0, seg: 0.0, smooth: 0.0, reg: 0.0 };
        assert_eq!(warpnet_objective(zeros, &w).unwrap(), 0.0);
        let t = texturenet_objective(TextureTerms { sim: 0.2, reg: 0.1 }, &w).unwrap();
        assert!((t - 0.3).abs() < 1e-15);
        let bad = WarpTerms { smooth: f64::NAN, ..ones };
        let err = warpnet_objective(bad, &w).unwrap_err();
        assert!(err.to_string().contains("smooth"));
    }

    #[test]
    fn doubling_reg_weight_doubles_its_share() {
        let t = WarpTerms { sim: 0.3, seg: 0.2, smooth: 0.01, reg: 0.4 };
        let w1 = LossWeights::default();
        let w2 = LossWeights { warp_reg: 2.0, ..w1 };
        let d = warpnet_objective(t, &w2).unwrap() - warpnet_objective(t, &w1).unwrap();
        assert!((d - 0.4).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { seg: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn report_total_matches_weighted_sum() {
        let w = LossWeights::default();
        let t = WarpTerms { sim: 0.25, seg: 0.125, smooth: 0.01, reg: 0.5 };
        let r = LossReport::warp(3, t, &w).unwrap();
        let manual = t.sim + w.seg * t.seg + w.smooth * t.smooth + w.warp_reg * t.reg;
        assert!((r.total - manual).abs() <= 1e-6);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with("{\"step\":3,\"sim\":"));
    }
}
