//! Shared helpers for the integration suites: seeded inputs, a central
//! finite-difference gradient checker, and independent reference
//! implementations used as oracles.
#![allow(dead_code)]

use std::io::Write;

use nofonet::autodiff::{Graph, Tensor, Var};
use nofonet::volgrid::Volume;
use nofonet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Sampling points closer than this to a voxel plane are resampled so the
/// piecewise-linear warp has no kink inside the finite-difference stencil.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Writes one result line straight to stdout so it shows up even when the
/// harness captures `println!`.
pub fn emit(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

pub fn random_dims(rng: &mut impl Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary_tensor(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn random_volume(rng: &mut impl Rng, shape: [usize; 3]) -> Volume {
    Volume::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0))
}

/// Random `[3, D, H, W]` displacement whose sample points `p + u` all stay
/// at least `KINK_MARGIN` away from integer coordinates.
pub fn kink_free_field(rng: &mut impl Rng, dims: [usize; 3], amp: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let idx = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            loop {
                let u: f64 = rng.random_range(-amp..amp);
                let q = idx[c] as f64 + u;
                let frac = q - q.floor();
                if frac > KINK_MARGIN && frac < 1.0 - KINK_MARGIN {
                    data[c * n + i] = u;
                    break;
                }
            }
        }
    }
    Tensor::new(vec![3, dims[0], dims[1], dims[2]], data).unwrap()
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of the scalar `f(x)` at `x0` with central
/// differences of step `FD_STEP` in every coordinate.
pub fn gradient_error(x0: &Tensor, f: &dyn Fn(&Graph, Var) -> Result<Var>) -> f64 {
    let g = Graph::new();
    let x = g.leaf(x0.clone());
    let y = f(&g, x).unwrap();
    let grads = g.backward(y).unwrap();
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));

    let eval = |t: Tensor| {
        let g = Graph::new();
        let x = g.constant(t);
        let y = f(&g, x).unwrap();
        g.scalar_value(y)
    };
    let mut numeric = vec![0.0; x0.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= FD_STEP;
        *slot = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
    }
    rel_err(analytic.data(), &numeric)
}

fn clampi(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Trilinear sample of `vol` at a real-valued point, coordinates clamped
/// into the grid first.
pub fn trilinear_oracle(vol: &Volume, p: [f64; 3]) -> f64 {
    let s = vol.shape();
    let q: Vec<f64> = (0..3).map(|k| p[k].clamp(0.0, (s[k] - 1) as f64)).collect();
    let base: Vec<isize> = q.iter().map(|v| v.floor() as isize).collect();
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let bit = (corner >> (2 - k)) & 1;
            let f = q[k] - base[k] as f64;
            w *= if bit == 1 { f } else { 1.0 - f };
            idx[k] = clampi(base[k] + bit as isize, s[k]);
        }
        if w != 0.0 {
            acc += w * vol.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc
}

/// `out[p] = vol[clamp(p + k)]`.
pub fn shift_oracle(vol: &Volume, k: [isize; 3]) -> Volume {
    let s = vol.shape();
    Volume::from_fn(s, |z, y, x| {
        vol.get(
            clampi(z as isize + k[0], s[0]),
            clampi(y as isize + k[1], s[1]),
            clampi(x as isize + k[2], s[2]),
        )
    })
}

/// Brute-force local NCC mean over truncated `window³` neighbourhoods.
pub fn ncc_oracle(x: &Volume, y: &Volume, window: usize, eps: f64) -> f64 {
    let s = x.shape();
    let r = (window / 2) as isize;
    let mut total = 0.0;
    for z in 0..s[0] {
        for yy in 0..s[1] {
            for xx in 0..s[2] {
                let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (a, b, c) = (z as isize + dz, yy as isize + dy, xx as isize + dx);
                            if a < 0 || b < 0 || c < 0 {
                                continue;
                            }
                            let (a, b, c) = (a as usize, b as usize, c as usize);
                            if a >= s[0] || b >= s[1] || c >= s[2] {
                                continue;
                            }
                            let (u, v) = (x.get(a, b, c) as f64, y.get(a, b, c) as f64);
                            n += 1.0;
                            sx += u;
                            sy += v;
                            sxx += u * u;
                            syy += v * v;
                            sxy += u * v;
                        }
                    }
                }
                let cross = sxy - sx * sy / n;
                let vx = sxx - sx * sx / n;
                let vy = syy - sy * sy / n;
                total += cross / (vx * vy + eps).sqrt();
            }
        }
    }
    total / (s[0] * s[1] * s[2]) as f64
}

/// Dice of two voxel index sets.
pub fn set_dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let na = a.iter().filter(|x| **x).count();
    let nb = b.iter().filter(|x| **x).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}
