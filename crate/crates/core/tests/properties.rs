mod common;

use common::*;
use nofonet::autodiff::{Graph, Tensor};
use nofonet::data::{pair_plan, split_patients, Augmentation, Manifest, ManifestRow};
use nofonet::losses::{dice_loss, ncc_loss, smooth_loss, DICE_EPS, NCC_EPS};
use nofonet::metrics::{classify_pd_pair, dice_coef, g_mean, psnr, PSNR_PEAK};
use nofonet::tem::{discretize_interval, encode, MAX_INTERVAL};
use nofonet::volgrid::{load_volume, normalize_hu, save_volume, SegMask, Volume, HU_MAX, HU_MIN};
use nofonet::warp::{apply_warp, DisplacementField};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [3usize..7, 3usize..7, 3usize..7]
}

fn field_tensor(dims: [usize; 3], seed: u64, amp: f64) -> DisplacementField {
    let mut r = rng(seed);
    DisplacementField::new(uniform_tensor(&mut r, &[3, dims[0], dims[1], dims[2]], -amp, amp)).unwrap()
}

fn mask_from_bits(dims: [usize; 3], bits: &[bool]) -> SegMask {
    let [_, h, w] = dims;
    SegMask::from_fn(dims, |z, y, x| bits[(z * h + y) * w + x])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_matches_trilinear_reference(d in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let vol = random_volume(&mut r, d);
        let field = field_tensor(d, seed ^ 1, 3.0);
        let out = apply_warp(&vol, &field).unwrap();
        let n = d[0] * d[1] * d[2];
        let u = field.tensor().data();
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let i = (z * d[1] + y) * d[2] + x;
                    let p = [z as f64 + u[i], y as f64 + u[n + i], x as f64 + u[2 * n + i]];
                    let want = trilinear_oracle(&vol, p);
                    prop_assert!((out.get(z, y, x) as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_the_image(d in dims(), seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut r = rng(seed);
        let (x, y) = (random_volume(&mut r, d), random_volume(&mut r, d));
        let field = field_tensor(d, seed ^ 2, 2.0);
        let mix = Volume::from_fn(d, |i, j, k| a * x.get(i, j, k) + b * y.get(i, j, k));
        let lhs = apply_warp(&mix, &field).unwrap();
        let (wx, wy) = (apply_warp(&x, &field).unwrap(), apply_warp(&y, &field).unwrap());
        for ((l, p), q) in lhs.data().iter().zip(wx.data()).zip(wy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-5);
        }
    }

    #[test]
    fn ncc_loss_matches_brute_force(d in dims(), seed in any::<u64>(), wide in any::<bool>()) {
        let window = if wide { 5 } else { 3 };
        let mut r = rng(seed);
        let (x, y) = (random_volume(&mut r, d), random_volume(&mut r, d));
        let g = Graph::new();
        let (a, b) = (g.constant(Tensor::from_volume(&x)), g.constant(Tensor::from_volume(&y)));
        let got = g.scalar_value(ncc_loss(&g, a, b, window, NCC_EPS, None).unwrap());
        let want = 1.0 - ncc_oracle(&x, &y, window, NCC_EPS);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn smoothness_ignores_constant_offsets(d in dims(), seed in any::<u64>(), c in prop::array::uniform3(-3.0f64..3.0)) {
        let field = field_tensor(d, seed, 2.0);
        let n = d[0] * d[1] * d[2];
        let shifted = Tensor::from_fn(field.tensor().shape(), |i| field.tensor().data()[i] + c[i / n]);
        let value = |t: &Tensor| {
            let g = Graph::new();
            let u = g.constant(t.clone());
            g.scalar_value(smooth_loss(&g, u).unwrap())
        };
        prop_assert!((value(field.tensor()) - value(&shifted)).abs() < 1e-9);
        prop_assert_eq!(value(&Tensor::full(&[3, d[0], d[1], d[2]], c[0])), 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_matches_sets(d in dims(), seed in any::<u64>(), p in 0.1f64..0.9) {
        let n = d[0] * d[1] * d[2];
        let mut r = rng(seed);
        let a: Vec<bool> = (0..n).map(|_| rand::Rng::random_bool(&mut r, p)).collect();
        let b: Vec<bool> = (0..n).map(|_| rand::Rng::random_bool(&mut r, p)).collect();
        let (ma, mb) = (mask_from_bits(d, &a), mask_from_bits(d, &b));
        let ab = dice_coef(&ma, &mb).unwrap();
        prop_assert_eq!(ab, dice_coef(&mb, &ma).unwrap());
        prop_assert_eq!(ab, set_dice(&a, &b));
        if a.iter().any(|v| *v) && b.iter().any(|v| *v) {
            let g = Graph::new();
            let (x, y) = (g.constant(Tensor::from_mask(&ma)), g.constant(Tensor::from_mask(&mb)));
            let loss = g.scalar_value(dice_loss(&g, x, y, DICE_EPS).unwrap());
            prop_assert!((ab - (1.0 - loss)).abs() < 1e-4);
        }
    }

    #[test]
    fn psnr_decreases_with_error(d in dims(), seed in any::<u64>(), lo in 0.01f32..0.5, extra in 0.01f32..0.5) {
        let mut r = rng(seed);
        let y = random_volume(&mut r, d);
        let noise = random_volume(&mut r, d);
        let near = Volume::from_fn(d, |i, j, k| y.get(i, j, k) + lo * noise.get(i, j, k));
        let far = Volume::from_fn(d, |i, j, k| y.get(i, j, k) + (lo + extra) * noise.get(i, j, k));
        prop_assert!(psnr(&near, &y, PSNR_PEAK).unwrap() > psnr(&far, &y, PSNR_PEAK).unwrap());
    }

    #[test]
    fn vg01_round_trip_is_bit_exact(d in dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let vol = random_volume(&mut r, d);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vg01");
        save_volume(&path, &vol).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.shape(), vol.shape());
        prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn augmentation_preserves_mask_and_values(n in 3usize..7, seed in any::<u64>(), pick in 0usize..48, other in 0usize..48) {
        let all = Augmentation::all();
        let (aug, aug2) = (all[pick], all[other]);
        let mut r = rng(seed);
        let vol = random_volume(&mut r, [n; 3]);
        let bits: Vec<bool> = (0..n * n * n).map(|_| rand::Rng::random_bool(&mut r, 0.3)).collect();
        let mask = mask_from_bits([n; 3], &bits);
        prop_assert_eq!(aug.apply_mask(&mask).unwrap().count(), mask.count());
        let mut before = vol.data().to_vec();
        let mut after = aug.apply(&vol).unwrap().into_data();
        before.sort_by(f32::total_cmp);
        after.sort_by(f32::total_cmp);
        prop_assert_eq!(before, after);
        prop_assert_eq!(aug.inverse().apply(&aug.apply(&vol).unwrap()).unwrap(), vol.clone());
        let composed = aug.compose(aug2).apply(&vol).unwrap();
        prop_assert_eq!(composed, aug.apply(&aug2.apply(&vol).unwrap()).unwrap());
    }
}

proptest! {
    #[test]
    fn pd_is_monotone_in_follow_up_volume(vb in 1.0f64..3000.0, t in 1.0f64..1500.0, f in 0.0f64..5000.0, df in 0.0f64..3000.0) {
        let a = classify_pd_pair(vb, f, t).unwrap();
        let b = classify_pd_pair(vb, f + df, t).unwrap();
        prop_assert!(!a.is_pd || b.is_pd);
    }

    #[test]
    fn g_mean_identities(s in 0.0f64..=1.0, p in 0.0f64..=1.0) {
        let g = g_mean(s, p);
        prop_assert!((g * g - s * p).abs() <= 4.0 * f64::EPSILON);
        prop_assert!(g <= s.max(p) && g >= s.min(p));
    }

    #[test]
    fn hu_normalization_is_bounded_and_monotone(a in HU_MIN..HU_MAX, b in HU_MIN..HU_MAX) {
        let (na, nb) = (normalize_hu(a).unwrap(), normalize_hu(b).unwrap());
        prop_assert!((-1.0..1.0).contains(&na));
        prop_assert!(a > b || na <= nb);
    }

    #[test]
    fn interval_mapping_is_monotone(a in 0i64..2000, b in 0i64..2000) {
        let (ia, ib) = (discretize_interval(a).unwrap(), discretize_interval(b).unwrap());
        prop_assert!(ia <= MAX_INTERVAL);
        prop_assert!(a > b || ia <= ib);
    }

    #[test]
    fn temporal_codes_are_bounded(t in 0u32..=MAX_INTERVAL, d in 2usize..80) {
        let code = encode(t, d).unwrap();
        prop_assert_eq!(code.d_fm(), d);
        prop_assert!(code.values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn split_is_a_balanced_partition(n in 5usize..60, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("P{i:03}")).collect();
        let folds = split_patients(&ids, k, seed).unwrap();
        let sizes = folds.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for id in &ids {
            let f = folds.fold_of(id).unwrap();
            prop_assert_eq!((0..k).filter(|&j| folds.patients_in(j).contains(&id.as_str())).count(), 1);
            prop_assert!(f < k);
        }
        prop_assert_eq!(split_patients(&ids, k, seed).unwrap().fold_sizes(), sizes);
    }

    #[test]
    fn pair_count_is_sum_of_binomials(scans in prop::collection::vec(2usize..6, 1..8)) {
        let mut rows = Vec::new();
        for (i, &m) in scans.iter().enumerate() {
            for t in 0..m {
                rows.push(ManifestRow {
                    patient_id: format!("P{}", i / 2),
                    nodule_id: format!("N{i}"),
                    timepoint_index: t as u32,
                    days_from_first: 45 * t as i64,
                    volume_path: format!("n{i}_t{t}.vg01"),
                    mask_path: format!("n{i}_t{t}_mask.vg01"),
                });
            }
        }
        let plan = pair_plan(&Manifest::new(rows, ".").unwrap()).unwrap();
        prop_assert_eq!(plan.len(), scans.iter().map(|m| m * (m - 1) / 2).sum::<usize>());
        prop_assert!(plan.iter().all(|p| p.base_timepoint < p.follow_timepoint && p.t_day > 0));
    }
}
