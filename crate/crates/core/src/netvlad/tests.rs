use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ghostnet::Layer;
use crate::tensor::gradcheck::grad_check;
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vlad(k: usize, d: usize, alpha: f64, r: &mut ChaCha8Rng) -> NetVlad<f64> {
    let centers: Vec<f64> = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    NetVlad::from_centers(centers, k, d, alpha).unwrap()
}

/// Elementwise evaluation straight from the definition.
fn brute_force(map: &Tensor<f64>, v: &NetVlad<f64>) -> Vec<f64> {
    let (k, d, p) = (v.clusters, v.dim, map.plane());
    let xs: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|j| map.data()[j * p + i]).collect();
            let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            x.iter().map(|a| a / n).collect()
        })
        .collect();
    let w = v.w.data();
    let b = v.b.data();
    let c = v.centers.data();
    let mut mat = vec![vec![0.0; d]; k];
    for x in &xs {
        let e: Vec<f64> = (0..k)
            .map(|kk| ((0..d).map(|j| w[kk * d + j] * x[j]).sum::<f64>() + b[kk]).exp())
            .collect();
        let z: f64 = e.iter().sum();
        for kk in 0..k {
            for j in 0..d {
                mat[kk][j] += e[kk] / z * (x[j] - c[kk * d + j]);
            }
        }
    }
    let mut flat = Vec::new();
    for col in &mat {
        let n = col.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        flat.extend(col.iter().map(|a| a / n));
    }
    let n = flat.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    flat.iter().map(|a| a / n).collect()
}

#[test]
fn single_cluster_assigns_everything() {
    let v = NetVlad::<f64>::from_centers(vec![0.3, -0.2], 1, 2, 5.0).unwrap();
    assert_eq!(v.soft_assign(&[1.0, 0.0]), vec![1.0]);
}

#[test]
fn equidistant_descriptor_splits_evenly() {
    let v = NetVlad::<f64>::from_centers(vec![1.0, 0.0, -1.0, 0.0], 2, 2, 3.0).unwrap();
    let a = v.soft_assign(&[0.0, 1.0]);
    assert!((a[0] - 0.5).abs() < 1e-15 && (a[1] - 0.5).abs() < 1e-15);
}

#[test]
fn large_alpha_picks_nearest() {
    // Squared distances 0.25 and 0.35.
    let c = vec![0.5, 0.0, 0.0, 0.35f64.sqrt()];
    let v = NetVlad::<f64>::from_centers(c, 2, 2, 1000.0).unwrap();
    let a = v.soft_assign(&[0.0, 0.0]);
    assert!(a[0] > 0.999, "{a:?}");
}

#[test]
fn init_matches_distance_softmax() {
    let mut r = rng(1);
    let v = random_vlad(4, 3, 2.5, &mut r);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = v
            .centers
            .data()
            .chunks(3)
            .map(|c| -2.5 * c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .collect();
        let want = crate::tensor::softmax_rows(&neg, 4);
        let got = v.soft_assign(&x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_descriptor_single_zero_center() {
    let v = NetVlad::<f64>::from_centers(vec![0.0; 3], 1, 3, 1.0).unwrap();
    let map = Tensor::new([1, 3, 1, 1], vec![2.0, -1.0, 2.0]).unwrap();
    let y = v.infer(&map).unwrap();
    let want = [2.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0];
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn descriptors_on_center_give_zero_vector() {
    let c = vec![1.0, 0.0, 0.0, 1.0];
    let v = NetVlad::<f64>::from_centers(c, 2, 2, 1e4).unwrap();
    let map = Tensor::from_fn([1, 2, 2, 2], |[_, ch, _, _]| if ch == 0 { 3.0 } else { 0.0 });
    let y = v.infer(&map).unwrap();
    assert!(y.data().iter().all(|a| a.abs() < 1e-9 && a.is_finite()));
}

#[test]
fn matches_brute_force() {
    let mut r = rng(2);
    for _ in 0..10 {
        let (k, d) = (r.random_range(1..=4), r.random_range(1..=8));
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let v = random_vlad(k, d, r.random_range(0.5..20.0), &mut r);
        let map = Tensor::<f64>::randn([1, d, h, w], 1.0, &mut r);
        let got = v.infer(&map).unwrap();
        let want = brute_force(&map, &v);
        let diff = got
            .data()
            .iter()
            .zip(&want)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-12, "diff {diff}");
    }
    let v = random_vlad(3, 4, 4.0, &mut r);
    let map = Tensor::<f64>::randn([1, 4, 2, 3], 1.0, &mut r);
    let want = brute_force(&map, &v);
    let got = v.infer(&map).unwrap();
    let norm: f64 = got.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert_eq!(got.len(), want.len());
}

#[test]
fn batch_items_are_independent() {
    let mut r = rng(3);
    let v = random_vlad(3, 5, 3.0, &mut r);
    let a = Tensor::<f64>::randn([1, 5, 2, 2], 1.0, &mut r);
    let b = Tensor::<f64>::randn([1, 5, 2, 2], 1.0, &mut r);
    let both = Tensor::stack(&[&a, &b]).unwrap();
    let y = v.infer(&both).unwrap();
    assert_eq!(y.item(0), v.infer(&a).unwrap().data());
    assert_eq!(y.item(1), v.infer(&b).unwrap().data());
}

#[test]
fn cluster_permutation_permutes_blocks() {
    let mut r = rng(4);
    let (k, d) = (3, 4);
    let v = random_vlad(k, d, 3.0, &mut r);
    let perm = [2usize, 0, 1];
    let permute = |t: &[f64], width: usize| -> Vec<f64> {
        perm.iter()
            .flat_map(|&p| t[p * width..(p + 1) * width].to_vec())
            .collect()
    };
    let vp = NetVlad::from_parts(
        Tensor::new([1, 1, k, d], permute(v.centers.data(), d)).unwrap(),
        Tensor::new([1, 1, k, d], permute(v.w.data(), d)).unwrap(),
        Tensor::new([1, 1, 1, k], permute(v.b.data(), 1)).unwrap(),
    )
    .unwrap();
    let map = Tensor::<f64>::randn([1, d, 3, 2], 1.0, &mut r);
    let y = v.infer(&map).unwrap();
    let yp = vp.infer(&map).unwrap();
    let expect = permute(y.data(), d);
    for (a, b) in yp.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(5);
    let (k, d) = (3, 4);
    let base = random_vlad(k, d, 2.0, &mut r);
    let map = Tensor::<f64>::randn([2, d, 2, 2], 1.0, &mut r);
    let weights: Vec<f64> = (0..2 * k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |v: &NetVlad<f64>, m: &Tensor<f64>| -> f64 {
        v.infer(m)
            .unwrap()
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut layer = NetVlad::from_parts(base.centers.clone(), base.w.clone(), base.b.clone()).unwrap();
    layer.forward(&map).unwrap();
    let up = Tensor::new([2, k * d, 1, 1], weights.clone()).unwrap();
    let gx = layer.backward(&up).unwrap();

    let eps = 1e-6;
    let check = grad_check(map.data(), gx.data(), eps, |x| {
        loss(&base, &Tensor::new(map.shape(), x.to_vec()).unwrap())
    });
    assert!(check.max_rel_error < 1e-5, "input {check:?}");

    let rebuild = |c: &[f64], w: &[f64], b: &[f64]| {
        NetVlad::from_parts(
            Tensor::new([1, 1, k, d], c.to_vec()).unwrap(),
            Tensor::new([1, 1, k, d], w.to_vec()).unwrap(),
            Tensor::new([1, 1, 1, k], b.to_vec()).unwrap(),
        )
        .unwrap()
    };
    let (c0, w0, b0) = (base.centers.data(), base.w.data(), base.b.data());
    let gc = grad_check(c0, layer.centers.grad().unwrap(), eps, |c| {
        loss(&rebuild(c, w0, b0), &map)
    });
    let gw = grad_check(w0, layer.w.grad().unwrap(), eps, |w| {
        loss(&rebuild(c0, w, b0), &map)
    });
    let gb = grad_check(b0, layer.b.grad().unwrap(), eps, |b| {
        loss(&rebuild(c0, w0, b), &map)
    });
    for (name, c) in [("centers", gc), ("w", gw), ("b", gb)] {
        assert!(c.max_rel_error < 1e-5, "{name} {c:?}");
    }
}

#[test]
fn alpha_gives_hundred_to_one_odds_for_single_descriptor() {
    let centers = vec![0.0f64, 0.0, 1.0, 0.0];
    let x = vec![0.2, 0.1];
    let alpha = estimate_alpha(&centers, &x, 2).unwrap();
    let v = NetVlad::from_centers(centers, 2, 2, alpha).unwrap();
    let a = v.soft_assign(&x);
    assert!((a[0] / a[1] - 100.0).abs() < 1e-9);
}

#[test]
fn fit_produces_unit_norm_centers_region() {
    let mut r = rng(6);
    let map = Tensor::<f32>::randn([4, 6, 3, 3], 1.0, &mut r);
    let sample = local_descriptors(&map);
    assert_eq!(sample.len(), 36 * 6);
    let v = NetVlad::fit(&sample, 4, 6, 7).unwrap();
    assert!(v.alpha.is_finite() && v.alpha > 0.0);
    let y = v.infer(&map).unwrap();
    assert_eq!(y.shape(), [4, 24, 1, 1]);
    for n in 0..4 {
        let norm: f32 = y.item(n).iter().map(|a: &f32| a * a).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

fn random_samples(m: usize, dim: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    // Correlated data with a spread of variances.
    let mix: Vec<f64> = (0..dim * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    (0..m)
        .flat_map(|_| {
            let z: Vec<f64> = (0..dim)
                .map(|j| r.random_range(-1.0..1.0) * (1.0 + j as f64))
                .collect();
            (0..dim)
                .map(|i| (0..dim).map(|j| mix[i * dim + j] * z[j]).sum::<f64>() + 3.0)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64)
        .collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    rows.iter()
                        .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                        .sum::<f64>()
                        / (m - 1) as f64
                })
                .collect()
        })
        .collect()
}

#[test]
fn whitening_gives_identity_covariance() {
    let mut r = rng(8);
    let dim = 6;
    for m in [40usize, 5] {
        let out = if m > dim { dim } else { m - 1 };
        let data = random_samples(m, dim, &mut r);
        let pw = fit_pca_whitening(&data, dim, out, 0.0).unwrap();
        let proj: Vec<Vec<f64>> = data.chunks(dim).map(|v| pw.project(v).unwrap()).collect();
        let cov = covariance(&proj);
        for (a, row) in cov.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-4, "m={m} cov[{a}][{b}] = {v}");
            }
        }
        for j in 0..out {
            let mean = proj.iter().map(|p| p[j]).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-6);
        }
        assert!(pw.variances.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn pca_reduction_is_unit_and_sized() {
    let mut r = rng(9);
    let data = random_samples(30, 8, &mut r);
    let pw = fit_pca_whitening(&data, 8, 3, PCA_EPS).unwrap();
    let y = apply_descriptor_reduction(&data[..8], &pw).unwrap();
    assert_eq!(y.len(), 3);
    assert!((y.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    assert!(apply_descriptor_reduction(&data[..7], &pw).is_err());
    assert!(fit_pca_whitening(&data[..24], 8, 3, PCA_EPS).is_err());
}

#[test]
fn pca_sign_convention() {
    let mut r = rng(10);
    let data = random_samples(20, 5, &mut r);
    let pw = fit_pca_whitening(&data, 5, 4, PCA_EPS).unwrap();
    for row in pw.proj.chunks(5) {
        let pivot = row.iter().fold(0.0f64, |a, &e| if e.abs() > a.abs() { e } else { a });
        assert!(pivot > 0.0);
    }
}

#[test]
fn pca_rank_deficiency_is_reported() {
    // Five samples on a line in 4-D: rank 1.
    let data: Vec<f64> = (0..5)
        .flat_map(|i| {
            let t = i as f64;
            vec![t, 2.0 * t, -t, 0.5 * t]
        })
        .collect();
    assert!(fit_pca_whitening(&data, 4, 1, 0.0).is_ok());
    assert!(fit_pca_whitening(&data, 4, 3, 0.0).is_err());
}
