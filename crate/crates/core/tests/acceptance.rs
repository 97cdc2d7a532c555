//! One pass/fail line per acceptance criterion.

use std::path::Path;
use std::time::{Duration, Instant};

use ghostvlad::costmodel::{compare_costs, ghostcnn_netvlad, model_cost, vgg16_netvlad};
use ghostvlad::experiment::{run_desk, DeskConfig, DeskRun};
use ghostvlad::ghostnet::{DilationScheme, GhostCnn, GhostCnnConfig, Layer};
use ghostvlad::gradsuite;
use ghostvlad::model::{ModelConfig, PlaceModel};
use ghostvlad::netvlad::NetVlad;
use ghostvlad::tensor::{conv2d_forward, ConvSpec};
use ghostvlad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_reproduction() -> Outcome {
    let start = Instant::now();
    let vgg = model_cost(&vgg16_netvlad(640, 480, 64)).map_err(|e| e.to_string())?;
    let cfg = GhostCnnConfig::standard("5-2".parse().unwrap());
    let ghost = model_cost(&ghostcnn_netvlad(&cfg, 640, 480, 64, 0)).map_err(|e| e.to_string())?;
    let red = compare_costs(&vgg, &ghost).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        (red.flops_pct - 99.04).abs() <= 1.0 && (red.params_pct - 80.16).abs() <= 4.0 && secs < 1.0,
        format!("FLOPs -{:.2}%, params -{:.2}%, {secs:.3}s", red.flops_pct, red.params_pct),
    )
}

fn naive_conv(x: &[f64], shape: [usize; 4], w: &[f64], bias: &[f64], s: &ConvSpec) -> (Vec<f64>, usize, usize) {
    let [n, c, h, wd] = shape;
    let (kh, kw) = s.kernel;
    let ho = (h + 2 * s.padding.0 - s.dilation.0 * (kh - 1) - 1) / s.stride.0 + 1;
    let wo = (wd + 2 * s.padding.1 - s.dilation.1 * (kw - 1) - 1) / s.stride.1 + 1;
    let cin_g = c / s.groups;
    let cout_g = s.out_channels / s.groups;
    let mut out = vec![0.0; n * s.out_channels * ho * wo];
    for b in 0..n {
        for o in 0..s.out_channels {
            let g = o / cout_g;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[o];
                    for ci in 0..cin_g {
                        let ch = g * cin_g + ci;
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * s.stride.0 + u * s.dilation.0) as isize - s.padding.0 as isize;
                                let q = (j * s.stride.1 + v * s.dilation.1) as isize - s.padding.1 as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * c + ch) * h + r as usize) * wd + q as usize;
                                let wi = ((o * cin_g + ci) * kh + u) * kw + v;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * s.out_channels + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

fn random_spec(rng: &mut ChaCha8Rng) -> (ConvSpec, [usize; 4]) {
    loop {
        let groups = [1, 1, 2, 3, 0][rng.random_range(0..5)];
        let per_in = rng.random_range(1..4);
        let (cin, cout, groups) = if groups == 0 {
            let c = rng.random_range(1..7);
            (c, c, c)
        } else {
            (groups * per_in, groups * rng.random_range(1..4), groups)
        };
        let k = [1, 2, 3, 5][rng.random_range(0..4)];
        let spec = ConvSpec::new(cin, cout, k)
            .with_stride(rng.random_range(1..4))
            .with_padding(rng.random_range(0..4))
            .with_dilation(rng.random_range(1..4))
            .with_groups(groups);
        let shape = [rng.random_range(1..3), cin, rng.random_range(3..12), rng.random_range(3..12)];
        if spec.output_size(shape[2], shape[3]).is_ok() {
            return (spec, shape);
        }
    }
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let specs = 240;
    let (mut worst32, mut exact_fail, mut worst64) = (0.0f64, 0usize, 0.0f64);
    for t in 0..specs {
        let (spec, shape) = random_spec(&mut rng);
        let len: usize = shape.iter().product();
        let integers = t % 2 == 0;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if integers {
                        rng.random_range(-4i32..5) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        };
        let x = draw(len);
        let w = draw(spec.weight_len());
        let b = draw(spec.out_channels);
        let (want, _, _) = naive_conv(&x, shape, &w, &b, &spec);

        let got = conv2d_forward(&Tensor::new(shape, x.clone()).unwrap(), &w, Some(&b), &spec)
            .map_err(|e| format!("{spec:?}: {e}"))?;
        let err64 = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if integers && err64 != 0.0 {
            exact_fail += 1;
        }
        worst64 = worst64.max(err64);

        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
        let got32 = conv2d_forward(&Tensor::new(shape, x32).unwrap(), &w32, Some(&b32), &spec)
            .map_err(|e| format!("{spec:?}: {e}"))?;
        if !integers {
            let e = got32.data().iter().zip(&want).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max);
            worst32 = worst32.max(e);
        }
    }
    check(
        exact_fail == 0 && worst64 < 1e-12 && worst32 <= 1e-5,
        format!("{specs} specs, f64 max err {worst64:.1e} ({exact_fail} inexact integer cases), f32 max err {worst32:.1e}"),
    )
}

fn gradient_suite() -> Outcome {
    let reports = gradsuite::run(1).map_err(|e| e.to_string())?;
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    check(
        reports.iter().all(|r| r.max_rel_error <= 1e-4),
        format!("{} components, worst {} at {:.2e}", reports.len(), worst.name, worst.max_rel_error),
    )
}

fn direct_vlad(x: &[f64], n: usize, d: usize, centers: &[f64], k: usize, alpha: f64) -> Vec<f64> {
    let l2 = |v: &mut [f64]| {
        let s = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= s);
    };
    let mut v = vec![0.0; k * d];
    for i in 0..n {
        let mut xi: Vec<f64> = (0..d).map(|j| x[j * n + i]).collect();
        l2(&mut xi);
        let dist: Vec<f64> = (0..k)
            .map(|c| (0..d).map(|j| (xi[j] - centers[c * d + j]).powi(2)).sum::<f64>())
            .collect();
        let denom: f64 = dist.iter().map(|&s| (-alpha * s).exp()).sum();
        for c in 0..k {
            let a = (-alpha * dist[c]).exp() / denom;
            for j in 0..d {
                v[c * d + j] += a * (xi[j] - centers[c * d + j]);
            }
        }
    }
    for row in v.chunks_mut(d) {
        l2(row);
    }
    l2(&mut v);
    v
}

fn vlad_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let (d, k) = (rng.random_range(1..9), rng.random_range(1..5));
        let n = h * w;
        let x: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let centers: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = rng.random_range(0.5..20.0);
        let layer = NetVlad::from_centers(centers.clone(), k, d, alpha).map_err(|e| e.to_string())?;
        let out = layer.infer(&Tensor::new([1, d, h, w], x.clone()).unwrap()).map_err(|e| e.to_string())?;
        let want = direct_vlad(&x, n, d, &centers, k, alpha);
        worst = worst.max(out.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        for i in 0..n {
            let xi: Vec<f64> = (0..d).map(|j| x[j * n + i]).collect();
            let s: f64 = layer.soft_assign(&xi).iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }

    let centers = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
    let hard = NetVlad::from_centers(centers.clone(), 3, 2, 1e3).map_err(|e| e.to_string())?;
    let mut argmax_ok = true;
    for _ in 0..50 {
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let x = [t.cos(), t.sin()];
        let a = hard.soft_assign(&x);
        let nearest = (0..3)
            .min_by(|&i, &j| {
                let di = (x[0] - centers[2 * i]).powi(2) + (x[1] - centers[2 * i + 1]).powi(2);
                let dj = (x[0] - centers[2 * j]).powi(2) + (x[1] - centers[2 * j + 1]).powi(2);
                di.total_cmp(&dj)
            })
            .unwrap();
        let margin = {
            let mut d: Vec<f64> =
                (0..3).map(|i| (x[0] - centers[2 * i]).powi(2) + (x[1] - centers[2 * i + 1]).powi(2)).collect();
            d.sort_by(f64::total_cmp);
            d[1] - d[0]
        };
        if margin > 0.05 && a[nearest] < 1.0 - 1e-6 {
            argmax_ok = false;
        }
    }
    check(
        worst <= 1e-5 && worst_sum <= 1e-6 && argmax_ok,
        format!("max abs err {worst:.1e}, assignment sum err {worst_sum:.1e}, hard limit {argmax_ok}"),
    )
}

fn dilation_invariance() -> Outcome {
    let mut reference: Option<(usize, [usize; 4])> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::randn([1, 3, 64, 96], 1.0, &mut rng);
    for scheme in DilationScheme::survey_set() {
        let cfg = GhostCnnConfig::standard(scheme);
        let net = GhostCnn::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        let y = net.infer(&x).map_err(|e| format!("{scheme}: {e}"))?;
        if !y.all_finite() {
            return Err(format!("{scheme}: non-finite output"));
        }
        let got = (net.param_count(), y.shape());
        match reference {
            None => reference = Some(got),
            Some(r) if r != got => return Err(format!("{scheme}: {got:?} differs from {r:?}")),
            _ => {}
        }
    }
    let (p, s) = reference.unwrap();
    Ok(format!("7 schemes, {p} params, output {s:?}"))
}

fn desk(run: &DeskRun, elapsed: Duration) -> Outcome {
    let trained = run.trained();
    let r1 = trained.at(1).unwrap_or(0.0);
    let base = run.untrained.at(1).unwrap_or(0.0);
    check(
        r1 >= 0.80 && r1 - base >= 0.20 && trained.is_monotone() && elapsed.as_secs() <= 3600,
        format!(
            "recall@1 {r1:.3} (untrained {base:.3}), recall@25 {:.3}, monotone {}, {} epochs, {:.0}s",
            trained.at(25).unwrap_or(0.0),
            trained.is_monotone(),
            run.per_epoch.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn checkpoint_round_trip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = Tensor::<f32>::randn([6, 3, 32, 64], 1.0, &mut rng);
    let cfg = ModelConfig {
        backbone: GhostCnnConfig::standard("5-2".parse().unwrap()).with_multiplier(0.25),
        clusters: 4,
        input_height: 32,
        input_width: 64,
        reduction_dim: 0,
    };
    let mut model = PlaceModel::initialise(cfg, &images, 11).map_err(|e| e.to_string())?;
    model.fit_reduction(&images, 4, 1e-8).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.gdnv");
    model.save(&path).map_err(|e| e.to_string())?;
    let back = PlaceModel::<f32>::load(&path).map_err(|e| e.to_string())?;
    let a = model.describe(&images).map_err(|e| e.to_string())?;
    let b = back.describe(&images).map_err(|e| e.to_string())?;
    let same = a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    if same {
        Ok(())
    } else {
        Err("descriptors changed after save/load".into())
    }
}

fn determinism(first: &DeskRun, cfg: &DeskConfig) -> Outcome {
    let second = run_desk(cfg, |_| {}, |_, _| {}).map_err(|e| e.to_string())?;
    let tables_match = first.untrained == second.untrained && first.per_epoch == second.per_epoch;
    let ck = checkpoint_round_trip();
    check(
        tables_match && ck.is_ok(),
        format!(
            "recall tables identical: {tables_match}, checkpoint round trip: {}",
            ck.err().unwrap_or_else(|| "bit-identical".into())
        ),
    )
}

fn reference_numbers_documented() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).map_err(|e| format!("{}: {e}", readme.display()))?;
    check(
        text.contains("79.45") && text.contains("not reproduced"),
        "large-benchmark recall listed as reference only".into(),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] {id} {name}: {detail} [{secs:.1}s]");
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "cost reproduction", cost_reproduction);
    ok &= report(2, "convolution oracle", conv_oracle);
    ok &= report(3, "gradient suite", gradient_suite);
    ok &= report(4, "VLAD oracle", vlad_oracle);
    ok &= report(5, "dilation invariance", dilation_invariance);

    let cfg = DeskConfig::default();
    let start = Instant::now();
    let first = run_desk(&cfg, |_| {}, |_, _| {});
    let elapsed = start.elapsed();
    ok &= report(6, "desk-scale end-to-end", || first.as_ref().map_err(|e| e.to_string()).and_then(|r| desk(r, elapsed)));
    ok &= report(7, "determinism", || {
        first.as_ref().map_err(|e| e.to_string()).and_then(|r| determinism(r, &cfg))
    });
    ok &= report(8, "reference numbers documented", reference_numbers_documented);

    println!("acceptance: {}", if ok { "all criteria pass" } else { "some criteria fail" });
}
