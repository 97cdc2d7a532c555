//! Finite-difference checks of every hand-written backward pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::ghostnet::{
    BottleneckEntry, BottleneckOptions, ConvBn, GhostBottleneck, GhostModule, GhostModuleConfig, Layer,
    SeBlock,
};
use crate::netvlad::NetVlad;
use crate::tensor::ConvSpec;
use crate::tensor::gradcheck::{grad_check_at, grad_check_scaled, scale_floor, GradCheck};
use crate::tensor::{batchnorm2d, batchnorm2d_backward, BatchNormState, Tensor};
use crate::training::descriptor_triplet_loss;

/// Central-difference step.
pub const EPS: f64 = 1e-4;
/// Coordinates probed per tensor.
const PROBES: usize = 48;

/// Worst relative error over one component's input and parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

fn probes(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, PROBES).into_vec();
        v.sort_unstable();
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks `Σ w ⊙ layer.forward(x)` against the layer's backward pass for
/// the input and every parameter tensor.
pub fn check_layer<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let y = layer.forward(x)?;
    let w = Tensor::<f64>::randn(y.shape(), 1.0, rng);
    layer.zero_grad();
    layer.forward(x)?;
    let gx = layer.backward(&w)?;

    let mut analytic = Vec::new();
    {
        let mut ps = Vec::new();
        layer.params("", &mut ps);
        for (_, t) in ps {
            let g = t.grad().map_or_else(|| vec![0.0; t.len()], |g| g.to_vec());
            analytic.push((t.data().to_vec(), g));
        }
    }

    let scale = analytic
        .iter()
        .flat_map(|(_, g)| g.iter())
        .chain(gx.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = scale_floor(scale);

    let idx = probes(x.len(), rng);
    let mut total = grad_check_scaled(x.data(), gx.data(), EPS, &idx, floor, |z| {
        let t = Tensor::new(x.shape(), z.to_vec()).expect("same shape");
        dot(layer.forward(&t).expect("forward").data(), w.data())
    });


    for (j, (values, grad)) in analytic.iter().enumerate() {
        let idx = probes(values.len(), rng);
        let set = |layer: &mut L, v: &[f64]| {
            let mut ps = Vec::new();
            layer.params_mut("", &mut ps);
            ps[j].1.data_mut().copy_from_slice(v);
        };
        let c = grad_check_scaled(values, grad, EPS, &idx, floor, |z| {
            set(layer, z);
            dot(layer.forward(x).expect("forward").data(), w.data())
        });
        set(layer, values);
        total = total.merge(c);
    }
    Ok(total)
}

fn report(name: &str, c: GradCheck) -> GradReport {
    GradReport {
        name: name.into(),
        max_rel_error: c.max_rel_error,
        checked: c.checked,
    }
}

fn batchnorm_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let x = Tensor::<f64>::randn([3, 4, 3, 2], 1.5, rng);
    let mut state = BatchNormState::<f64>::new(4);
    state.gamma = Tensor::uniform([1, 4, 1, 1], 0.5, 1.5, rng);
    state.beta = Tensor::randn([1, 4, 1, 1], 0.5, rng);
    let w = Tensor::<f64>::randn(x.shape(), 1.0, rng);
    let (_, cache) = batchnorm2d(&x, &mut state.clone(), true)?;
    let mut grads = state.clone();
    let gx = batchnorm2d_backward(&w, &cache, &mut grads)?;
    let eval = |x: &Tensor<f64>, s: &BatchNormState<f64>| -> f64 {
        let (y, _) = batchnorm2d(x, &mut s.clone(), true).expect("batchnorm");
        dot(y.data(), w.data())
    };
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let cx = grad_check_at(x.data(), gx.data(), EPS, &all(x.len()), |z| {
        eval(&Tensor::new(x.shape(), z.to_vec()).expect("shape"), &state)
    });
    let gg = grads.gamma.grad().expect("gamma grad").to_vec();
    let cg = grad_check_at(state.gamma.data(), &gg, EPS, &all(4), |z| {
        let mut s = state.clone();
        s.gamma.data_mut().copy_from_slice(z);
        eval(&x, &s)
    });
    let gb = grads.beta.grad().expect("beta grad").to_vec();
    let cb = grad_check_at(state.beta.data(), &gb, EPS, &all(4), |z| {
        let mut s = state.clone();
        s.beta.data_mut().copy_from_slice(z);
        eval(&x, &s)
    });
    Ok(cx.merge(cg).merge(cb))
}

fn triplet_check(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let dim = 6;
    let mut unit = || -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let q = unit();
    let pos: Vec<Vec<f32>> = (0..2).map(|_| unit()).collect();
    let neg: Vec<Vec<f32>> = (0..4).map(|_| unit()).collect();
    let margin = 0.5;
    let pos_refs: Vec<&[f32]> = pos.iter().map(Vec::as_slice).collect();
    let neg_refs: Vec<&[f32]> = neg.iter().map(Vec::as_slice).collect();
    let out = descriptor_triplet_loss(&q, &pos_refs, &neg_refs, margin)?;
    let x: Vec<f64> = q.iter().chain(pos.concat().iter()).chain(neg.concat().iter()).map(|&v| v as f64).collect();
    let g: Vec<f64> = out.grads.concat().iter().map(|&v| v as f64).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let idx: Vec<usize> = (0..x.len()).collect();
    Ok(grad_check_at(&x, &g, EPS, &idx, |z| {
        let q = &z[..dim];
        let rows: Vec<&[f64]> = z[dim..].chunks(dim).collect();
        let dp: Vec<f64> = rows[..2].iter().map(|p| sq(q, p)).collect();
        let dn: Vec<f64> = rows[2..].iter().map(|n| sq(q, n)).collect();
        crate::training::triplet_loss(&dp, &dn, margin).expect("loss").loss
    }))
}

/// Runs every check with double-precision layers seeded from `seed`.
pub fn run(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let spec = ConvSpec::new(4, 6, 3).with_stride(2).with_dilation(2).with_padding(2).with_groups(2);
    let mut conv = ConvBn::<f64>::new(spec, true, false, false, &mut rng)?;
    let x = Tensor::randn([2, 4, 7, 6], 1.0, &mut rng);
    out.push(report("conv2d", check_layer(&mut conv, &x, &mut rng)?));

    out.push(report("batchnorm", batchnorm_check(&mut rng)?));

    let mut se = SeBlock::<f64>::new(8, 4, &mut rng)?;
    let x = Tensor::randn([2, 8, 3, 3], 1.0, &mut rng);
    out.push(report("se_block", check_layer(&mut se, &x, &mut rng)?));

    let cfg = GhostModuleConfig {
        dilation: 2,
        ..GhostModuleConfig::new(4, 8)
    };
    let mut ghost = GhostModule::<f64>::new(cfg, &mut rng)?;
    let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng);
    out.push(report("ghost_module", check_layer(&mut ghost, &x, &mut rng)?));

    let entry = BottleneckEntry {
        in_channels: 8,
        mid_channels: 16,
        out_channels: 12,
        kernel: 3,
        stride: 2,
        se: true,
        dilation: 2,
        stage: 1,
    };
    let mut block = GhostBottleneck::<f64>::new(entry, BottleneckOptions::default(), &mut rng)?;
    let x = Tensor::randn([2, 8, 6, 6], 1.0, &mut rng);
    out.push(report("ghost_bottleneck", check_layer(&mut block, &x, &mut rng)?));

    let (k, d) = (3, 5);
    let centers: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut vlad = NetVlad::from_centers(centers, k, d, 2.0)?;
    let x = Tensor::randn([2, d, 3, 2], 1.0, &mut rng);
    out.push(report("netvlad", check_layer(&mut vlad, &x, &mut rng)?));

    out.push(report("triplet_loss", triplet_check(&mut rng)?));
    Ok(out)
}
