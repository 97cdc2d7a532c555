//! Analytical MAC, FLOP and parameter accounting.
//!
//! Only convolution and linear multiply-accumulates are counted; pooling,
//! activations, normalisation and softmax arithmetic are ignored. One FLOP
//! is half a MAC's worth of work, so `flops = 2 · macs`. Parameters cover
//! weights, biases and normalisation affine pairs. Whitening projections are
//! tallied separately from the headline total.

use std::fmt;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::ghostnet::{BottleneckEntry, BottleneckOptions, GhostCnnConfig, GhostModuleConfig};
use crate::tensor::ConvSpec;

/// `(channels, height, width)` of one batch item.
pub type Shape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub out_shape: Shape,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

impl LayerCost {
    fn new(name: impl Into<String>, out_shape: Shape, macs: u64, params: u64) -> Self {
        Self {
            name: name.into(),
            out_shape,
            macs,
            flops: 2 * macs,
            params,
        }
    }

    fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

/// One entry of an [`ArchitectureSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv { spec: ConvSpec, bias: bool, norm: bool },
    MaxPool { kernel: usize, stride: usize },
    GhostModule(GhostModuleConfig),
    Bottleneck { entry: BottleneckEntry, options: BottleneckOptions },
    Se { channels: usize, reduction: usize },
    /// Soft-assignment VLAD over the incoming feature map.
    Vlad { clusters: usize },
    /// Whitening projection applied to the flattened input.
    Pca { out_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerDesc>,
}

impl ArchitectureSpec {
    pub fn new(name: impl Into<String>, input: Shape) -> Self {
        Self {
            name: name.into(),
            input,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind) -> &mut Self {
        self.layers.push(LayerDesc {
            name: name.into(),
            kind,
        });
        self
    }
}

/// Cost of a convolution on one `input` item.
pub fn conv_cost(spec: &ConvSpec, input: Shape, bias: bool, norm: bool) -> Result<LayerCost> {
    spec.validate()?;
    if input[0] != spec.in_channels {
        return Err(shape_err!(
            "convolution expects {} channels, got {}",
            spec.in_channels,
            input[0]
        ));
    }
    let (h, w) = spec.output_size(input[1], input[2])?;
    let per_out = (spec.in_per_group() * spec.kernel.0 * spec.kernel.1) as u64;
    let macs = (spec.out_channels * h * w) as u64 * per_out;
    let oc = spec.out_channels as u64;
    let params = oc * per_out + if bias { oc } else { 0 } + if norm { 2 * oc } else { 0 };
    Ok(LayerCost::new("conv", [spec.out_channels, h, w], macs, params))
}

fn ghost_specs(cfg: &GhostModuleConfig) -> (ConvSpec, Option<ConvSpec>) {
    let m = cfg.intrinsic();
    let primary = ConvSpec::new(cfg.in_channels, m, cfg.primary_kernel)
        .with_dilation(cfg.dilation)
        .with_same_padding();
    let cheap = (cfg.ratio > 1).then(|| {
        ConvSpec::new(m, cfg.ghost_channels(), cfg.cheap_kernel)
            .with_groups(m)
            .with_dilation(cfg.dilation)
            .with_same_padding()
    });
    (primary, cheap)
}

fn ghost_rows(name: &str, cfg: &GhostModuleConfig, input: Shape) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let (primary, cheap) = ghost_specs(cfg);
    let p = conv_cost(&primary, input, false, true)?.renamed(format!("{name}.primary"));
    let mut rows = vec![p];
    if let Some(c) = cheap {
        let shape = rows[0].out_shape;
        rows.push(conv_cost(&c, shape, false, true)?.renamed(format!("{name}.cheap")));
    }
    Ok(rows)
}

fn merge(name: &str, rows: &[LayerCost], out_shape: Shape) -> LayerCost {
    LayerCost::new(
        name,
        out_shape,
        rows.iter().map(|r| r.macs).sum(),
        rows.iter().map(|r| r.params).sum(),
    )
}

/// Primary convolution plus depthwise cheap operation; the identity half of
/// the output is free.
pub fn ghost_module_cost(cfg: &GhostModuleConfig, input: Shape) -> Result<LayerCost> {
    let rows = ghost_rows("ghost", cfg, input)?;
    Ok(merge("ghost", &rows, [cfg.out_channels, input[1], input[2]]))
}

fn se_rows(name: &str, channels: usize, reduction: usize, input: Shape) -> Result<Vec<LayerCost>> {
    if input[0] != channels || reduction == 0 || channels % reduction != 0 {
        return Err(shape_err!(
            "SE over {channels} channels (reduction {reduction}) given {} channels",
            input[0]
        ));
    }
    let mid = channels / reduction;
    let reduce = conv_cost(&ConvSpec::new(channels, mid, 1), [channels, 1, 1], true, false)?;
    let expand = conv_cost(&ConvSpec::new(mid, channels, 1), [mid, 1, 1], true, false)?;
    Ok(vec![
        LayerCost::new(format!("{name}.reduce"), input, reduce.macs, reduce.params),
        LayerCost::new(format!("{name}.expand"), input, expand.macs, expand.params),
    ])
}

fn bottleneck_rows(name: &str, e: &BottleneckEntry, o: &BottleneckOptions, input: Shape) -> Result<(Vec<LayerCost>, Shape)> {
    if input[0] != e.in_channels {
        return Err(shape_err!("bottleneck {name} expects {} channels, got {}", e.in_channels, input[0]));
    }
    let ghost = |i, out, relu| GhostModuleConfig {
        in_channels: i,
        out_channels: out,
        ratio: o.ghost_ratio,
        primary_kernel: o.primary_kernel,
        cheap_kernel: e.kernel,
        dilation: e.dilation,
        relu,
    };
    let mut rows = ghost_rows(&format!("{name}.ghost1"), &ghost(e.in_channels, e.mid_channels, true), input)?;
    let mut shape = [e.mid_channels, input[1], input[2]];
    if e.stride == 2 {
        let spec = ConvSpec::depthwise(e.mid_channels, e.kernel, 2, 1);
        let c = conv_cost(&spec, shape, false, true)?.renamed(format!("{name}.dw"));
        shape = c.out_shape;
        rows.push(c);
    }
    if e.se {
        rows.extend(se_rows(&format!("{name}.se"), e.mid_channels, o.se_reduction, shape)?);
    }
    rows.extend(ghost_rows(&format!("{name}.ghost2"), &ghost(e.mid_channels, e.out_channels, false), shape)?);
    if !e.has_identity_shortcut() {
        let rate = if e.stride == 2 { 1 } else { e.dilation };
        let dw = ConvSpec::depthwise(e.in_channels, e.kernel, e.stride, rate);
        let d = conv_cost(&dw, input, false, true)?.renamed(format!("{name}.shortcut.dw"));
        let pw = ConvSpec::new(e.in_channels, e.out_channels, 1);
        let p = conv_cost(&pw, d.out_shape, false, true)?.renamed(format!("{name}.shortcut.pw"));
        rows.extend([d, p]);
    }
    Ok((rows, [e.out_channels, shape[1], shape[2]]))
}

/// Per-layer costs and totals of one architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<LayerCost>,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    /// Whitening parameters, excluded from `params`.
    pub separate_params: u64,
}

/// Walks `arch`, checking that shapes chain, and sums every layer.
pub fn model_cost(arch: &ArchitectureSpec) -> Result<CostReport> {
    let mut shape = arch.input;
    let mut layers = Vec::new();
    let mut separate = 0u64;
    for l in &arch.layers {
        let name = l.name.as_str();
        match &l.kind {
            LayerKind::Conv { spec, bias, norm } => {
                let c = conv_cost(spec, shape, *bias, *norm)?.renamed(name);
                shape = c.out_shape;
                layers.push(c);
            }
            LayerKind::MaxPool { kernel, stride } => {
                if *kernel == 0 || *stride == 0 || shape[1] < *kernel || shape[2] < *kernel {
                    return Err(shape_err!("pool {name}: {kernel}/{stride} on {shape:?}"));
                }
                shape = [shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1];
            }
            LayerKind::GhostModule(cfg) => {
                layers.extend(ghost_rows(name, cfg, shape)?);
                shape = [cfg.out_channels, shape[1], shape[2]];
            }
            LayerKind::Bottleneck { entry, options } => {
                let (rows, out) = bottleneck_rows(name, entry, options, shape)?;
                shape = out;
                layers.extend(rows);
            }
            LayerKind::Se { channels, reduction } => {
                layers.extend(se_rows(name, *channels, *reduction, shape)?);
            }
            LayerKind::Vlad { clusters } => {
                let (k, d) = (*clusters as u64, shape[0] as u64);
                let locations = (shape[1] * shape[2]) as u64;
                if k == 0 {
                    return Err(Error::Config(format!("{name}: zero clusters")));
                }
                // Assignment 1×1 conv plus residual accumulation.
                let macs = locations * (d * k + k * d);
                shape = [clusters * shape[0], 1, 1];
                layers.push(LayerCost::new(name, shape, macs, 2 * k * d + k));
            }
            LayerKind::Pca { out_dim } => {
                let in_dim = shape.iter().product::<usize>() as u64;
                let out = *out_dim as u64;
                if out == 0 || out > in_dim {
                    return Err(shape_err!("{name}: cannot project {in_dim} to {out}"));
                }
                shape = [*out_dim, 1, 1];
                // Mean subtraction, then the projection matrix.
                separate += in_dim + out * in_dim;
                layers.push(LayerCost::new(name, shape, out * in_dim, 0));
            }
        }
    }
    Ok(CostReport {
        name: arch.name.clone(),
        input: arch.input,
        macs: layers.iter().map(|l| l.macs).sum(),
        flops: layers.iter().map(|l| l.flops).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
        separate_params: separate,
    })
}

/// Relative savings of `candidate` over `baseline`, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Reduction {
    pub flops_pct: f64,
    pub params_pct: f64,
}

pub fn compare_costs(baseline: &CostReport, candidate: &CostReport) -> Result<Reduction> {
    if baseline.flops == 0 || baseline.params == 0 {
        return Err(Error::Data(format!("{} has a zero total", baseline.name)));
    }
    Ok(Reduction {
        flops_pct: 100.0 * (1.0 - candidate.flops as f64 / baseline.flops as f64),
        params_pct: 100.0 * (1.0 - candidate.params as f64 / baseline.params as f64),
    })
}

/// VGG16 convolutions cut after the last 3×3 layer, then VLAD with `k`
/// clusters over its 512 channels.
pub fn vgg16_netvlad(width: usize, height: usize, k: usize) -> ArchitectureSpec {
    let blocks: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut arch = ArchitectureSpec::new("vgg16-netvlad", [3, height, width]);
    let mut c = 3;
    for (b, widths) in blocks.iter().enumerate() {
        for (i, &o) in widths.iter().enumerate() {
            let spec = ConvSpec::new(c, o, 3).with_padding(1);
            arch.push(format!("conv{}_{}", b + 1, i + 1), LayerKind::Conv { spec, bias: true, norm: false });
            c = o;
        }
        if b < 4 {
            arch.push(format!("pool{}", b + 1), LayerKind::MaxPool { kernel: 2, stride: 2 });
        }
    }
    arch.push("vlad", LayerKind::Vlad { clusters: k });
    arch
}

/// The backbone as built by the runnable model, with names matching its
/// parameter prefixes, followed by VLAD and optional whitening.
pub fn ghostcnn_netvlad(config: &GhostCnnConfig, width: usize, height: usize, k: usize, reduction_dim: usize) -> ArchitectureSpec {
    let cfg = config.scaled();
    let options = BottleneckOptions {
        ghost_ratio: cfg.ghost_ratio,
        se_reduction: cfg.se_reduction,
        primary_kernel: cfg.primary_kernel,
    };
    let mut arch = ArchitectureSpec::new("ghostcnn-netvlad", [3, height, width]);
    let stem = ConvSpec::new(3, cfg.stem_channels, 3).with_stride(2).with_same_padding();
    arch.push("backbone.stem", LayerKind::Conv { spec: stem, bias: false, norm: true });
    for (i, &entry) in cfg.stages.iter().enumerate() {
        arch.push(format!("backbone.blocks.{i}"), LayerKind::Bottleneck { entry, options });
    }
    let last = cfg.stages.last().map_or(cfg.stem_channels, |e| e.out_channels);
    let head = ConvSpec::new(last, cfg.final_channels, 1);
    arch.push("backbone.final", LayerKind::Conv { spec: head, bias: false, norm: true });
    arch.push("vlad", LayerKind::Vlad { clusters: k });
    if reduction_dim > 0 {
        arch.push("pca", LayerKind::Pca { out_dim: reduction_dim });
    }
    arch
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} @ {}x{}  (flops = 2 x macs; conv/linear macs only; whitening params listed separately)",
            self.name, self.input[2], self.input[1]
        )?;
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>16}  {:>18}  {:>18}  {:>12}", "layer", "out", "macs", "flops", "params")?;
        for l in &self.layers {
            let shape = format!("{}x{}x{}", l.out_shape[0], l.out_shape[1], l.out_shape[2]);
            writeln!(
                f,
                "{:<width$}  {:>16}  {:>18}  {:>18}  {:>12}",
                l.name,
                shape,
                group(l.macs),
                group(l.flops),
                group(l.params)
            )?;
        }
        writeln!(
            f,
            "{:<width$}  {:>16}  {:>18}  {:>18}  {:>12}",
            "total",
            "",
            group(self.macs),
            group(self.flops),
            group(self.params)
        )?;
        if self.separate_params > 0 {
            writeln!(f, "whitening params (not in total): {}", group(self.separate_params))?;
        }
        Ok(())
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flops reduction:  {:.2}%", self.flops_pct)?;
        writeln!(f, "params reduction: {:.2}%", self.params_pct)
    }
}
