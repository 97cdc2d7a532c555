use rand::Rng;

use super::config::{BottleneckEntry, GhostModuleConfig};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_infer, concat_channels, conv2d_backward,
    conv2d_forward, global_avg_pool, global_avg_pool_backward, hard_sigmoid,
    hard_sigmoid_backward, relu, relu_backward, scale_channels, scale_channels_backward,
    split_channels, BatchNormCache, BatchNormState, ConvSpec, Scalar, Tensor,
};

/// Named mutable views of a layer's trainable tensors.
pub type ParamsMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;
/// Named views of a layer's trainable tensors.
pub type Params<'a, T> = Vec<(String, &'a Tensor<T>)>;
/// Named mutable views of non-trainable state (batch-norm running stats).
pub type BuffersMut<'a, T> = Vec<(String, &'a mut Vec<T>)>;
/// Named views of non-trainable state.
pub type Buffers<'a, T> = Vec<(String, &'a Vec<T>)>;

/// A differentiable layer.
///
/// `forward` runs in training mode and records what `backward` needs;
/// `backward` consumes that record, accumulates parameter gradients and
/// returns the input gradient. `infer` is the read-only inference path.
pub trait Layer<T: Scalar> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>>;
    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>);
    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>);
    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>);

    /// Every batch-norm state, in forward order.
    fn batchnorms_mut<'a>(&'a mut self, _out: &mut Vec<&'a mut BatchNormState<T>>) {}

    fn param_count(&self) -> usize {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().map(|(_, t)| t.len()).sum()
    }

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        ps.into_iter().for_each(|(_, t)| t.zero_grad());
    }
}

fn missing_record() -> Error {
    Error::Numerical("backward called without a recorded forward pass".into())
}

/// He-normal initialisation over `fan_in = (in/groups)·k_h·k_w`.
fn init_weight<T: Scalar, R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Tensor<T> {
    let fan_in = spec.in_per_group() * spec.kernel.0 * spec.kernel.1;
    Tensor::randn(spec.weight_shape(), (2.0 / fan_in as f64).sqrt(), rng)
}

struct ConvBnRecord<T: Scalar> {
    input: Tensor<T>,
    bn: Option<BatchNormCache<T>>,
    pre_act: Option<Tensor<T>>,
}

/// Convolution, optional batch norm, optional ReLU.
pub struct ConvBn<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormState<T>>,
    pub relu: bool,
    record: Option<ConvBnRecord<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new<R: Rng + ?Sized>(
        spec: ConvSpec,
        bias: bool,
        bn: bool,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weight: init_weight(&spec, rng),
            bias: bias.then(|| Tensor::zeros([1, spec.out_channels, 1, 1])),
            bn: bn.then(|| BatchNormState::new(spec.out_channels)),
            relu,
            record: None,
        })
    }

    fn conv(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(
            x,
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            &self.spec,
        )
    }
}

impl<T: Scalar> Layer<T> for ConvBn<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv(x)?;
        if let Some(bn) = &self.bn {
            y = batchnorm2d_infer(&y, bn)?;
        }
        Ok(if self.relu { relu(&y) } else { y })
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.conv(x)?;
        let mut bn_cache = None;
        if let Some(bn) = &mut self.bn {
            let (out, cache) = batchnorm2d(&y, bn, true)?;
            y = out;
            bn_cache = Some(cache);
        }
        let (out, pre_act) = if self.relu {
            (relu(&y), Some(y))
        } else {
            (y, None)
        };
        self.record = Some(ConvBnRecord {
            input: x.clone(),
            bn: bn_cache,
            pre_act,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let rec = self.record.take().ok_or_else(missing_record)?;
        let mut g = match &rec.pre_act {
            Some(pre) => relu_backward(upstream, pre),
            None => upstream.clone(),
        };
        if let (Some(bn), Some(cache)) = (&mut self.bn, &rec.bn) {
            g = batchnorm2d_backward(&g, cache, bn)?;
        }
        let grads = conv2d_backward(
            &g,
            &rec.input,
            self.weight.data(),
            &self.spec,
            self.bias.is_some(),
        )?;
        self.weight.accumulate_grad(&grads.weight)?;
        if let (Some(b), Some(gb)) = (&mut self.bias, &grads.bias) {
            b.accumulate_grad(gb)?;
        }
        Ok(grads.input)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn.gamma"), &bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &bn.beta));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
        if let Some(bn) = &mut self.bn {
            out.push((format!("{prefix}.bn.gamma"), &mut bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &mut bn.beta));
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>) {
        if let Some(bn) = &mut self.bn {
            out.push((format!("{prefix}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &mut bn.running_var));
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>) {
        if let Some(bn) = &self.bn {
            out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &bn.running_var));
        }
    }

    fn batchnorms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormState<T>>) {
        if let Some(bn) = &mut self.bn {
            out.push(bn);
        }
    }
}

/// Ghost module: primary convolution to `m` intrinsic maps, then a depthwise
/// cheap op producing `(s-1)·m` ghost maps; output `[intrinsic, ghost]`.
pub struct GhostModule<T: Scalar> {
    pub cfg: GhostModuleConfig,
    pub primary: ConvBn<T>,
    pub cheap: Option<ConvBn<T>>,
}

impl<T: Scalar> GhostModule<T> {
    pub fn new<R: Rng + ?Sized>(cfg: GhostModuleConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.intrinsic();
        let primary_spec = ConvSpec::new(cfg.in_channels, m, cfg.primary_kernel)
            .with_dilation(cfg.dilation)
            .with_same_padding();
        let primary = ConvBn::new(primary_spec, false, true, cfg.relu, rng)?;
        let cheap = if cfg.ratio > 1 {
            let spec = ConvSpec::new(m, cfg.ghost_channels(), cfg.cheap_kernel)
                .with_groups(m)
                .with_dilation(cfg.dilation)
                .with_same_padding();
            Some(ConvBn::new(spec, false, true, cfg.relu, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            primary,
            cheap,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.cfg.in_channels {
            return Err(shape_err!(
                "ghost module expects {} channels, got {}",
                self.cfg.in_channels,
                x.c()
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for GhostModule<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let y = self.primary.infer(x)?;
        match &self.cheap {
            Some(c) => concat_channels(&y, &c.infer(&y)?),
            None => Ok(y),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let y = self.primary.forward(x)?;
        match &mut self.cheap {
            Some(c) => {
                let ghosts = c.forward(&y)?;
                concat_channels(&y, &ghosts)
            }
            None => Ok(y),
        }
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let gy = match &mut self.cheap {
            Some(c) => {
                let (g_intr, g_ghost) = split_channels(upstream, self.cfg.intrinsic())?;
                g_intr.add(&c.backward(&g_ghost)?)?
            }
            None => upstream.clone(),
        };
        self.primary.backward(&gy)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        self.primary.params(&format!("{prefix}.primary"), out);
        if let Some(c) = &self.cheap {
            c.params(&format!("{prefix}.cheap"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.primary.params_mut(&format!("{prefix}.primary"), out);
        if let Some(c) = &mut self.cheap {
            c.params_mut(&format!("{prefix}.cheap"), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>) {
        self.primary.buffers_mut(&format!("{prefix}.primary"), out);
        if let Some(c) = &mut self.cheap {
            c.buffers_mut(&format!("{prefix}.cheap"), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>) {
        self.primary.buffers(&format!("{prefix}.primary"), out);
        if let Some(c) = &self.cheap {
            c.buffers(&format!("{prefix}.cheap"), out);
        }
    }

    fn batchnorms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormState<T>>) {
        self.primary.batchnorms_mut(out);
        if let Some(c) = &mut self.cheap {
            c.batchnorms_mut(out);
        }
    }
}

struct SeRecord<T: Scalar> {
    input: Tensor<T>,
    pre_gate: Tensor<T>,
    gate: Tensor<T>,
}

/// Squeeze-and-excitation: average pool, two pointwise convolutions with a
/// ReLU between, hard-sigmoid gate, channelwise rescale.
pub struct SeBlock<T: Scalar> {
    pub reduce: ConvBn<T>,
    pub expand: ConvBn<T>,
    record: Option<SeRecord<T>>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SE channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(Self {
            reduce: ConvBn::new(ConvSpec::new(channels, mid, 1), true, false, true, rng)?,
            expand: ConvBn::new(ConvSpec::new(mid, channels, 1), true, false, false, rng)?,
            record: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.spec.in_channels
    }
}

impl<T: Scalar> Layer<T> for SeBlock<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = global_avg_pool(x);
        let gate = hard_sigmoid(&self.expand.infer(&self.reduce.infer(&pooled)?)?);
        scale_channels(x, &gate)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = global_avg_pool(x);
        let mid = self.reduce.forward(&pooled)?;
        let pre_gate = self.expand.forward(&mid)?;
        let gate = hard_sigmoid(&pre_gate);
        let y = scale_channels(x, &gate)?;
        self.record = Some(SeRecord {
            input: x.clone(),
            pre_gate,
            gate,
        });
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let rec = self.record.take().ok_or_else(missing_record)?;
        let (gx_direct, g_gate) = scale_channels_backward(upstream, &rec.input, &rec.gate);
        let g_pre = hard_sigmoid_backward(&g_gate, &rec.pre_gate);
        let g_pooled = self.reduce.backward(&self.expand.backward(&g_pre)?)?;
        gx_direct.add(&global_avg_pool_backward(&g_pooled, rec.input.shape()))
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        self.reduce.params(&format!("{prefix}.reduce"), out);
        self.expand.params(&format!("{prefix}.expand"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.reduce.params_mut(&format!("{prefix}.reduce"), out);
        self.expand.params_mut(&format!("{prefix}.expand"), out);
    }

    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut BuffersMut<'a, T>) {}

    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Buffers<'a, T>) {}
}

/// Residual block: expansion Ghost module (ReLU), optional stride-2
/// depthwise conv, optional SE, projection Ghost module (linear), plus a
/// shortcut that is the identity or a depthwise + pointwise projection.
pub struct GhostBottleneck<T: Scalar> {
    pub entry: BottleneckEntry,
    pub expand: GhostModule<T>,
    pub downsample: Option<ConvBn<T>>,
    pub se: Option<SeBlock<T>>,
    pub project: GhostModule<T>,
    pub shortcut: Option<(ConvBn<T>, ConvBn<T>)>,
}

/// Knobs shared by every bottleneck of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckOptions {
    pub ghost_ratio: usize,
    pub se_reduction: usize,
    pub primary_kernel: usize,
}

impl Default for BottleneckOptions {
    fn default() -> Self {
        Self {
            ghost_ratio: 2,
            se_reduction: 4,
            primary_kernel: 1,
        }
    }
}

impl<T: Scalar> GhostBottleneck<T> {
    pub fn new<R: Rng + ?Sized>(
        entry: BottleneckEntry,
        opts: BottleneckOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if entry.stride != 1 && entry.stride != 2 {
            return Err(Error::Config(format!("bottleneck stride {}", entry.stride)));
        }
        let ghost = |i, o, relu| GhostModuleConfig {
            in_channels: i,
            out_channels: o,
            ratio: opts.ghost_ratio,
            primary_kernel: opts.primary_kernel,
            cheap_kernel: entry.kernel,
            dilation: entry.dilation,
            relu,
        };
        // Stride-2 convolutions stay undilated.
        let strided_rate = if entry.stride == 2 { 1 } else { entry.dilation };
        let expand = GhostModule::new(ghost(entry.in_channels, entry.mid_channels, true), rng)?;
        let downsample = if entry.stride == 2 {
            let spec = ConvSpec::new(entry.mid_channels, entry.mid_channels, entry.kernel)
                .with_groups(entry.mid_channels)
                .with_stride(2)
                .with_same_padding();
            Some(ConvBn::new(spec, false, true, false, rng)?)
        } else {
            None
        };
        let se = if entry.se {
            Some(SeBlock::new(entry.mid_channels, opts.se_reduction, rng)?)
        } else {
            None
        };
        let project = GhostModule::new(ghost(entry.mid_channels, entry.out_channels, false), rng)?;
        let shortcut = if entry.has_identity_shortcut() {
            None
        } else {
            let dw = ConvSpec::new(entry.in_channels, entry.in_channels, entry.kernel)
                .with_groups(entry.in_channels)
                .with_stride(entry.stride)
                .with_dilation(strided_rate)
                .with_same_padding();
            let pw = ConvSpec::new(entry.in_channels, entry.out_channels, 1);
            Some((
                ConvBn::new(dw, false, true, false, rng)?,
                ConvBn::new(pw, false, true, false, rng)?,
            ))
        };
        Ok(Self {
            entry,
            expand,
            downsample,
            se,
            project,
            shortcut,
        })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.entry.in_channels {
            return Err(shape_err!(
                "bottleneck expects {} channels, got {}",
                self.entry.in_channels,
                x.c()
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for GhostBottleneck<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut y = self.expand.infer(x)?;
        if let Some(d) = &self.downsample {
            y = d.infer(&y)?;
        }
        if let Some(se) = &self.se {
            y = se.infer(&y)?;
        }
        y = self.project.infer(&y)?;
        let short = match &self.shortcut {
            Some((dw, pw)) => pw.infer(&dw.infer(x)?)?,
            None => x.clone(),
        };
        y.add(&short)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut y = self.expand.forward(x)?;
        if let Some(d) = &mut self.downsample {
            y = d.forward(&y)?;
        }
        if let Some(se) = &mut self.se {
            y = se.forward(&y)?;
        }
        y = self.project.forward(&y)?;
        let short = match &mut self.shortcut {
            Some((dw, pw)) => {
                let t = dw.forward(x)?;
                pw.forward(&t)?
            }
            None => x.clone(),
        };
        y.add(&short)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.project.backward(upstream)?;
        if let Some(se) = &mut self.se {
            g = se.backward(&g)?;
        }
        if let Some(d) = &mut self.downsample {
            g = d.backward(&g)?;
        }
        let g_main = self.expand.backward(&g)?;
        let g_short = match &mut self.shortcut {
            Some((dw, pw)) => {
                let t = pw.backward(upstream)?;
                dw.backward(&t)?
            }
            None => upstream.clone(),
        };
        g_main.add(&g_short)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        self.expand.params(&format!("{prefix}.ghost1"), out);
        if let Some(d) = &self.downsample {
            d.params(&format!("{prefix}.dw"), out);
        }
        if let Some(se) = &self.se {
            se.params(&format!("{prefix}.se"), out);
        }
        self.project.params(&format!("{prefix}.ghost2"), out);
        if let Some((dw, pw)) = &self.shortcut {
            dw.params(&format!("{prefix}.shortcut.dw"), out);
            pw.params(&format!("{prefix}.shortcut.pw"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.expand.params_mut(&format!("{prefix}.ghost1"), out);
        if let Some(d) = &mut self.downsample {
            d.params_mut(&format!("{prefix}.dw"), out);
        }
        if let Some(se) = &mut self.se {
            se.params_mut(&format!("{prefix}.se"), out);
        }
        self.project.params_mut(&format!("{prefix}.ghost2"), out);
        if let Some((dw, pw)) = &mut self.shortcut {
            dw.params_mut(&format!("{prefix}.shortcut.dw"), out);
            pw.params_mut(&format!("{prefix}.shortcut.pw"), out);
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>) {
        self.expand.buffers_mut(&format!("{prefix}.ghost1"), out);
        if let Some(d) = &mut self.downsample {
            d.buffers_mut(&format!("{prefix}.dw"), out);
        }
        self.project.buffers_mut(&format!("{prefix}.ghost2"), out);
        if let Some((dw, pw)) = &mut self.shortcut {
            dw.buffers_mut(&format!("{prefix}.shortcut.dw"), out);
            pw.buffers_mut(&format!("{prefix}.shortcut.pw"), out);
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>) {
        self.expand.buffers(&format!("{prefix}.ghost1"), out);
        if let Some(d) = &self.downsample {
            d.buffers(&format!("{prefix}.dw"), out);
        }
        self.project.buffers(&format!("{prefix}.ghost2"), out);
        if let Some((dw, pw)) = &self.shortcut {
            dw.buffers(&format!("{prefix}.shortcut.dw"), out);
            pw.buffers(&format!("{prefix}.shortcut.pw"), out);
        }
    }

    fn batchnorms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormState<T>>) {
        self.expand.batchnorms_mut(out);
        if let Some(d) = &mut self.downsample {
            d.batchnorms_mut(out);
        }
        self.project.batchnorms_mut(out);
        if let Some((dw, pw)) = &mut self.shortcut {
            dw.batchnorms_mut(out);
            pw.batchnorms_mut(out);
        }
    }
}
