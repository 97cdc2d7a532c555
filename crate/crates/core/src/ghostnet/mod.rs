//! Ghost-module backbone with optional dilated convolutions.

mod config;
mod layers;

pub use config::{
    make_divisible, BottleneckEntry, DilationScheme, GhostCnnConfig, GhostModuleConfig,
};
pub use layers::{
    BottleneckOptions, Buffers, BuffersMut, ConvBn, GhostBottleneck, GhostModule, Layer, Params,
    ParamsMut, SeBlock,
};

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{BatchNormState, ConvSpec, Scalar, Tensor};

/// Extent covered by a `k`-tap kernel at dilation `r`: `(k-1)·r + 1`.
pub fn effective_kernel(k: usize, r: usize) -> usize {
    (k - 1) * r + 1
}

/// Receptive field of a chain of `(kernel, stride, dilation)` layers.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &(k, s, r) in layers {
        rf += (effective_kernel(k, r) - 1) * jump;
        jump *= s;
    }
    rf
}

/// The backbone: stride-2 stem, Ghost bottlenecks, final 1×1 conv + BN.
pub struct GhostCnn<T: Scalar> {
    pub config: GhostCnnConfig,
    pub stem: ConvBn<T>,
    pub blocks: Vec<GhostBottleneck<T>>,
    pub head: ConvBn<T>,
}

impl<T: Scalar> GhostCnn<T> {
    /// Builds from `config` (scaled by its channel multiplier) with
    /// He-normal weights drawn from `rng`.
    pub fn new<R: Rng + ?Sized>(config: &GhostCnnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let config = config.scaled();
        let stem_spec = ConvSpec::new(3, config.stem_channels, 3)
            .with_stride(2)
            .with_same_padding();
        let stem = ConvBn::new(stem_spec, false, true, true, rng)?;
        let opts = BottleneckOptions {
            ghost_ratio: config.ghost_ratio,
            se_reduction: config.se_reduction,
            primary_kernel: config.primary_kernel,
        };
        let blocks = config
            .stages
            .iter()
            .map(|&e| GhostBottleneck::new(e, opts, rng))
            .collect::<Result<Vec<_>>>()?;
        let last = config.stages.last().map(|e| e.out_channels).unwrap_or(0);
        let head = ConvBn::new(
            ConvSpec::new(last, config.final_channels, 1),
            false,
            true,
            false,
            rng,
        )?;
        Ok(Self {
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.config.final_channels
    }

    pub fn total_stride(&self) -> usize {
        self.config.total_stride()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.total_stride();
        if x.c() != 3 {
            return Err(shape_err!("backbone expects RGB input, got {} channels", x.c()));
        }
        if x.h() % s != 0 || x.w() % s != 0 {
            return Err(shape_err!(
                "input {}x{} is not divisible by the backbone stride {s}",
                x.h(),
                x.w()
            ));
        }
        Ok(())
    }

    /// Output of the stem followed by the output of every stage.
    pub fn infer_stages(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x)?;
        let mut outs = vec![self.stem.infer(x)?];
        let mut y = outs[0].clone();
        for (i, b) in self.blocks.iter().enumerate() {
            y = b.infer(&y)?;
            let last_of_stage = self
                .blocks
                .get(i + 1)
                .is_none_or(|n| n.entry.stage != b.entry.stage);
            if last_of_stage {
                outs.push(y.clone());
            }
        }
        Ok(outs)
    }
}

impl<T: Scalar> Layer<T> for GhostCnn<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = self.stem.infer(x)?;
        for b in &self.blocks {
            y = b.infer(&y)?;
        }
        self.head.infer(&y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut y = self.stem.forward(x)?;
        for b in &mut self.blocks {
            y = b.forward(&y)?;
        }
        self.head.forward(&y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(upstream)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        self.stem.params(&format!("{prefix}.stem"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.blocks.{i}"), out);
        }
        self.head.params(&format!("{prefix}.final"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        self.stem.params_mut(&format!("{prefix}.stem"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("{prefix}.blocks.{i}"), out);
        }
        self.head.params_mut(&format!("{prefix}.final"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>) {
        self.stem.buffers_mut(&format!("{prefix}.stem"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.buffers_mut(&format!("{prefix}.blocks.{i}"), out);
        }
        self.head.buffers_mut(&format!("{prefix}.final"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>) {
        self.stem.buffers(&format!("{prefix}.stem"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.buffers(&format!("{prefix}.blocks.{i}"), out);
        }
        self.head.buffers(&format!("{prefix}.final"), out);
    }

    fn batchnorms_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormState<T>>) {
        self.stem.batchnorms_mut(out);
        for b in &mut self.blocks {
            b.batchnorms_mut(out);
        }
        self.head.batchnorms_mut(out);
    }
}
