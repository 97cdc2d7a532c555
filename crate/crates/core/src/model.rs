//! Backbone + VLAD pooling + optional whitening, with checkpoint I/O.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ghostnet::{
    Buffers, BuffersMut, GhostCnn, GhostCnnConfig, Layer, Params, ParamsMut,
};
use crate::netvlad::{
    apply_descriptor_reduction, fit_pca_whitening, local_descriptors, NetVlad, PcaWhitening,
};
use crate::tensor::io::{Checkpoint, Record};
use crate::tensor::{Scalar, Tensor};

/// Images pushed through the network at once during extraction.
const EXTRACT_CHUNK: usize = 16;

/// Everything needed to rebuild a model apart from its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: GhostCnnConfig,
    pub clusters: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Whitened output dimension; 0 disables the reduction.
    #[serde(default)]
    pub reduction_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let s = self.backbone.total_stride();
        if self.clusters == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.input_height % s != 0 || self.input_width % s != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {s}",
                self.input_width, self.input_height
            )));
        }
        Ok(())
    }
}

/// The full place-recognition network.
pub struct PlaceModel<T: Scalar> {
    pub config: ModelConfig,
    pub backbone: GhostCnn<T>,
    pub vlad: NetVlad<T>,
    pub pca: Option<PcaWhitening<T>>,
}

/// Sidecar path holding the [`ModelConfig`] of a checkpoint.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl<T: Scalar> PlaceModel<T> {
    /// Random backbone from `init_seed` with batch-norm statistics measured
    /// on `sample_images`; VLAD centers and α fitted on the local descriptors
    /// that backbone produces for the same images.
    pub fn initialise(config: ModelConfig, sample_images: &Tensor<T>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut backbone = GhostCnn::new(&config.backbone, &mut rng)?;
        calibrate_batchnorm(&mut backbone, sample_images)?;
        let maps = infer_chunked(&backbone, sample_images)?;
        let sample: Vec<T> = maps.iter().flat_map(local_descriptors).collect();
        let dim = backbone.out_channels();
        let vlad = NetVlad::fit(&sample, config.clusters, dim, init_seed ^ 0x5eed)?;
        Ok(Self {
            config,
            backbone,
            vlad,
            pca: None,
        })
    }

    pub fn from_parts(config: ModelConfig, backbone: GhostCnn<T>, vlad: NetVlad<T>) -> Result<Self> {
        if vlad.dim != backbone.out_channels() || vlad.clusters != config.clusters {
            return Err(shape_err!(
                "VLAD K={} D={} does not fit backbone width {} / K={}",
                vlad.clusters,
                vlad.dim,
                backbone.out_channels(),
                config.clusters
            ));
        }
        Ok(Self {
            config,
            backbone,
            vlad,
            pca: None,
        })
    }

    pub fn vlad_dim(&self) -> usize {
        self.vlad.output_dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.vlad_dim(), |p| p.out_dim)
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let want = [3, self.config.input_height, self.config.input_width];
        if [images.c(), images.h(), images.w()] != want {
            return Err(shape_err!(
                "images {:?} do not match the configured input {:?}",
                images.shape(),
                want
            ));
        }
        Ok(())
    }

    /// Unreduced VLAD vectors, one row per image.
    pub fn vlad_descriptors(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.n());
        for map in infer_chunked(&self.backbone, images)? {
            let v = self.vlad.infer(&map)?;
            out.extend((0..v.n()).map(|n| v.item(n).to_vec()));
        }
        Ok(out)
    }

    /// Final descriptors (reduced when a whitening is fitted).
    pub fn describe(&self, images: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let raw = self.vlad_descriptors(images)?;
        match &self.pca {
            Some(pw) => raw
                .iter()
                .map(|v| apply_descriptor_reduction(v, pw))
                .collect(),
            None => Ok(raw),
        }
    }

    /// Descriptor of a single `1×3×H×W` image.
    pub fn global_descriptor(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        if image.n() != 1 {
            return Err(shape_err!("expected one image, got {}", image.n()));
        }
        Ok(self.describe(image)?.remove(0))
    }

    /// Fits the whitening on the VLAD vectors of `images`.
    pub fn fit_reduction(&mut self, images: &Tensor<T>, out_dim: usize, eps_pca: f64) -> Result<()> {
        let raw: Vec<T> = self.vlad_descriptors(images)?.concat();
        self.pca = Some(fit_pca_whitening(&raw, self.vlad_dim(), out_dim, eps_pca)?);
        self.config.reduction_dim = out_dim;
        Ok(())
    }

    /// All weights, running statistics and whitening matrices.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let mut ps = Vec::new();
        self.params("", &mut ps);
        for (name, t) in ps {
            ck.push(Record::from_tensor(name, t));
        }
        let mut bs = Vec::new();
        self.buffers("", &mut bs);
        for (name, b) in bs {
            ck.push(vector_record(name, b));
        }
        if let Some(pw) = &self.pca {
            ck.push(Record::from_tensor("pca.mean", &pw.mean_tensor()));
            ck.push(Record::from_tensor("pca.proj", &pw.proj_tensor()));
        }
        ck
    }

    /// Rebuilds a model whose structure comes from `config` and whose every
    /// value comes from `ck`.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = GhostCnn::new(&config.backbone, &mut rng)?;
        let vlad = NetVlad::from_parts(
            ck.require("vlad.centers")?.to_tensor()?,
            ck.require("vlad.w")?.to_tensor()?,
            ck.require("vlad.b")?.to_tensor()?,
        )?;
        let mut model = Self::from_parts(config, backbone, vlad)?;
        {
            let mut ps = Vec::new();
            model.params_mut("", &mut ps);
            for (name, t) in ps {
                let rec = ck.require(&name)?;
                if rec.values.len() != t.len() {
                    return Err(Error::Format(format!(
                        "record {name} holds {} values, model expects {}",
                        rec.values.len(),
                        t.len()
                    )));
                }
                for (dst, &v) in t.data_mut().iter_mut().zip(&rec.values) {
                    *dst = T::from_f64(v as f64);
                }
            }
            let mut bs = Vec::new();
            model.buffers_mut("", &mut bs);
            for (name, b) in bs {
                let rec = ck.require(&name)?;
                if rec.values.len() != b.len() {
                    return Err(Error::Format(format!("buffer {name} has the wrong length")));
                }
                *b = rec.values.iter().map(|&v| T::from_f64(v as f64)).collect();
            }
        }
        if let (Some(mean), Some(proj)) = (ck.get("pca.mean"), ck.get("pca.proj")) {
            model.pca = Some(PcaWhitening::from_tensors(&mean.to_tensor()?, &proj.to_tensor()?)?);
        }
        Ok(model)
    }

    /// Writes the weights to `path` and the config to its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        let js = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Config(format!("model config: {e}")))?;
        std::fs::write(config_path(path), js)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let js = std::fs::read_to_string(config_path(path))?;
        let config: ModelConfig =
            serde_json::from_str(&js).map_err(|e| Error::Config(format!("model config: {e}")))?;
        Self::from_checkpoint(config, &Checkpoint::load(path)?)
    }
}

fn vector_record<T: Scalar>(name: String, values: &[T]) -> Record {
    Record {
        name,
        dims: vec![values.len() as u64],
        values: values.iter().map(|v| v.as_f64() as f32).collect(),
    }
}

fn chunks<T: Scalar>(images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let per = images.item_len();
    let [n, c, h, w] = images.shape();
    (0..n)
        .step_by(EXTRACT_CHUNK)
        .map(|start| {
            let end = (start + EXTRACT_CHUNK).min(n);
            Tensor::new([end - start, c, h, w], images.data()[start * per..end * per].to_vec())
        })
        .collect()
}

/// Sets every batch-norm running statistic to the mean of its batch
/// statistics over chunks of `images`.
pub fn calibrate_batchnorm<T: Scalar>(net: &mut GhostCnn<T>, images: &Tensor<T>) -> Result<()> {
    let saved: Vec<T> = {
        let mut bns = Vec::new();
        net.batchnorms_mut(&mut bns);
        bns.iter().map(|b| b.momentum).collect()
    };
    for (i, chunk) in chunks(images)?.iter().enumerate() {
        let mut bns = Vec::new();
        net.batchnorms_mut(&mut bns);
        for bn in bns {
            bn.momentum = T::from_f64(1.0 / (i + 1) as f64);
        }
        net.forward(chunk)?;
    }
    let mut bns = Vec::new();
    net.batchnorms_mut(&mut bns);
    for (bn, m) in bns.into_iter().zip(saved) {
        bn.momentum = m;
    }
    Ok(())
}

fn infer_chunked<T: Scalar>(net: &GhostCnn<T>, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    chunks(images)?.iter().map(|c| net.infer(c)).collect()
}

/// Training-mode path: backbone then VLAD, no whitening.
impl<T: Scalar> Layer<T> for PlaceModel<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.vlad.infer(&self.backbone.infer(x)?)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let map = self.backbone.forward(x)?;
        self.vlad.forward(&map)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.vlad.backward(upstream)?;
        self.backbone.backward(&g)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.params(&p("backbone"), out);
        self.vlad.params(&p("vlad"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.backbone.params_mut(&p("backbone"), out);
        self.vlad.params_mut(&p("vlad"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut BuffersMut<'a, T>) {
        let p = if prefix.is_empty() { "backbone".to_string() } else { format!("{prefix}.backbone") };
        self.backbone.buffers_mut(&p, out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Buffers<'a, T>) {
        let p = if prefix.is_empty() { "backbone".to_string() } else { format!("{prefix}.backbone") };
        self.backbone.buffers(&p, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghostnet::DilationScheme;

    fn small_config() -> ModelConfig {
        ModelConfig {
            backbone: GhostCnnConfig::standard("5-2".parse::<DilationScheme>().unwrap())
                .with_multiplier(0.25),
            clusters: 8,
            input_height: 96,
            input_width: 128,
            reduction_dim: 0,
        }
    }

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn([n, 3, 96, 128], 1.0, &mut rng)
    }

    #[test]
    fn calibration_sets_stem_mean_to_data_mean() {
        let x = images(32, 4);
        let mut net = GhostCnn::<f32>::new(&small_config().backbone, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let stem = &net.stem;
        let y = crate::tensor::conv2d_forward(&x, stem.weight.data(), stem.bias.as_ref().map(|b| b.data()), &stem.spec)
            .unwrap();
        let plane = y.plane();
        let want: Vec<f64> = (0..y.c())
            .map(|c| {
                let s: f64 = (0..y.n()).flat_map(|n| &y.item(n)[c * plane..(c + 1) * plane]).map(|&v| v as f64).sum();
                s / (y.n() * plane) as f64
            })
            .collect();
        let momentum = net.stem.bn.as_ref().unwrap().momentum;
        calibrate_batchnorm(&mut net, &x).unwrap();
        let bn = net.stem.bn.as_ref().unwrap();
        for (got, want) in bn.running_mean.iter().zip(&want) {
            assert!((*got as f64 - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert_eq!(bn.momentum, momentum);
    }

    #[test]
    fn descriptor_dimension_and_norm() {
        let mut cfg = small_config();
        cfg.backbone = cfg.backbone.with_multiplier(1.0);
        let x = images(2, 1);
        let m = PlaceModel::<f32>::initialise(cfg, &x, 3).unwrap();
        assert_eq!(m.vlad.dim, 960);
        let d = m.global_descriptor(&Tensor::new([1, 3, 96, 128], x.item(0).to_vec()).unwrap()).unwrap();
        assert_eq!(d.len(), 7680);
        let norm: f32 = d.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_images_identical_descriptors() {
        let x = images(3, 2);
        let m = PlaceModel::<f32>::initialise(small_config(), &x, 4).unwrap();
        let both = Tensor::stack(&[&x, &x]).unwrap();
        let d = m.describe(&both).unwrap();
        for i in 0..3 {
            assert_eq!(d[i], d[i + 3]);
        }
        assert!(m.describe(&images(1, 0).reshape([1, 3, 128, 96]).unwrap()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let x = images(4, 5);
        let mut m = PlaceModel::<f32>::initialise(small_config(), &x, 6).unwrap();
        // Move the running statistics off their defaults.
        m.forward(&x).unwrap();
        m.fit_reduction(&x, 3, 1e-8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gdnv");
        m.save(&path).unwrap();
        let back = PlaceModel::<f32>::load(&path).unwrap();
        assert_eq!(back.describe(&x).unwrap(), m.describe(&x).unwrap());
        assert_eq!(back.descriptor_dim(), 3);
        let ck = back.to_checkpoint();
        for name in ["vlad.centers", "vlad.w", "vlad.b", "pca.mean", "pca.proj"] {
            assert!(ck.get(name).is_some(), "{name}");
        }
    }
}
