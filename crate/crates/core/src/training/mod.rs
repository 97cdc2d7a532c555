//! Triplet-loss training from geotagged images.

mod loss;
mod mining;
mod sgd;

pub use loss::{
    descriptor_triplet_loss, triplet_loss, DescriptorLoss, TripletLossConfig, TripletLossValue,
};
pub use mining::{mine_tuple, MiningPool, TripletTuple};
pub use sgd::{sgd_step, Sgd, SgdConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ghostnet::Layer;
use crate::model::PlaceModel;
use crate::tensor::Tensor;

/// Images and planar positions the model trains on.
pub struct TrainingSet {
    /// `M×3×H×W`.
    pub images: Tensor<f32>,
    pub positions: Vec<(f64, f64)>,
}

impl TrainingSet {
    pub fn new(images: Tensor<f32>, positions: Vec<(f64, f64)>) -> Result<Self> {
        if images.n() != positions.len() {
            return Err(Error::Data(format!(
                "{} images with {} positions",
                images.n(),
                positions.len()
            )));
        }
        Ok(Self { images, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn gather(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let per = self.images.item_len();
        let mut data = Vec::with_capacity(ids.len() * per);
        for &i in ids {
            data.extend_from_slice(self.images.item(i));
        }
        let [_, c, h, w] = self.images.shape();
        Tensor::new([ids.len(), c, h, w], data)
    }
}

/// One optimiser step's summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub tuples: usize,
}

/// Per-epoch summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss per tuple.
    pub mean_loss: f64,
    pub tuples: usize,
    pub batches: usize,
}

/// Descriptor cache used for mining, one unreduced VLAD vector per image.
pub fn descriptor_cache(model: &PlaceModel<f32>, set: &TrainingSet) -> Result<Vec<Vec<f32>>> {
    model.vlad_descriptors(&set.images)
}

/// Runs forward and backward over a batch of tuples and returns the summed
/// loss. Parameter gradients are left accumulated in the model.
pub fn accumulate_batch(
    model: &mut PlaceModel<f32>,
    set: &TrainingSet,
    tuples: &[TripletTuple],
    margin: f64,
) -> Result<f64> {
    // Each tuple contributes query, best positive, then its negatives.
    let mut ids = Vec::new();
    let mut spans = Vec::with_capacity(tuples.len());
    for t in tuples {
        let start = ids.len();
        ids.push(t.query);
        ids.push(t.positives[0]);
        ids.extend_from_slice(&t.negatives);
        spans.push((start, ids.len()));
    }
    let batch = set.gather(&ids)?;
    let desc = model.forward(&batch)?;
    let dim = desc.c();
    let rows: Vec<&[f32]> = (0..desc.n()).map(|n| desc.item(n)).collect();
    let mut grad = vec![0.0f32; desc.len()];
    let mut total = 0.0;
    for &(start, end) in &spans {
        let q = rows[start];
        let pos = [rows[start + 1]];
        let negs = &rows[start + 2..end];
        let v = descriptor_triplet_loss(q, &pos, negs, margin)?;
        total += v.loss;
        for (slot, g) in (start..end).zip(v.grads) {
            for (dst, gv) in grad[slot * dim..(slot + 1) * dim].iter_mut().zip(g) {
                *dst += gv;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("loss became {total}")));
    }
    model.backward(&Tensor::new(desc.shape(), grad)?)?;
    Ok(total)
}

/// One pass over the shuffled training queries.
///
/// The mining cache is rebuilt once at the start of the epoch. Batches hold
/// `sgd.batch_size` tuples; queries with no positive are skipped.
pub fn train_epoch(
    model: &mut PlaceModel<f32>,
    set: &TrainingSet,
    loss_cfg: &TripletLossConfig,
    sgd: &mut Sgd,
    epoch: usize,
    seed: u64,
    mut on_batch: impl FnMut(&BatchLog),
) -> Result<EpochStats> {
    if set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    loss_cfg.validate()?;
    let cache = descriptor_cache(model, set)?;
    let pool = MiningPool::new(&set.positions, loss_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);

    let mut tuples = Vec::new();
    for &q in &order {
        if let Some(t) = mine_tuple(q, &pool, &cache, loss_cfg, &mut rng) {
            tuples.push(t);
        }
    }
    if tuples.is_empty() {
        return Err(Error::Data("no query has both a positive and a negative".into()));
    }

    let mut total = 0.0;
    let mut batches = 0;
    for (b, chunk) in tuples.chunks(sgd.config.batch_size).enumerate() {
        model.zero_grad();
        let loss = accumulate_batch(model, set, chunk, loss_cfg.margin)?;
        sgd.step(model)?;
        total += loss;
        batches += 1;
        on_batch(&BatchLog {
            epoch,
            batch: b,
            loss,
            tuples: chunk.len(),
        });
    }
    Ok(EpochStats {
        epoch,
        mean_loss: total / tuples.len() as f64,
        tuples: tuples.len(),
        batches,
    })
}
