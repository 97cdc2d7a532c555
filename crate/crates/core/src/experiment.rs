//! In-memory synthetic train-and-evaluate runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ghostnet::{DilationScheme, GhostCnnConfig};
use crate::model::{ModelConfig, PlaceModel};
use crate::retrieval::{
    image_to_tensor, recall_at_n, synth_dataset, DescriptorIndex, RecallTable, Split, SynthConfig,
    DEFAULT_RECALL_AT, DEFAULT_TOLERANCE_M,
};
use crate::tensor::Tensor;
use crate::training::{train_epoch, BatchLog, EpochStats, Sgd, SgdConfig, TrainingSet, TripletLossConfig};

/// Derives an independent seed for a named component.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finaliser
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub dataset: SynthConfig,
    pub backbone: GhostCnnConfig,
    pub clusters: usize,
    pub loss: TripletLossConfig,
    pub optimiser: SgdConfig,
    pub epochs: usize,
    pub seed: u64,
    pub tolerance_m: f64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let scheme: DilationScheme = "5-2".parse().expect("static scheme");
        Self {
            dataset: SynthConfig::default(),
            backbone: GhostCnnConfig::standard(scheme).with_multiplier(0.25),
            clusters: 8,
            loss: TripletLossConfig::default(),
            optimiser: SgdConfig::default(),
            epochs: 30,
            seed: 7,
            tolerance_m: DEFAULT_TOLERANCE_M,
        }
    }
}

/// Recall before training, after every epoch, and the epoch summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeskRun {
    pub untrained: RecallTable,
    pub per_epoch: Vec<RecallTable>,
    #[serde(skip)]
    pub epochs: Vec<EpochStats>,
}

impl DeskRun {
    pub fn trained(&self) -> &RecallTable {
        self.per_epoch.last().unwrap_or(&self.untrained)
    }
}

struct Split2 {
    images: Tensor<f32>,
    positions: Vec<(f64, f64)>,
}

fn evaluate(model: &PlaceModel<f32>, db: &Split2, queries: &Split2, tolerance: f64) -> Result<RecallTable> {
    let rows = model.describe(&db.images)?;
    let ids = (0..rows.len()).map(|i| format!("{i:06}")).collect();
    let index = DescriptorIndex::new(ids, rows)?;
    let q = model.describe(&queries.images)?;
    recall_at_n(&index, &db.positions, &q, &queries.positions, tolerance, &DEFAULT_RECALL_AT)
}

/// Generates the dataset, trains on the `db` views and evaluates the `query`
/// views against them.
pub fn run_desk(
    cfg: &DeskConfig,
    mut on_batch: impl FnMut(&BatchLog),
    mut on_epoch: impl FnMut(&EpochStats, &RecallTable),
) -> Result<DeskRun> {
    let data = synth_dataset(&SynthConfig {
        seed: sub_seed(cfg.seed, "dataset"),
        ..cfg.dataset
    })?;
    let (w, h) = (cfg.dataset.width, cfg.dataset.height);
    let gather = |split: Split| -> Result<Split2> {
        let picked: Vec<usize> = (0..data.records.len()).filter(|&i| data.records[i].split == split).collect();
        let items: Vec<Tensor<f32>> = picked.iter().map(|&i| image_to_tensor(&data.images[i], w, h)).collect();
        let refs: Vec<&Tensor<f32>> = items.iter().collect();
        Ok(Split2 {
            images: Tensor::stack(&refs)?,
            positions: picked.iter().map(|&i| data.records[i].position()).collect(),
        })
    };
    let db = gather(Split::Db)?;
    let queries = gather(Split::Query)?;

    let model_cfg = ModelConfig {
        backbone: cfg.backbone.clone(),
        clusters: cfg.clusters,
        input_height: h,
        input_width: w,
        reduction_dim: 0,
    };
    let mut model = PlaceModel::initialise(model_cfg, &db.images, sub_seed(cfg.seed, "init"))?;
    let untrained = evaluate(&model, &db, &queries, cfg.tolerance_m)?;

    let set = TrainingSet::new(db.images.clone(), db.positions.clone())?;
    let mut sgd = Sgd::new(cfg.optimiser)?;
    let shuffle = sub_seed(cfg.seed, "shuffle");
    let mut per_epoch = Vec::new();
    let mut epochs = Vec::new();
    for e in 0..cfg.epochs {
        let stats = train_epoch(&mut model, &set, &cfg.loss, &mut sgd, e, shuffle, &mut on_batch)?;
        let table = evaluate(&model, &db, &queries, cfg.tolerance_m)?;
        on_epoch(&stats, &table);
        epochs.push(stats);
        per_epoch.push(table);
    }
    Ok(DeskRun {
        untrained,
        per_epoch,
        epochs,
    })
}
