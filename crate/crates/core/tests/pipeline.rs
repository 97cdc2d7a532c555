//! Synthetic data on disk through initialisation, indexing and evaluation.

use ghostvlad::ghostnet::GhostCnnConfig;
use ghostvlad::model::{ModelConfig, PlaceModel};
use ghostvlad::retrieval::{
    build_index, describe_records, evaluate, load_batch, read_manifest, split_records, synth_dataset, IndexFile,
    Split, SynthConfig,
};
use ghostvlad::training::{train_epoch, Sgd, SgdConfig, TrainingSet, TripletLossConfig};

fn small_data() -> SynthConfig {
    SynthConfig {
        seed: 11,
        places: 6,
        views: 4,
        width: 64,
        height: 32,
        ..SynthConfig::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        backbone: GhostCnnConfig::standard("5-2".parse().unwrap()).with_multiplier(0.25),
        clusters: 4,
        input_height: 32,
        input_width: 64,
        reduction_dim: 0,
    }
}

#[test]
fn disk_round_trip_index_and_recall() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_data()).unwrap().write(dir.path()).unwrap();
    let records = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 24);

    let db = split_records(&records, Split::Db);
    let queries = split_records(&records, Split::Query);
    assert_eq!((db.len(), queries.len()), (12, 12));

    let paths: Vec<_> = db.iter().map(|r| r.path(dir.path())).collect();
    let images = load_batch(&paths, 64, 32).unwrap();
    let mut model = PlaceModel::initialise(model_config(), &images, 5).unwrap();

    let set = TrainingSet::new(images.clone(), db.iter().map(|r| r.position()).collect()).unwrap();
    let loss = TripletLossConfig {
        negatives_per_tuple: 3,
        ..TripletLossConfig::default()
    };
    let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
    let stats = train_epoch(&mut model, &set, &loss, &mut sgd, 0, 1, |_| {}).unwrap();
    assert_eq!(stats.tuples, 12);
    assert!(stats.mean_loss.is_finite());

    model.fit_reduction(&images, 8, 1e-8).unwrap();
    let path = dir.path().join("model.gdnv");
    model.save(&path).unwrap();
    let model = PlaceModel::<f32>::load(&path).unwrap();
    assert_eq!(model.descriptor_dim(), 8);

    let index = build_index(&model, &db, dir.path()).unwrap();
    let q = describe_records(&model, &queries, dir.path()).unwrap();
    let file = IndexFile {
        db: index,
        queries: queries.iter().map(|r| r.id.clone()).zip(q).collect(),
    };
    let idx_path = dir.path().join("idx.gdnv");
    file.save(&idx_path).unwrap();
    let file = IndexFile::load(&idx_path).unwrap();
    assert_eq!(file.db.len(), 12);

    let table = evaluate(&file, &records, 25.0, &[1, 5, 10, 20, 25]).unwrap();
    assert_eq!(table.queries, 12);
    assert!(table.is_monotone());
    // Every query has two same-place db views, so the whole database always
    // contains a hit.
    assert_eq!(table.at(20), Some(1.0));
    assert_eq!(table.at(25), Some(1.0));
}

#[test]
fn retrieval_by_exact_descriptor() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_data()).unwrap().write(dir.path()).unwrap();
    let records = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    let db = split_records(&records, Split::Db);
    let paths: Vec<_> = db.iter().map(|r| r.path(dir.path())).collect();
    let model = PlaceModel::initialise(model_config(), &load_batch(&paths, 64, 32).unwrap(), 2).unwrap();
    let index = build_index(&model, &db, dir.path()).unwrap();
    for (i, row) in describe_records(&model, &db, dir.path()).unwrap().iter().enumerate() {
        let hit = &index.query_topn(row, 1).unwrap()[0];
        assert_eq!(hit.id, db[i].id);
        assert!(hit.distance < 1e-5);
    }
}
