use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{image_io::load_batch, ImageRecord};
use crate::error::{shape_err, Error, Result};
use crate::model::PlaceModel;
use crate::tensor::io::{Checkpoint, Record};

pub const DEFAULT_TOLERANCE_M: f64 = 25.0;
pub const DEFAULT_RECALL_AT: [usize; 5] = [1, 5, 10, 20, 25];

const NORM_TOL: f64 = 1e-5;
const LOAD_CHUNK: usize = 64;

/// Exhaustive-search database of unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
}

/// One retrieved database entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub id: String,
    pub distance: f64,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

impl DescriptorIndex {
    pub fn new(ids: Vec<String>, descriptors: Vec<Vec<f32>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("cannot index an empty database".into()));
        }
        if ids.len() != descriptors.len() {
            return Err(shape_err!("{} ids for {} descriptors", ids.len(), descriptors.len()));
        }
        let dim = descriptors[0].len();
        let mut rows = Vec::with_capacity(dim * ids.len());
        for (id, d) in ids.iter().zip(&descriptors) {
            if d.len() != dim {
                return Err(shape_err!("descriptor {id} has length {} not {dim}", d.len()));
            }
            let n = norm(d);
            if (n - 1.0).abs() > NORM_TOL {
                return Err(Error::Numerical(format!("descriptor {id} has norm {n}")));
            }
            rows.extend_from_slice(d);
        }
        Ok(Self { ids, dim, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// The `n` nearest rows by Euclidean distance, ascending, ties by id.
    pub fn query_topn(&self, descriptor: &[f32], n: usize) -> Result<Vec<Hit>> {
        if descriptor.len() != self.dim {
            return Err(shape_err!(
                "query has dimension {} but the index holds {}",
                descriptor.len(),
                self.dim
            ));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let d2: f64 = self
                    .row(i)
                    .iter()
                    .zip(descriptor)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                (d2.sqrt(), i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1])));
        scored.truncate(n);
        Ok(scored
            .into_iter()
            .map(|(distance, row)| Hit {
                row,
                id: self.ids[row].clone(),
                distance,
            })
            .collect())
    }
}

/// Recall per N over a set of queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallTable {
    pub queries: usize,
    pub tolerance_m: f64,
    /// `(N, recall@N)` in the order requested.
    pub recall: Vec<(usize, f64)>,
}

impl RecallTable {
    pub fn at(&self, n: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == n).map(|r| r.1)
    }

    pub fn is_monotone(&self) -> bool {
        let mut sorted = self.recall.clone();
        sorted.sort_by_key(|r| r.0);
        sorted.windows(2).all(|w| w[0].1 <= w[1].1)
    }
}

impl fmt::Display for RecallTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries: {}  tolerance: {} m", self.queries, self.tolerance_m)?;
        for (n, r) in &self.recall {
            writeln!(f, "recall@{n:<3} {:.4}", r)?;
        }
        Ok(())
    }
}

/// Recall table from each query's 1-based rank of its first correct hit.
pub fn recall_from_first_hits(first_hits: &[Option<usize>], at: &[usize], tolerance_m: f64) -> Result<RecallTable> {
    if first_hits.is_empty() {
        return Err(Error::Data("recall needs at least one query".into()));
    }
    if at.contains(&0) {
        return Err(Error::Config("recall@0 is undefined".into()));
    }
    let total = first_hits.len() as f64;
    let recall = at
        .iter()
        .map(|&n| {
            let hits = first_hits.iter().filter(|r| matches!(r, Some(k) if *k <= n)).count();
            (n, hits as f64 / total)
        })
        .collect();
    Ok(RecallTable {
        queries: first_hits.len(),
        tolerance_m,
        recall,
    })
}

fn check_tolerance(tolerance_m: f64) -> Result<()> {
    if !(tolerance_m > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance_m}")));
    }
    Ok(())
}

/// Rank of the first database row within `tolerance_m` of each query, looking
/// at most `depth` results deep.
pub fn first_hit_ranks(
    index: &DescriptorIndex,
    db_positions: &[(f64, f64)],
    queries: &[Vec<f32>],
    query_positions: &[(f64, f64)],
    tolerance_m: f64,
    depth: usize,
) -> Result<Vec<Option<usize>>> {
    check_tolerance(tolerance_m)?;
    if db_positions.len() != index.len() || queries.len() != query_positions.len() {
        return Err(shape_err!("positions do not line up with descriptors"));
    }
    queries
        .par_iter()
        .zip(query_positions)
        .map(|(q, &(qx, qy))| {
            let hits = index.query_topn(q, depth)?;
            Ok(hits.iter().position(|h| {
                let (x, y) = db_positions[h.row];
                (x - qx).hypot(y - qy) <= tolerance_m
            }).map(|k| k + 1))
        })
        .collect()
}

/// Recall@N for each `N` in `at`.
pub fn recall_at_n(
    index: &DescriptorIndex,
    db_positions: &[(f64, f64)],
    queries: &[Vec<f32>],
    query_positions: &[(f64, f64)],
    tolerance_m: f64,
    at: &[usize],
) -> Result<RecallTable> {
    check_tolerance(tolerance_m)?;
    if queries.is_empty() {
        return Err(Error::Data("recall needs at least one query".into()));
    }
    let depth = at.iter().copied().max().unwrap_or(0);
    let ranks = first_hit_ranks(index, db_positions, queries, query_positions, tolerance_m, depth)?;
    recall_from_first_hits(&ranks, at, tolerance_m)
}

/// Final descriptors of `records`, in the given order.
pub fn describe_records(model: &PlaceModel<f32>, records: &[ImageRecord], root: &Path) -> Result<Vec<Vec<f32>>> {
    let (w, h) = (model.config.input_width, model.config.input_height);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(LOAD_CHUNK) {
        let paths: Vec<_> = chunk.iter().map(|r| r.path(root)).collect();
        out.extend(model.describe(&load_batch(&paths, w, h)?)?);
    }
    Ok(out)
}

/// Index over `db` sorted by id.
pub fn build_index(model: &PlaceModel<f32>, db: &[ImageRecord], root: &Path) -> Result<DescriptorIndex> {
    if db.is_empty() {
        return Err(Error::Data("cannot index an empty database".into()));
    }
    let mut sorted = db.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let rows = describe_records(model, &sorted, root)?;
    DescriptorIndex::new(sorted.into_iter().map(|r| r.id).collect(), rows)
}

/// Database index plus the query descriptors evaluated against it.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexFile {
    pub db: DescriptorIndex,
    pub queries: Vec<(String, Vec<f32>)>,
}

const DB_PREFIX: &str = "db/";
const QUERY_PREFIX: &str = "query/";

impl IndexFile {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let dim = self.db.dim as u64;
        for (i, id) in self.db.ids.iter().enumerate() {
            ck.push(Record {
                name: format!("{DB_PREFIX}{id}"),
                dims: vec![dim],
                values: self.db.row(i).to_vec(),
            });
        }
        for (id, q) in &self.queries {
            ck.push(Record {
                name: format!("{QUERY_PREFIX}{id}"),
                dims: vec![q.len() as u64],
                values: q.clone(),
            });
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut queries = Vec::new();
        for r in &ck.records {
            if let Some(id) = r.name.strip_prefix(DB_PREFIX) {
                ids.push(id.to_string());
                rows.push(r.values.clone());
            } else if let Some(id) = r.name.strip_prefix(QUERY_PREFIX) {
                queries.push((id.to_string(), r.values.clone()));
            } else {
                return Err(Error::Format(format!("unexpected record {} in index", r.name)));
            }
        }
        let db = DescriptorIndex::new(ids, rows)?;
        if let Some((id, q)) = queries.iter().find(|q| q.1.len() != db.dim) {
            return Err(shape_err!("query {id} has dimension {} not {}", q.len(), db.dim));
        }
        Ok(Self { db, queries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Recall of the stored queries, with positions looked up in `records`.
pub fn evaluate(file: &IndexFile, records: &[ImageRecord], tolerance_m: f64, at: &[usize]) -> Result<RecallTable> {
    let by_id: HashMap<&str, (f64, f64)> = records.iter().map(|r| (r.id.as_str(), r.position())).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("id {id} is missing from the manifest")))
    };
    let db_pos = file.db.ids.iter().map(|id| lookup(id)).collect::<Result<Vec<_>>>()?;
    let q_pos = file.queries.iter().map(|q| lookup(&q.0)).collect::<Result<Vec<_>>>()?;
    let q_desc: Vec<Vec<f32>> = file.queries.iter().map(|q| q.1.clone()).collect();
    recall_at_n(&file.db, &db_pos, &q_desc, &q_pos, tolerance_m, at)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = norm(&v) as f32;
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_index(rows: usize, dim: usize, seed: u64) -> DescriptorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let desc = (0..rows)
            .map(|_| unit((0..dim).map(|_| rng.random::<f32>() - 0.5).collect()))
            .collect();
        DescriptorIndex::new((0..rows).map(|i| format!("r{i:03}")).collect(), desc).unwrap()
    }

    #[test]
    fn identical_query_ranks_first() {
        let idx = random_index(20, 8, 1);
        let hits = idx.query_topn(idx.row(7), 3).unwrap();
        assert_eq!(hits[0].id, "r007");
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn oversized_n_is_truncated() {
        let idx = random_index(5, 4, 2);
        assert_eq!(idx.query_topn(idx.row(0), 50).unwrap().len(), 5);
        assert!(idx.query_topn(&[1.0], 1).is_err());
    }

    #[test]
    fn empty_and_unnormalised_rejected() {
        assert!(DescriptorIndex::new(vec![], vec![]).is_err());
        assert!(DescriptorIndex::new(vec!["a".into()], vec![vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let idx = DescriptorIndex::new(
            vec!["b".into(), "a".into(), "c".into()],
            vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]],
        )
        .unwrap();
        let ids: Vec<String> = idx.query_topn(&[0.0, 1.0], 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    proptest! {
        #[test]
        fn ranking_matches_sort_oracle(seed in any::<u64>(), rows in 1usize..40, dim in 1usize..10) {
            let idx = random_index(rows, dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(!seed);
            let q = unit((0..dim).map(|_| rng.random::<f32>() - 0.5).collect());
            let hits = idx.query_topn(&q, rows).unwrap();
            let mut oracle: Vec<(f64, String)> = (0..rows)
                .map(|i| {
                    let d: f64 = idx.row(i).iter().zip(&q).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                    (d.sqrt(), idx.ids()[i].clone())
                })
                .collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let got: Vec<String> = hits.iter().map(|h| h.id.clone()).collect();
            let want: Vec<String> = oracle.into_iter().map(|o| o.1).collect();
            prop_assert_eq!(got, want);
            prop_assert!(hits.windows(2).all(|w| w[0].distance <= w[1].distance));
            prop_assert!(hits.iter().all(|h| h.distance >= 0.0));
        }
    }

    #[test]
    fn constructed_first_hits() {
        let t = recall_from_first_hits(&[Some(1), Some(3), Some(7), None], &DEFAULT_RECALL_AT, 25.0).unwrap();
        assert_eq!(t.at(1), Some(0.25));
        assert_eq!(t.at(5), Some(0.5));
        assert_eq!(t.at(10), Some(0.75));
        assert_eq!(t.at(25), Some(0.75));
        assert!(t.is_monotone());
        assert!(recall_from_first_hits(&[], &[1], 25.0).is_err());
    }

    #[test]
    fn perfect_retrieval_gives_full_recall() {
        let idx = random_index(10, 6, 3);
        let db_pos: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 100.0, 0.0)).collect();
        let queries: Vec<Vec<f32>> = (0..10).map(|i| idx.row(i).to_vec()).collect();
        let t = recall_at_n(&idx, &db_pos, &queries, &db_pos, 25.0, &DEFAULT_RECALL_AT).unwrap();
        assert!(t.recall.iter().all(|r| r.1 == 1.0));
        assert!(recall_at_n(&idx, &db_pos, &queries, &db_pos, 0.0, &[1]).is_err());
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.gdnv");
        let db = random_index(6, 5, 4);
        let file = IndexFile {
            queries: vec![("q1".into(), db.row(2).to_vec())],
            db,
        };
        file.save(&path).unwrap();
        assert_eq!(IndexFile::load(&path).unwrap(), file);
    }
}
