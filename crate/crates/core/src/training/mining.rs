use rand::seq::index::sample;
use rand::Rng;

use super::loss::TripletLossConfig;

/// A query with its potential positives (best first) and hardest negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletTuple {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Positions and radii used to split a dataset around each query.
#[derive(Debug, Clone)]
pub struct MiningPool<'a> {
    positions: &'a [(f64, f64)],
    positive_radius: f64,
    negative_radius: f64,
}

impl<'a> MiningPool<'a> {
    pub fn new(positions: &'a [(f64, f64)], cfg: &TripletLossConfig) -> Self {
        Self {
            positions,
            positive_radius: cfg.positive_radius_m,
            negative_radius: cfg.negative_radius_m,
        }
    }

    fn distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.positions[a], self.positions[b]);
        (pa.0 - pb.0).hypot(pa.1 - pb.1)
    }

    /// Ids within the positive radius of `q`, excluding `q`.
    pub fn positives(&self, q: usize) -> Vec<usize> {
        (0..self.positions.len())
            .filter(|&i| i != q && self.distance(q, i) <= self.positive_radius)
            .collect()
    }

    /// Ids farther than the negative radius from `q`.
    pub fn negatives(&self, q: usize) -> Vec<usize> {
        (0..self.positions.len())
            .filter(|&i| self.distance(q, i) > self.negative_radius)
            .collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum()
}

/// Sorts `ids` by cached descriptor distance to `q`, ties by id.
fn rank_by_distance(q: usize, ids: &mut [usize], cache: &[Vec<f32>]) {
    let mut keyed: Vec<(f64, usize)> = ids.iter().map(|&i| (sq_dist(&cache[q], &cache[i]), i)).collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (slot, (_, i)) in ids.iter_mut().zip(keyed) {
        *slot = i;
    }
}

/// Builds the tuple for query `q`, or `None` when it has no positive or no
/// negative.
///
/// Negatives are the `negatives_per_tuple` nearest (in `cache`) among a
/// random draw of `negative_pool` candidates.
pub fn mine_tuple<R: Rng + ?Sized>(
    q: usize,
    pool: &MiningPool<'_>,
    cache: &[Vec<f32>],
    cfg: &TripletLossConfig,
    rng: &mut R,
) -> Option<TripletTuple> {
    let mut positives = pool.positives(q);
    if positives.is_empty() {
        return None;
    }
    let far = pool.negatives(q);
    if far.is_empty() {
        return None;
    }
    rank_by_distance(q, &mut positives, cache);
    let draw = cfg.negative_pool.min(far.len());
    let mut candidates: Vec<usize> = sample(rng, far.len(), draw)
        .into_iter()
        .map(|i| far[i])
        .collect();
    rank_by_distance(q, &mut candidates, cache);
    candidates.truncate(cfg.negatives_per_tuple);
    Some(TripletTuple {
        query: q,
        positives,
        negatives: candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(places: usize, views: usize, spacing: f64) -> Vec<(f64, f64)> {
        (0..places)
            .flat_map(|p| {
                let (x, y) = ((p % 4) as f64 * spacing, (p / 4) as f64 * spacing);
                (0..views).map(move |v| (x + v as f64, y - 0.5 * v as f64))
            })
            .collect()
    }

    #[test]
    fn isolated_query_is_skipped() {
        let pos = vec![(0.0, 0.0), (100.0, 0.0), (200.0, 0.0)];
        let cache = vec![vec![0.0f32; 2]; 3];
        let cfg = TripletLossConfig::default();
        let pool = MiningPool::new(&pos, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mine_tuple(0, &pool, &cache, &cfg, &mut rng).is_none());
    }

    #[test]
    fn grid_positives_and_negatives() {
        let pos = grid(8, 4, 100.0);
        let cfg = TripletLossConfig::default();
        let pool = MiningPool::new(&pos, &cfg);
        for q in 0..pos.len() {
            let place = q / 4;
            let want: Vec<usize> = (place * 4..place * 4 + 4).filter(|&i| i != q).collect();
            assert_eq!(pool.positives(q), want);
            let negs = pool.negatives(q);
            assert_eq!(negs.len(), pos.len() - 4);
            assert!(negs.iter().all(|&i| i / 4 != place));
        }
    }

    #[test]
    fn hardest_negatives_match_sort() {
        let pos = grid(12, 2, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cache: Vec<Vec<f32>> = (0..pos.len())
            .map(|_| (0..4).map(|_| rng.random::<f32>()).collect())
            .collect();
        let cfg = TripletLossConfig {
            negatives_per_tuple: 5,
            ..Default::default()
        };
        let pool = MiningPool::new(&pos, &cfg);
        let t = mine_tuple(0, &pool, &cache, &cfg, &mut rng).unwrap();
        // Pool exceeds the candidate count, so every far image is a candidate.
        let mut all: Vec<(f64, usize)> = pool
            .negatives(0)
            .into_iter()
            .map(|i| (sq_dist(&cache[0], &cache[i]), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = all.iter().take(5).map(|x| x.1).collect();
        assert_eq!(t.negatives, want);
        assert_eq!(t.positives, vec![1]);
    }
}
