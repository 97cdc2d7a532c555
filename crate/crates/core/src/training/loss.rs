use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss and mining settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub negatives_per_tuple: usize,
    /// Random candidates drawn before keeping the hardest negatives.
    pub negative_pool: usize,
    pub positive_radius_m: f64,
    pub negative_radius_m: f64,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            negatives_per_tuple: 10,
            negative_pool: 100,
            positive_radius_m: 10.0,
            negative_radius_m: 25.0,
        }
    }
}

impl TripletLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.negative_radius_m > self.positive_radius_m) || !(self.positive_radius_m > 0.0) {
            return Err(Error::Config(format!(
                "need 0 < positive radius ({}) < negative radius ({})",
                self.positive_radius_m, self.negative_radius_m
            )));
        }
        if self.negatives_per_tuple == 0 || self.negative_pool < self.negatives_per_tuple {
            return Err(Error::Config(format!(
                "negative pool {} must hold at least {} >= 1 negatives",
                self.negative_pool, self.negatives_per_tuple
            )));
        }
        Ok(())
    }
}

/// Loss value with its (sub)gradient wrt every input distance.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossValue {
    pub loss: f64,
    pub best_positive: usize,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

/// `Σ_j max(0, min_i d²(q,p_i) + m − d²(q,n_j))` over squared distances.
///
/// Ties among positives go to the lowest index.
pub fn triplet_loss(pos_d2: &[f64], neg_d2: &[f64], margin: f64) -> Result<TripletLossValue> {
    if pos_d2.is_empty() || neg_d2.is_empty() {
        return Err(Error::Data("triplet loss needs a positive and a negative".into()));
    }
    let (best, &dp) = pos_d2
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .expect("non-empty");
    let mut loss = 0.0;
    let mut grad_neg = vec![0.0; neg_d2.len()];
    let mut active = 0.0;
    for (g, &dn) in grad_neg.iter_mut().zip(neg_d2) {
        let h = dp + margin - dn;
        if h > 0.0 {
            loss += h;
            *g = -1.0;
            active += 1.0;
        }
    }
    let mut grad_pos = vec![0.0; pos_d2.len()];
    grad_pos[best] = active;
    Ok(TripletLossValue {
        loss,
        best_positive: best,
        grad_pos,
        grad_neg,
    })
}

/// Triplet loss on descriptors with squared Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorLoss {
    pub loss: f64,
    /// Gradients for the query, each positive, then each negative.
    pub grads: Vec<Vec<f32>>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn descriptor_triplet_loss(
    query: &[f32],
    positives: &[&[f32]],
    negatives: &[&[f32]],
    margin: f64,
) -> Result<DescriptorLoss> {
    let dp: Vec<f64> = positives.iter().map(|p| sq_dist(query, p)).collect();
    let dn: Vec<f64> = negatives.iter().map(|n| sq_dist(query, n)).collect();
    let v = triplet_loss(&dp, &dn, margin)?;
    let mut gq = vec![0.0f64; query.len()];
    let mut grads = vec![Vec::new()];
    for (other, &w) in positives.iter().chain(negatives).zip(v.grad_pos.iter().chain(&v.grad_neg)) {
        let mut g = vec![0.0f32; query.len()];
        if w != 0.0 {
            for ((gqj, gj), (&qj, &oj)) in gq.iter_mut().zip(&mut g).zip(query.iter().zip(*other)) {
                let diff = 2.0 * (qj as f64 - oj as f64) * w;
                *gqj += diff;
                *gj = -diff as f32;
            }
        }
        grads.push(g);
    }
    grads[0] = gq.into_iter().map(|v| v as f32).collect();
    Ok(DescriptorLoss {
        loss: v.loss,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;

    #[test]
    fn hand_example() {
        let v = triplet_loss(&[0.3, 0.2], &[0.25, 0.5], 0.1).unwrap();
        assert!((v.loss - 0.05).abs() < 1e-12);
        assert_eq!(v.best_positive, 1);
        assert_eq!(v.grad_pos, vec![0.0, 1.0]);
        assert_eq!(v.grad_neg, vec![-1.0, 0.0]);
    }

    #[test]
    fn inactive_hinge_is_zero() {
        let v = triplet_loss(&[0.1], &[0.5, 0.9], 0.1).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.grad_pos, vec![0.0]);
    }

    #[test]
    fn ties_pick_lowest_positive() {
        let v = triplet_loss(&[0.2, 0.2, 0.4], &[0.0], 0.1).unwrap();
        assert_eq!(v.best_positive, 0);
    }

    #[test]
    fn empty_lists_rejected() {
        assert!(triplet_loss(&[], &[1.0], 0.1).is_err());
        assert!(triplet_loss(&[1.0], &[], 0.1).is_err());
    }

    #[test]
    fn gradient_matches_differences() {
        let pos = [0.41, 0.23, 0.6];
        let neg = [0.2, 0.9, 0.31, 0.05];
        let v = triplet_loss(&pos, &neg, 0.1).unwrap();
        let mut x: Vec<f64> = pos.to_vec();
        x.extend_from_slice(&neg);
        let mut g = v.grad_pos.clone();
        g.extend_from_slice(&v.grad_neg);
        let c = grad_check(&x, &g, 1e-4, |z| triplet_loss(&z[..3], &z[3..], 0.1).unwrap().loss);
        assert!(c.max_rel_error < 1e-8, "{c:?}");
    }

    #[test]
    fn descriptor_gradient_matches_differences() {
        let q = [0.5f32, -0.2, 0.1];
        let p = [0.4f32, 0.0, 0.3];
        let n = [0.45f32, -0.1, 0.2];
        let v = descriptor_triplet_loss(&q, &[&p], &[&n], 0.1).unwrap();
        assert!(v.loss > 0.0);
        let x: Vec<f64> = q.iter().chain(&p).chain(&n).map(|&v| v as f64).collect();
        let g: Vec<f64> = v.grads.concat().iter().map(|&v| v as f64).collect();
        let f = |z: &[f64]| -> f64 {
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            triplet_loss(&[d(&z[..3], &z[3..6])], &[d(&z[..3], &z[6..])], 0.1).unwrap().loss
        };
        let c = grad_check(&x, &g, 1e-4, f);
        assert!(c.max_rel_error < 1e-5, "{c:?}");
    }

    #[test]
    fn config_validation() {
        assert!(TripletLossConfig::default().validate().is_ok());
        let bad = TripletLossConfig {
            negative_radius_m: 5.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
