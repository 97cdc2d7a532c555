use crate::error::{shape_err, Error, Result};
use crate::ghostnet::{Buffers, BuffersMut, Layer, Params, ParamsMut};
use crate::tensor::{gemm, l2_normalize, l2_normalize_backward, softmax_rows, Scalar, Tensor};

use super::kmeans::kmeans_init;

/// Normalisation guard used throughout the layer.
pub const VLAD_EPS: f64 = 1e-12;

/// Target odds between the nearest and second-nearest assignment at init.
const ASSIGNMENT_ODDS: f64 = 100.0;

/// Local descriptors of a `1×D×h×w` (or `N×D×h×w`) map as row-major
/// `(N·h·w) × D` rows, each L2-normalised.
pub fn local_descriptors<T: Scalar>(map: &Tensor<T>) -> Vec<T> {
    let (d, p) = (map.c(), map.plane());
    let eps = T::from_f64(VLAD_EPS);
    let mut out = Vec::with_capacity(map.n() * p * d);
    let mut row = vec![T::zero(); d];
    for n in 0..map.n() {
        let item = map.item(n);
        for i in 0..p {
            for (j, r) in row.iter_mut().enumerate() {
                *r = item[j * p + i];
            }
            out.extend(l2_normalize(&row, eps));
        }
    }
    out
}

/// `ln(odds) / (m₂ − m₁)` averaged over the sample, where `m₁`, `m₂` are the
/// squared distances to the nearest and second-nearest centers.
pub fn estimate_alpha<T: Scalar>(centers: &[T], sample: &[T], dim: usize) -> Result<f64> {
    let k = centers.len() / dim;
    if k < 2 {
        return Ok(1.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for x in sample.chunks(dim) {
        let mut d: Vec<f64> = centers
            .chunks(dim)
            .map(|c| {
                c.iter()
                    .zip(x)
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let gap = d[1] - d[0];
        if gap > 1e-12 {
            total += ASSIGNMENT_ODDS.ln() / gap;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Numerical(
            "every sampled descriptor is equidistant from its two nearest centers".into(),
        ));
    }
    Ok(total / count as f64)
}

struct ImageRecord<T> {
    x: Vec<T>,
    x_hat: Vec<T>,
    assign: Vec<T>,
    mass: Vec<T>,
    v: Vec<T>,
    u: Vec<T>,
}

/// Trainable VLAD pooling.
///
/// Input `N×D×h×w`, output `N×(K·D)×1×1`. The `K×D` residual matrix is stored
/// row per cluster, so flattening it row-major puts element `(j, k)` at
/// `k·D + j`.
pub struct NetVlad<T: Scalar> {
    pub clusters: usize,
    pub dim: usize,
    pub alpha: f64,
    /// `1×1×K×D`.
    pub centers: Tensor<T>,
    /// `1×1×K×D`.
    pub w: Tensor<T>,
    /// `1×1×1×K`.
    pub b: Tensor<T>,
    record: Option<(Vec<ImageRecord<T>>, [usize; 4])>,
}

impl<T: Scalar> NetVlad<T> {
    /// Assignment parameters `w_k = 2α·c_k`, `b_k = −α‖c_k‖²`.
    pub fn from_centers(centers: Vec<T>, clusters: usize, dim: usize, alpha: f64) -> Result<Self> {
        if clusters == 0 || dim == 0 || centers.len() != clusters * dim {
            return Err(Error::Config(format!(
                "{} center values for K={clusters}, D={dim}",
                centers.len()
            )));
        }
        let a = T::from_f64(alpha);
        let two = T::from_f64(2.0);
        let w: Vec<T> = centers.iter().map(|&c| two * a * c).collect();
        let b: Vec<T> = centers
            .chunks(dim)
            .map(|c| -a * c.iter().map(|&v| v * v).sum::<T>())
            .collect();
        Ok(Self {
            clusters,
            dim,
            alpha,
            centers: Tensor::new([1, 1, clusters, dim], centers)?,
            w: Tensor::new([1, 1, clusters, dim], w)?,
            b: Tensor::new([1, 1, 1, clusters], b)?,
            record: None,
        })
    }

    /// Clusters L2-normalised `sample` rows with seeded k-means and sets α
    /// from the same sample.
    pub fn fit(sample: &[T], clusters: usize, dim: usize, seed: u64) -> Result<Self> {
        let centers = kmeans_init(sample, dim, clusters, seed, 100, 1e-6)?;
        let alpha = estimate_alpha(&centers, sample, dim)?;
        Self::from_centers(centers, clusters, dim, alpha)
    }

    /// Rebuilds from stored tensors.
    pub fn from_parts(centers: Tensor<T>, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        let (k, d) = (centers.h(), centers.w());
        if centers.len() != k * d || w.shape() != centers.shape() || b.len() != k {
            return Err(shape_err!(
                "VLAD parts {:?} {:?} {:?}",
                centers.shape(),
                w.shape(),
                b.shape()
            ));
        }
        Ok(Self {
            clusters: k,
            dim: d,
            alpha: f64::NAN,
            centers,
            w,
            b: b.reshape([1, 1, 1, k])?,
            record: None,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.clusters * self.dim
    }

    /// `softmax_k(w_k·x + b_k)` for one descriptor.
    pub fn soft_assign(&self, x: &[T]) -> Vec<T> {
        let logits: Vec<T> = self
            .w
            .data()
            .chunks(self.dim)
            .zip(self.b.data())
            .map(|(wk, &bk)| wk.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() + bk)
            .collect();
        softmax_rows(&logits, self.clusters)
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.dim {
            return Err(shape_err!(
                "VLAD over D={} given {}-channel map",
                self.dim,
                x.c()
            ));
        }
        Ok(())
    }

    fn aggregate_one(&self, item: &[T], p: usize) -> ImageRecord<T> {
        let (k, d) = (self.clusters, self.dim);
        let eps = T::from_f64(VLAD_EPS);
        // x̂ kept in the map's D×P layout; normalise each column.
        let mut x_hat = item.to_vec();
        for i in 0..p {
            let norm = (0..d)
                .map(|j| item[j * p + i] * item[j * p + i])
                .sum::<T>()
                .sqrt()
                .max(eps);
            for j in 0..d {
                x_hat[j * p + i] = item[j * p + i] / norm;
            }
        }
        let mut logits = vec![T::zero(); p * k];
        gemm(true, true, p, d, k, &x_hat, self.w.data(), false, &mut logits);
        for row in logits.chunks_mut(k) {
            for (l, &bk) in row.iter_mut().zip(self.b.data()) {
                *l = *l + bk;
            }
        }
        let assign = softmax_rows(&logits, k);
        let mut mass = vec![T::zero(); k];
        for row in assign.chunks(k) {
            for (m, &a) in mass.iter_mut().zip(row) {
                *m = *m + a;
            }
        }
        let mut v = vec![T::zero(); k * d];
        gemm(true, true, k, p, d, &assign, &x_hat, false, &mut v);
        for ((row, c), &m) in v
            .chunks_mut(d)
            .zip(self.centers.data().chunks(d))
            .zip(&mass)
        {
            for (vj, &cj) in row.iter_mut().zip(c) {
                *vj = *vj - m * cj;
            }
        }
        let u: Vec<T> = v.chunks(d).flat_map(|r| l2_normalize(r, eps)).collect();
        ImageRecord {
            x: item.to_vec(),
            x_hat,
            assign,
            mass,
            v,
            u,
        }
    }

    fn run(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<ImageRecord<T>>)> {
        self.check(x)?;
        let eps = T::from_f64(VLAD_EPS);
        let p = x.plane();
        let mut out = Vec::with_capacity(x.n() * self.output_dim());
        let mut records = Vec::with_capacity(x.n());
        for n in 0..x.n() {
            let rec = self.aggregate_one(x.item(n), p);
            out.extend(l2_normalize(&rec.u, eps));
            records.push(rec);
        }
        Ok((Tensor::new([x.n(), self.output_dim(), 1, 1], out)?, records))
    }

    fn backward_one(
        &self,
        rec: &ImageRecord<T>,
        g_out: &[T],
        p: usize,
        g_w: &mut [T],
        g_b: &mut [T],
        g_c: &mut [T],
    ) -> Vec<T> {
        let (k, d) = (self.clusters, self.dim);
        let eps = T::from_f64(VLAD_EPS);
        let g_u = l2_normalize_backward(g_out, &rec.u, eps);
        let g_v: Vec<T> = g_u
            .chunks(d)
            .zip(rec.v.chunks(d))
            .flat_map(|(g, v)| l2_normalize_backward(g, v, eps))
            .collect();

        for ((gc, gv), &m) in g_c.chunks_mut(d).zip(g_v.chunks(d)).zip(&rec.mass) {
            for (a, &b) in gc.iter_mut().zip(gv) {
                *a = *a - m * b;
            }
        }

        // ∂/∂ᾱ_ik = g_v_k · x̂_i − g_v_k · c_k
        let mut g_assign = vec![T::zero(); p * k];
        gemm(true, true, p, d, k, &rec.x_hat, &g_v, false, &mut g_assign);
        let gc_dot: Vec<T> = g_v
            .chunks(d)
            .zip(self.centers.data().chunks(d))
            .map(|(g, c)| g.iter().zip(c).map(|(&a, &b)| a * b).sum())
            .collect();
        let mut g_logits = g_assign;
        for (row, a) in g_logits.chunks_mut(k).zip(rec.assign.chunks(k)) {
            for (g, &dot) in row.iter_mut().zip(&gc_dot) {
                *g = *g - dot;
            }
            let s: T = row.iter().zip(a).map(|(&g, &av)| g * av).sum();
            for (g, &av) in row.iter_mut().zip(a) {
                *g = av * (*g - s);
            }
        }
        for row in g_logits.chunks(k) {
            for (gb, &g) in g_b.iter_mut().zip(row) {
                *gb = *gb + g;
            }
        }
        gemm(true, true, k, p, d, &g_logits, &rec.x_hat, true, g_w);

        let mut g_xhat = vec![T::zero(); d * p];
        gemm(true, true, d, k, p, &g_v, &rec.assign, false, &mut g_xhat);
        gemm(true, true, d, k, p, self.w.data(), &g_logits, true, &mut g_xhat);

        let mut g_x = vec![T::zero(); d * p];
        let mut col = vec![T::zero(); d];
        let mut gcol = vec![T::zero(); d];
        for i in 0..p {
            for j in 0..d {
                col[j] = rec.x[j * p + i];
                gcol[j] = g_xhat[j * p + i];
            }
            let g = l2_normalize_backward(&gcol, &col, eps);
            for j in 0..d {
                g_x[j * p + i] = g[j];
            }
        }
        g_x
    }
}

impl<T: Scalar> Layer<T> for NetVlad<T> {
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, recs) = self.run(x)?;
        self.record = Some((recs, x.shape()));
        Ok(y)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (recs, shape) = self
            .record
            .take()
            .ok_or_else(|| Error::Numerical("VLAD backward without forward".into()))?;
        if upstream.shape() != [shape[0], self.output_dim(), 1, 1] {
            return Err(shape_err!("VLAD upstream {:?}", upstream.shape()));
        }
        let (k, d) = (self.clusters, self.dim);
        let p = shape[2] * shape[3];
        let mut g_w = vec![T::zero(); k * d];
        let mut g_b = vec![T::zero(); k];
        let mut g_c = vec![T::zero(); k * d];
        let mut g_x = Vec::with_capacity(shape.iter().product());
        for (n, rec) in recs.iter().enumerate() {
            g_x.extend(self.backward_one(rec, upstream.item(n), p, &mut g_w, &mut g_b, &mut g_c));
        }
        self.w.accumulate_grad(&g_w)?;
        self.b.accumulate_grad(&g_b)?;
        self.centers.accumulate_grad(&g_c)?;
        Tensor::new(shape, g_x)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Params<'a, T>) {
        out.push((format!("{prefix}.centers"), &self.centers));
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamsMut<'a, T>) {
        out.push((format!("{prefix}.centers"), &mut self.centers));
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }

    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut BuffersMut<'a, T>) {}

    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Buffers<'a, T>) {}
}
