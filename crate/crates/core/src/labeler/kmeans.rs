//! k-means++ seeding followed by Lloyd iterations.

use std::collections::HashSet;

use rand::Rng;

use super::LabelError;
use crate::compute::Tensor;

/// `C` centroids of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Tensor,
}

impl Codebook {
    pub fn new(centroids: Tensor) -> Result<Self, LabelError> {
        if centroids.rank() != 2 || centroids.rows() == 0 || !centroids.is_finite() {
            return Err(LabelError::Config("codebook needs at least one finite centroid row".into()));
        }
        Ok(Self { centroids })
    }

    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    /// Index of the nearest centroid and its squared distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.classes() {
            let d = sq_dist(x, self.centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    /// Label per row of `features`.
    pub fn assign(&self, features: &Tensor) -> Result<Vec<usize>, LabelError> {
        if features.cols() != self.dim() {
            return Err(LabelError::DimensionMismatch {
                expected: self.dim(),
                got: features.cols(),
            });
        }
        Ok((0..features.rows()).map(|t| self.nearest(features.row(t)).0).collect())
    }

    /// Sum of squared distances of every row to its nearest centroid.
    pub fn inertia(&self, features: &Tensor) -> f64 {
        (0..features.rows()).map(|t| self.nearest(features.row(t)).1).sum()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia after every assignment step, starting with the seeds.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
}

fn distinct_rows(x: &Tensor) -> usize {
    let set: HashSet<Vec<u64>> = (0..x.rows())
        .map(|t| x.row(t).iter().map(|v| v.to_bits()).collect())
        .collect();
    set.len()
}

/// k-means++ seeds: first uniformly, then proportional to squared distance
/// from the nearest chosen seed.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(x: &Tensor, classes: usize, rng: &mut R) -> Vec<usize> {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|t| sq_dist(x.row(t), x.row(chosen[0]))).collect();
    while chosen.len() < classes {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (t, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(t);
                if u < d {
                    break;
                }
                u -= d;
            }
        }
        let next = pick.expect("distinct rows remain");
        chosen.push(next);
        for (t, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(t), x.row(next)));
        }
    }
    chosen
}

fn validate(x: &Tensor, classes: usize) -> Result<(), LabelError> {
    if classes == 0 {
        return Err(LabelError::Config("class count must be at least 1".into()));
    }
    if x.rank() != 2 || x.rows() < classes {
        return Err(LabelError::TooFewRows {
            rows: x.rows(),
            classes,
        });
    }
    let distinct = distinct_rows(x);
    if distinct < classes {
        return Err(LabelError::TooFewRows { rows: distinct, classes });
    }
    Ok(())
}

pub fn kmeans_fit<R: Rng + ?Sized>(x: &Tensor, classes: usize, iterations: usize, rng: &mut R) -> Result<KMeansFit, LabelError> {
    validate(x, classes)?;
    let seeds = kmeans_plus_plus(x, classes, rng);
    let rows: Vec<Vec<f64>> = seeds.iter().map(|&t| x.row(t).to_vec()).collect();
    kmeans_from_seeds(x, Tensor::from_rows(&rows).expect("uniform widths"), iterations)
}

/// Lloyd iterations from explicit starting centroids.
pub fn kmeans_from_seeds(x: &Tensor, seeds: Tensor, iterations: usize) -> Result<KMeansFit, LabelError> {
    let mut codebook = Codebook::new(seeds)?;
    if codebook.dim() != x.cols() {
        return Err(LabelError::DimensionMismatch {
            expected: codebook.dim(),
            got: x.cols(),
        });
    }
    let (n, k, dim) = (x.rows(), codebook.classes(), x.cols());
    let mut assignment: Vec<(usize, f64)> = (0..n).map(|t| codebook.nearest(x.row(t))).collect();
    let mut inertia = vec![assignment.iter().map(|a| a.1).sum::<f64>()];
    let (mut done, mut converged, mut reseeded) = (0, false, 0);
    while done < iterations {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (t, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x.row(t)) {
                *s += v;
            }
        }
        let mut centroids = codebook.centroids.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // farthest point from its own centroid, not already used
                let far = (0..n)
                    .filter(|t| !taken.contains(t))
                    .max_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(b.cmp(&a)))
                    .expect("rows available");
                taken.push(far);
                centroids.row_mut(c).copy_from_slice(x.row(far));
                reseeded += 1;
            }
        }
        codebook = Codebook::new(centroids)?;
        let next: Vec<(usize, f64)> = (0..n).map(|t| codebook.nearest(x.row(t))).collect();
        let changed = next.iter().zip(&assignment).any(|(a, b)| a.0 != b.0);
        assignment = next;
        inertia.push(assignment.iter().map(|a| a.1).sum());
        done += 1;
        if !changed && counts.iter().all(|&c| c > 0) {
            converged = true;
            break;
        }
    }
    Ok(KMeansFit {
        codebook,
        inertia,
        iterations: done,
        converged,
        reseeded,
    })
}
