//! Optimal-transport distances on equal-size empirical point clouds.
//!
//! The 1D p-Wasserstein distance reduces to sorting both samples and pairing
//! them in order; the sliced distance averages that closed form over random
//! unit directions. A factorial brute-force Earth-Mover oracle (n <= 8) backs
//! the tests. Everything here is f64 and deterministic given the seed.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;

/// Uniformly weighted empirical distribution: n points in R^d.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(CoreError::EmptyInput);
        }
        for p in &points {
            if p.len() != dim {
                return Err(CoreError::DimensionMismatch {
                    expected: dim.to_string(),
                    got: p.len().to_string(),
                });
            }
        }
        Ok(PointCloud { points, dim })
    }

    /// 1D cloud from raw scalars.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        PointCloud::new(xs.iter().map(|&x| alloc::vec![x]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// Unit vector on S^{d-1}.
#[derive(Clone, Debug)]
pub struct Direction {
    theta: Vec<f64>,
}

impl Direction {
    /// Validates that `theta` already has unit Euclidean norm (within 1e-9).
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(CoreError::EmptyInput);
        }
        let norm = math::sqrt(theta.iter().map(|x| x * x).sum());
        if math::abs(norm - 1.0) > 1e-9 {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "direction norm {norm} is not 1 within 1e-9"
            )));
        }
        Ok(Direction { theta })
    }

    /// Normalizes an arbitrary non-zero vector onto the sphere.
    pub fn from_vector(mut v: Vec<f64>) -> Result<Self> {
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm < 1e-12 {
            return Err(CoreError::InvalidArgument(
                "cannot normalize a zero vector".into(),
            ));
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(Direction { theta: v })
    }

    /// Uniform draw on S^{d-1}: normalized isotropic Gaussian.
    pub fn random(dim: usize, rng: &mut Rng) -> Self {
        loop {
            let v = rng.normal_vec(dim);
            if let Ok(d) = Direction::from_vector(v) {
                return d;
            }
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0) {
        return Err(CoreError::InvalidExponent(p));
    }
    Ok(())
}

/// 1D p-Wasserstein by sorting: (mean_i |x_(i) - y_(i)|^p)^(1/p).
pub fn wasserstein_1d(xs: &[f64], ys: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    if xs.is_empty() || ys.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    if xs.len() != ys.len() {
        return Err(CoreError::EqualCountRequired {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let mut a: Vec<f64> = xs.to_vec();
    let mut b: Vec<f64> = ys.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    let n = a.len() as f64;
    let mean_p: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| math::powf(math::abs(x - y), p))
        .sum::<f64>()
        / n;
    Ok(math::powf(mean_p, 1.0 / p))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

const ORACLE_MAX_N: usize = 8;

/// Exact p-Wasserstein between equal-size uniform clouds by enumerating all
/// n! couplings (permutations suffice for uniform empirical marginals).
pub fn emd_bruteforce(xs: &PointCloud, ys: &PointCloud, p: f64) -> Result<f64> {
    check_p(p)?;
    if xs.len() != ys.len() {
        return Err(CoreError::EqualCountRequired {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.dim() != ys.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: xs.dim().to_string(),
            got: ys.dim().to_string(),
        });
    }
    let n = xs.len();
    if n > ORACLE_MAX_N {
        return Err(CoreError::OracleTooLarge {
            n,
            max: ORACLE_MAX_N,
        });
    }

    // Pairwise cost matrix d^p.
    let mut cost = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = math::powf(euclidean(&xs.points[i], &ys.points[j]), p);
        }
    }

    // Heap's algorithm over permutations of ys.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stack = alloc::vec![0usize; n];
    let mut best = perm_cost(&cost, &perm, n);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            let c = perm_cost(&cost, &perm, n);
            if c < best {
                best = c;
            }
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(math::powf(best / n as f64, 1.0 / p))
}

fn perm_cost(cost: &[f64], perm: &[usize], n: usize) -> f64 {
    (0..n).map(|i| cost[i * n + perm[i]]).sum()
}

/// Projects every point onto the direction: the empirical slice <theta, x_i>.
pub fn radon_project(cloud: &PointCloud, dir: &Direction) -> Result<Vec<f64>> {
    if cloud.dim() != dir.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: cloud.dim().to_string(),
            got: dir.dim().to_string(),
        });
    }
    Ok(cloud
        .points
        .iter()
        .map(|p| p.iter().zip(dir.theta()).map(|(a, b)| a * b).sum())
        .collect())
}

/// Monte-Carlo sliced p-Wasserstein:
/// ((1/n_proj) * sum_j W_p^p(proj_j X, proj_j Y))^(1/p) with directions drawn
/// uniformly on the sphere from `seed`.
pub fn sliced_wasserstein(
    x: &PointCloud,
    y: &PointCloud,
    p: f64,
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    check_p(p)?;
    if n_proj == 0 {
        return Err(CoreError::InvalidArgument("n_proj must be >= 1".into()));
    }
    if x.len() != y.len() {
        return Err(CoreError::EqualCountRequired {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.dim() != y.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: x.dim().to_string(),
            got: y.dim().to_string(),
        });
    }
    let mut rng = Rng::new(seed);
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let dir = Direction::random(x.dim(), &mut rng);
        let px = radon_project(x, &dir)?;
        let py = radon_project(y, &dir)?;
        let w = wasserstein_1d(&px, &py, p)?;
        acc += math::powf(w, p);
    }
    Ok(math::powf(acc / n_proj as f64, 1.0 / p))
}

/// Default projection count for metric-quality estimates.
pub const DEFAULT_N_PROJECTIONS: usize = 64;
