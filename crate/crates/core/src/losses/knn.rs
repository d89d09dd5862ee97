//! Neighborhood smoothness of splat properties.
//!
//! Each splat's neighborhood is itself plus its `k` nearest other splats by
//! center, ties broken by lower index. Per neighborhood and property group
//! (color, opacity, scale, rotation quaternion) the population standard
//! deviation is averaged over the group's components; the loss is the mean
//! over splats of the sum over groups.

use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;

use crate::binding::WorldGaussian;
use crate::error::{Error, Result};
use crate::math::{canonical_quat, quat_wxyz, Vec3};

pub const DEFAULT_K: usize = 5;

const FEATURES: usize = 11;
const GROUPS: [std::ops::Range<usize>; 4] = [0..3, 3..4, 4..7, 7..11];

fn features(g: &WorldGaussian) -> [f64; FEATURES] {
    let q = quat_wxyz(canonical_quat(g.rotation).quaternion());
    [
        g.color.x, g.color.y, g.color.z, g.opacity, g.scale.x, g.scale.y, g.scale.z, q[0], q[1],
        q[2], q[3],
    ]
}

/// Gradient of the regularizer w.r.t. one Gaussian's properties; `rotation`
/// refers to the sign-canonical quaternion in `(w, x, y, z)` order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KnnGrad {
    pub color: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: [f64; 4],
}

fn brute_neighbors(centers: &[Vec3], i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..centers.len())
        .filter(|&j| j != i)
        .map(|j| ((centers[j] - centers[i]).norm_squared(), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, j)| j).collect()
}

/// The `k` nearest other points of every point.
pub fn nearest_neighbors(centers: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || centers.len() < k + 1 {
        return Err(Error::Precondition(format!(
            "neighborhoods of size {k} need at least {} splats, got {}",
            k + 1,
            centers.len()
        )));
    }
    let points: Vec<[f64; 3]> = centers.iter().map(|c| [c.x, c.y, c.z]).collect();
    let tree = ImmutableKdTree::new_from_slice(&points)
        .map_err(|e| Error::Precondition(format!("kd-tree construction failed: {e:?}")))?;
    let want = (k + 2).min(centers.len());
    Ok((0..centers.len())
        .into_par_iter()
        .map(|i| {
            let mut found: Vec<(f64, usize)> = tree
                .query(&points[i])
                .nearest_n::<SquaredEuclidean<f64>>(NonZeroUsize::new(want).unwrap())
                .execute()
                .into_iter()
                .map(|r| (r.distance, r.item as usize))
                .filter(|&(_, j)| j != i)
                .collect();
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // a tie at the cut-off makes the tree's choice ambiguous
            let ambiguous = found.len() > k && found[k - 1].0 == found[k].0;
            if ambiguous {
                brute_neighbors(centers, i, k)
            } else {
                found.truncate(k);
                found.into_iter().map(|(_, j)| j).collect()
            }
        })
        .collect())
}

/// Deviations from the mean of component `c` over `members`, and their
/// population standard deviation. Values are shifted by the first member
/// first so identical values give exactly zero.
fn centered(values: &[[f64; FEATURES]], members: &[usize], c: usize) -> (Vec<f64>, f64) {
    let x0 = values[members[0]][c];
    let n = members.len() as f64;
    let d: Vec<f64> = members.iter().map(|&j| values[j][c] - x0).collect();
    let mean = d.iter().sum::<f64>() / n;
    let dev: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let var = dev.iter().map(|v| v * v).sum::<f64>() / n;
    (dev, var.sqrt())
}

fn group_std(values: &[[f64; FEATURES]], members: &[usize], range: std::ops::Range<usize>) -> f64 {
    let width = range.len() as f64;
    range
        .map(|c| centered(values, members, c).1)
        .sum::<f64>()
        / width
}

pub fn knn_regularizer(gaussians: &[WorldGaussian], k: usize) -> Result<f64> {
    let centers: Vec<Vec3> = gaussians.iter().map(|g| g.center).collect();
    let nbrs = nearest_neighbors(&centers, k)?;
    let values: Vec<[f64; FEATURES]> = gaussians.iter().map(features).collect();
    let total: f64 = nbrs
        .iter()
        .enumerate()
        .map(|(i, others)| {
            let mut members = vec![i];
            members.extend(others);
            GROUPS.iter().map(|r| group_std(&values, &members, r.clone())).sum::<f64>()
        })
        .sum();
    Ok(total / gaussians.len() as f64)
}

/// Regularizer value and its gradient. Neighborhoods are held fixed; a
/// zero standard deviation contributes the zero subgradient.
pub fn knn_regularizer_grad(gaussians: &[WorldGaussian], k: usize) -> Result<(f64, Vec<KnnGrad>)> {
    let centers: Vec<Vec3> = gaussians.iter().map(|g| g.center).collect();
    let nbrs = nearest_neighbors(&centers, k)?;
    let values: Vec<[f64; FEATURES]> = gaussians.iter().map(features).collect();
    let scale = 1.0 / gaussians.len() as f64;
    let mut grad = vec![[0.0; FEATURES]; gaussians.len()];
    let mut total = 0.0;
    for (i, others) in nbrs.iter().enumerate() {
        let mut members = vec![i];
        members.extend(others);
        let n = members.len() as f64;
        for r in GROUPS.iter() {
            let width = r.len() as f64;
            for c in r.clone() {
                let (dev, sd) = centered(&values, &members, c);
                total += sd / width;
                if sd > 0.0 {
                    for (&j, d) in members.iter().zip(&dev) {
                        grad[j][c] += scale * d / (n * sd * width);
                    }
                }
            }
        }
    }
    let grads = grad
        .into_iter()
        .map(|g| KnnGrad {
            color: Vec3::new(g[0], g[1], g[2]),
            opacity: g[3],
            scale: Vec3::new(g[4], g[5], g[6]),
            rotation: [g[7], g[8], g[9], g[10]],
        })
        .collect();
    Ok((total * scale, grads))
}
