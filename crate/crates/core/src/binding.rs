//! Splat initialization on mesh triangles and deformation by polygon frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::PolygonFrames;
use crate::error::{Error, Result};
use crate::math::{canonical_quat, Quat, Vec3};
use crate::types::{PolygonFrame, SkinnedMesh, Splat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitOptions {
    /// Initial isotropic scale as a fraction of the triangle's mean edge length.
    pub scale_fraction: f64,
    pub per_polygon: usize,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Only used when `per_polygon > 1`.
    pub seed: u64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            scale_fraction: 0.5,
            per_polygon: 1,
            color: [0.5; 3],
            opacity: 0.5,
            seed: 0,
        }
    }
}

/// A splat placed in world space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldGaussian {
    pub center: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub color: Vec3,
    pub opacity: f64,
}

pub fn mean_edge_length(p: &[Vec3; 3]) -> f64 {
    ((p[1] - p[0]).norm() + (p[2] - p[1]).norm() + (p[0] - p[2]).norm()) / 3.0
}

/// Splats for every triangle of the canonical mesh, centered on the polygon.
///
/// Extra splats beyond the first are jittered barycentrically inside the
/// triangle; their offsets are expressed in the triangle's tangent frame.
pub fn init_splats(mesh: &SkinnedMesh, opts: &InitOptions) -> Result<Vec<Splat>> {
    if opts.per_polygon == 0 {
        return Err(Error::Config("per_polygon must be at least 1".into()));
    }
    if !(opts.scale_fraction > 0.0) {
        return Err(Error::Config("scale_fraction must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(mesh.num_triangles() * opts.per_polygon);
    for t in 0..mesh.num_triangles() {
        let p = mesh.triangle_vertices(&mesh.vertices, t);
        let log_scale = Vec3::repeat((opts.scale_fraction * mean_edge_length(&p)).ln());
        let centroid = (p[0] + p[1] + p[2]) / 3.0;
        let frame = crate::body::tangent_frame(&p);
        for i in 0..opts.per_polygon {
            let mu_local = match (i, frame) {
                (0, _) | (_, None) => Vec3::zeros(),
                (_, Some((basis, _))) => {
                    let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
                    if a + b > 1.0 {
                        a = 1.0 - a;
                        b = 1.0 - b;
                    }
                    let q = p[0] + (p[1] - p[0]) * a + (p[2] - p[0]) * b;
                    basis.transpose() * (q - centroid)
                }
            };
            out.push(Splat {
                mu_local,
                rot_local: Quat::identity(),
                log_scale,
                color: Vec3::from(opts.color),
                opacity: opts.opacity,
                polygon_id: t as u32,
            });
        }
    }
    Ok(out)
}

pub fn deform_splat(s: &Splat, f: &PolygonFrame) -> WorldGaussian {
    WorldGaussian {
        center: f.rotation * s.mu_local * f.scale + f.translation,
        rotation: canonical_quat(f.rotation * s.rot_local),
        scale: s.scale() * f.scale,
        color: s.color,
        opacity: s.opacity,
    }
}

/// Places every splat with its polygon's frame.
pub fn deform_splats(splats: &[Splat], frames: &[PolygonFrame]) -> Result<Vec<WorldGaussian>> {
    if let Some(s) = splats.iter().find(|s| s.polygon_id as usize >= frames.len()) {
        return Err(Error::IndexOutOfRange {
            what: "polygon_id".into(),
            index: s.polygon_id as usize,
            limit: frames.len(),
        });
    }
    Ok(splats
        .par_iter()
        .map(|s| deform_splat(s, &frames[s.polygon_id as usize]))
        .collect())
}

/// Like [`deform_splats`], also flagging splats whose polygon fell back to
/// a previous or identity frame.
pub fn deform_splats_flagged(
    splats: &[Splat],
    frames: &PolygonFrames,
) -> Result<(Vec<WorldGaussian>, Vec<bool>)> {
    let world = deform_splats(splats, &frames.frames)?;
    let flags = splats
        .iter()
        .map(|s| frames.degenerate[s.polygon_id as usize])
        .collect();
    Ok((world, flags))
}
