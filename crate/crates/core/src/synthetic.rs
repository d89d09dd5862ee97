//! Procedural assets for tests, benchmarks and demos.
//!
//! [`stick_body`] builds a bilaterally symmetric articulated figure (mirror
//! plane `x = 0`, y up, facing +z) from tubes around its bones, with a face
//! patch on the head. Besides the articulated joints it carries marker
//! joints (eyes, ears, thumbs, heels, ...) whose positions make every
//! joint's rotation observable from projected joint keypoints.

use std::collections::{BTreeMap, HashMap};

use crate::math::Vec3;
use crate::types::{Blendshapes, MeshAnnotations, SkinnedMesh, ROOT_PARENT};

#[derive(Clone, Debug, PartialEq)]
pub struct BodyOptions {
    /// Rings per bone tube beyond the first.
    pub segments: usize,
    /// Vertices per ring.
    pub ring: usize,
    /// Face patch grid size (vertices per side).
    pub face_grid: usize,
    pub shape_basis: bool,
    pub expression_basis: bool,
}

impl Default for BodyOptions {
    fn default() -> Self {
        Self {
            segments: 2,
            ring: 6,
            face_grid: 5,
            shape_basis: false,
            expression_basis: false,
        }
    }
}

struct JointSpec {
    name: &'static str,
    parent: Option<&'static str>,
    pos: [f64; 3],
    /// Tube radius of the bone from the parent to this joint; 0 for none.
    radius: f64,
}

const fn j(name: &'static str, parent: Option<&'static str>, pos: [f64; 3], radius: f64) -> JointSpec {
    JointSpec {
        name,
        parent,
        pos,
        radius,
    }
}

/// Center joints, then the left side; the right side is mirrored.
const CENTER: &[JointSpec] = &[
    j("pelvis", None, [0.0, 1.0, 0.0], 0.0),
    j("spine", Some("pelvis"), [0.0, 1.2, 0.0], 0.12),
    j("chest", Some("spine"), [0.0, 1.4, 0.0], 0.13),
    j("neck", Some("chest"), [0.0, 1.6, 0.0], 0.1),
    j("head", Some("neck"), [0.0, 1.7, 0.0], 0.05),
    j("head_top", Some("head"), [0.0, 1.9, 0.0], 0.09),
    j("nose", Some("head"), [0.0, 1.78, 0.12], 0.0),
    j("pelvis_front", Some("pelvis"), [0.0, 1.02, 0.12], 0.0),
    j("belly", Some("spine"), [0.0, 1.3, 0.12], 0.0),
    j("sternum", Some("chest"), [0.0, 1.48, 0.13], 0.0),
    j("throat", Some("neck"), [0.0, 1.64, 0.08], 0.0),
];

const LEFT: &[JointSpec] = &[
    j("left_eye", Some("head"), [0.035, 1.82, 0.09], 0.0),
    j("left_ear", Some("head"), [0.09, 1.8, -0.01], 0.0),
    j("left_collar", Some("chest"), [0.07, 1.55, 0.0], 0.0),
    j("left_collar_top", Some("left_collar"), [0.14, 1.62, 0.07], 0.0),
    j("left_biceps", Some("left_shoulder"), [0.33, 1.57, 0.09], 0.0),
    j("left_forearm", Some("left_elbow"), [0.58, 1.57, 0.09], 0.0),
    j("left_wrist_back", Some("left_wrist"), [0.74, 1.6, -0.05], 0.0),
    j("left_thigh", Some("left_hip"), [0.12, 0.74, 0.1], 0.0),
    j("left_shin", Some("left_knee"), [0.12, 0.3, 0.1], 0.0),
    j("left_shoulder", Some("left_collar"), [0.2, 1.55, 0.0], 0.05),
    j("left_elbow", Some("left_shoulder"), [0.46, 1.55, 0.0], 0.045),
    j("left_wrist", Some("left_elbow"), [0.7, 1.55, 0.0], 0.04),
    j("left_palm", Some("left_wrist"), [0.78, 1.55, 0.0], 0.035),
    j("left_hand_tip", Some("left_palm"), [0.94, 1.55, 0.0], 0.03),
    j("left_thumb", Some("left_palm"), [0.82, 1.57, 0.1], 0.0),
    j("left_hip", Some("pelvis"), [0.1, 0.95, 0.0], 0.0),
    j("left_knee", Some("left_hip"), [0.1, 0.53, 0.0], 0.07),
    j("left_ankle", Some("left_knee"), [0.1, 0.1, 0.0], 0.05),
    j("left_toe", Some("left_ankle"), [0.1, 0.03, 0.14], 0.04),
    j("left_heel", Some("left_ankle"), [0.1, 0.03, -0.05], 0.0),
];

fn mirrored_name(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("left_") {
        format!("right_{rest}")
    } else if let Some(rest) = name.strip_prefix("right_") {
        format!("left_{rest}")
    } else {
        name.to_string()
    }
}

/// Joints without children; their rotation moves no joint.
pub fn marker_joints(mesh: &SkinnedMesh) -> Vec<usize> {
    let n = mesh.num_joints();
    (0..n)
        .filter(|&j| !mesh.joint_parents.iter().any(|&p| p as usize == j))
        .collect()
}

struct Builder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    /// Sparse weights per vertex.
    weights: Vec<Vec<(usize, f64)>>,
}

impl Builder {
    fn vertex(&mut self, p: Vec3, w: Vec<(usize, f64)>) -> u32 {
        self.vertices.push(p);
        self.weights.push(w);
        self.vertices.len() as u32 - 1
    }

    /// Tube of `segments + 1` rings from `a` to `b`, driven by joint `ja`
    /// and blending into `jb` over the last fifth.
    fn tube(&mut self, a: Vec3, b: Vec3, radius: f64, ja: usize, jb: usize, segments: usize, ring: usize, mirror: bool) {
        let axis = (b - a).normalize();
        let helper = if axis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = axis.cross(&helper).normalize();
        let v = axis.cross(&u);
        let mut rings = Vec::new();
        for s in 0..=segments {
            let t = s as f64 / segments as f64;
            let center = a + (b - a) * t;
            let wb = ((t - 0.8) / 0.2).clamp(0.0, 1.0) * 0.5;
            let w = if wb > 0.0 { vec![(ja, 1.0 - wb), (jb, wb)] } else { vec![(ja, 1.0)] };
            let ids: Vec<u32> = (0..ring)
                .map(|k| {
                    let phi = std::f64::consts::TAU * k as f64 / ring as f64;
                    let p = center + (u * phi.cos() + v * phi.sin()) * radius;
                    self.vertex(p, w.clone())
                })
                .collect();
            rings.push(ids);
        }
        let mut push = |t: [u32; 3]| {
            self.triangles.push(if mirror { [t[0], t[2], t[1]] } else { t });
        };
        for s in 0..segments {
            for k in 0..ring {
                let k2 = (k + 1) % ring;
                let (p, q) = (&rings[s], &rings[s + 1]);
                push([p[k], p[k2], q[k2]]);
                push([p[k], q[k2], q[k]]);
            }
        }
        let (first, last) = (&rings[0], &rings[segments]);
        for k in 1..ring - 1 {
            push([first[0], first[k + 1], first[k]]);
            push([last[0], last[k], last[k + 1]]);
        }
    }
}

/// A symmetric articulated figure about 1.9 units tall.
pub fn stick_body(opts: &BodyOptions) -> SkinnedMesh {
    assert!(opts.segments >= 1 && opts.ring >= 3 && opts.face_grid >= 2);
    let mut specs: Vec<(String, Option<String>, Vec3, f64)> = Vec::new();
    for s in CENTER {
        specs.push((s.name.into(), s.parent.map(String::from), Vec3::from(s.pos), s.radius));
    }
    for s in LEFT {
        specs.push((s.name.into(), s.parent.map(String::from), Vec3::from(s.pos), s.radius));
    }
    for s in LEFT {
        let p = Vec3::new(-s.pos[0], s.pos[1], s.pos[2]);
        specs.push((mirrored_name(s.name), s.parent.map(mirrored_name), p, s.radius));
    }
    let index: HashMap<String, usize> = specs.iter().enumerate().map(|(i, s)| (s.0.clone(), i)).collect();
    let joint_names: Vec<String> = specs.iter().map(|s| s.0.clone()).collect();
    let joint_parents: Vec<u32> = specs
        .iter()
        .map(|s| s.1.as_ref().map_or(ROOT_PARENT, |p| index[p] as u32))
        .collect();
    let joint_rest_positions: Vec<Vec3> = specs.iter().map(|s| s.2).collect();

    let mut b = Builder {
        vertices: Vec::new(),
        triangles: Vec::new(),
        weights: Vec::new(),
    };
    for (i, (name, parent, pos, radius)) in specs.iter().enumerate() {
        let Some(parent) = parent else { continue };
        if *radius <= 0.0 {
            continue;
        }
        let pj = index[parent];
        let a = joint_rest_positions[pj];
        let mirror = name.starts_with("right_");
        b.tube(a, *pos, *radius, pj, i, opts.segments, opts.ring, mirror);
    }

    // face patch on the front of the head, skinned to the head
    let head = index["head"];
    let g = opts.face_grid;
    let mut face_vertices = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let x = -0.05 + 0.1 * c as f64 / (g - 1) as f64;
            let y = 1.85 - 0.12 * r as f64 / (g - 1) as f64;
            let z = 0.095 - 2.0 * x * x;
            face_vertices.push(b.vertex(Vec3::new(x, y, z), vec![(head, 1.0)]));
        }
    }
    let mut face_triangles = Vec::new();
    for r in 0..g - 1 {
        for c in 0..g - 1 {
            let i = (r * g + c) as u32;
            let gg = g as u32;
            face_triangles.push([i, i + gg, i + 1]);
            face_triangles.push([i + 1, i + gg, i + gg + 1]);
        }
    }
    for t in &face_triangles {
        b.triangles.push(t.map(|k| face_vertices[k as usize]));
    }
    // eye midpoint: the two grid vertices mirrored about the center column
    // on the second row; face center: the head tube's middle ring
    let row = g / 3;
    let eye_midpoint = vec![face_vertices[row * g], face_vertices[row * g + g - 1]];
    let face_center: Vec<u32> = (0..b.vertices.len() as u32)
        .filter(|&v| {
            let w = &b.weights[v as usize];
            w.len() == 1 && w[0].0 == head && !face_vertices.contains(&v) && {
                let p = b.vertices[v as usize];
                (p.y - joint_rest_positions[head].y).abs() < 1e-9
            }
        })
        .collect();

    let nj = joint_names.len();
    let mut skin_weights = vec![0.0; b.vertices.len() * nj];
    for (v, ws) in b.weights.iter().enumerate() {
        for &(jn, w) in ws {
            skin_weights[v * nj + jn] += w;
        }
    }
    let joint_mirror = joint_names
        .iter()
        .map(|n| index[&mirrored_name(n)] as u32)
        .collect();
    let keypoint_joints: BTreeMap<String, u32> = joint_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i as u32))
        .collect();

    let nv = b.vertices.len();
    let shape_basis = opts.shape_basis.then(|| {
        // taller and wider
        let mut data = vec![0.0; nv * 3 * 2];
        for (v, p) in b.vertices.iter().enumerate() {
            data[(v * 3 + 1) * 2] = 0.1 * p.y;
            data[(v * 3) * 2 + 1] = 0.1 * p.x;
        }
        Blendshapes { count: 2, data }
    });
    let expression_basis = opts.expression_basis.then(|| {
        // lower face rows pushed down and forward
        let mut data = vec![0.0; nv * 3];
        for (k, &v) in face_vertices.iter().enumerate() {
            let r = (k / g) as f64 / (g - 1) as f64;
            data[v as usize * 3 + 1] = -0.02 * r;
            data[v as usize * 3 + 2] = 0.01 * r;
        }
        Blendshapes { count: 1, data }
    });

    SkinnedMesh {
        vertices: b.vertices,
        triangles: b.triangles,
        joint_names,
        joint_parents,
        joint_rest_positions,
        skin_weights,
        shape_basis,
        expression_basis,
        annotations: MeshAnnotations {
            face_center,
            eye_midpoint,
            face_vertices,
            face_triangles,
            joint_mirror,
            keypoint_joints,
        },
    }
}

/// Unit icosphere after `subdivisions` rounds of 4-way splitting, skinned
/// to a single root joint at the origin.
pub fn icosphere(subdivisions: usize) -> SkinnedMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, vs: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vs.push(((vs[a as usize] + vs[b as usize]) / 2.0).normalize());
                vs.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for [a, b, c] in triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    let n = vertices.len();
    SkinnedMesh {
        vertices,
        triangles,
        joint_names: vec!["root".into()],
        joint_parents: vec![ROOT_PARENT],
        joint_rest_positions: vec![Vec3::zeros()],
        skin_weights: vec![1.0; n],
        shape_basis: None,
        expression_basis: None,
        annotations: MeshAnnotations::default(),
    }
}
