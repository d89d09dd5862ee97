use std::fmt;

use crate::types::{triangle_area, SkinnedMesh, Splat};

const UNIT_TOL: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-6;
const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IssueKind {
    IndexOutOfRange,
    WeightsNotNormalized,
    NegativeWeight,
    DegenerateTriangle,
    BadHierarchy,
    NonUnitRotation,
    NonPositiveScale,
    OpacityOutOfRange,
    ColorOutOfRange,
    NonFinite,
    SizeMismatch,
}

impl IssueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::IndexOutOfRange => "index out of range",
            Self::WeightsNotNormalized => "weights not normalized",
            Self::NegativeWeight => "negative weight",
            Self::DegenerateTriangle => "degenerate triangle",
            Self::BadHierarchy => "invalid joint hierarchy",
            Self::NonUnitRotation => "rotation not unit length",
            Self::NonPositiveScale => "scale not positive",
            Self::OpacityOutOfRange => "opacity outside [0, 1]",
            Self::ColorOutOfRange => "color outside [0, 1]",
            Self::NonFinite => "non-finite value",
            Self::SizeMismatch => "size mismatch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub kind: IssueKind,
    /// What the offending element is, e.g. `"splat 3"` or `"vertex 17"`.
    pub element: String,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.kind.as_str(), self.element, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    fn push(&mut self, kind: IssueKind, element: impl Into<String>, detail: impl Into<String>) {
        self.issues.push(Issue {
            kind,
            element: element.into(),
            detail: detail.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return write!(f, "pass");
        }
        writeln!(f, "fail ({} issues)", self.issues.len())?;
        for issue in &self.issues {
            writeln!(f, "  {issue}")?;
        }
        Ok(())
    }
}

pub fn validate_mesh(mesh: &SkinnedMesh) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = mesh.num_vertices();
    let j = mesh.num_joints();

    if mesh.joint_names.len() != j || mesh.joint_rest_positions.len() != j {
        report.push(
            IssueKind::SizeMismatch,
            "skeleton",
            format!(
                "{} parents, {} names, {} rest positions",
                j,
                mesh.joint_names.len(),
                mesh.joint_rest_positions.len()
            ),
        );
    }
    if let Err(e) = mesh.joint_order() {
        let kind = match e {
            crate::Error::IndexOutOfRange { .. } => IssueKind::IndexOutOfRange,
            _ => IssueKind::BadHierarchy,
        };
        report.push(kind, "skeleton", e.to_string());
    }
    for (i, v) in mesh.vertices.iter().enumerate() {
        if !v.iter().all(|x| x.is_finite()) {
            report.push(IssueKind::NonFinite, format!("vertex {i}"), "position");
        }
    }
    for (t, tri) in mesh.triangles.iter().enumerate() {
        if let Some(&bad) = tri.iter().find(|&&v| v as usize >= n) {
            report.push(
                IssueKind::IndexOutOfRange,
                format!("triangle {t}"),
                format!("vertex index {bad} >= {n}"),
            );
            continue;
        }
        let area = triangle_area(&mesh.triangle_vertices(&mesh.vertices, t));
        if !(area > MIN_TRIANGLE_AREA) {
            report.push(
                IssueKind::DegenerateTriangle,
                format!("triangle {t}"),
                format!("area {area:e}"),
            );
        }
    }
    if mesh.skin_weights.len() != n * j {
        report.push(
            IssueKind::SizeMismatch,
            "skin weights",
            format!("{} entries, expected {}", mesh.skin_weights.len(), n * j),
        );
    } else if j > 0 {
        for v in 0..n {
            let row = mesh.weights_of(v);
            if row.iter().any(|w| *w < 0.0) {
                report.push(IssueKind::NegativeWeight, format!("vertex {v}"), "skin weight < 0");
            }
            let sum: f64 = row.iter().sum();
            if !((sum - 1.0).abs() <= WEIGHT_SUM_TOL) {
                report.push(
                    IssueKind::WeightsNotNormalized,
                    format!("vertex {v}"),
                    format!("row sums to {sum}"),
                );
            }
        }
    }
    for (name, basis) in [("shape", &mesh.shape_basis), ("expression", &mesh.expression_basis)] {
        if let Some(b) = basis {
            if b.data.len() != n * 3 * b.count {
                report.push(
                    IssueKind::SizeMismatch,
                    format!("{name} basis"),
                    format!("{} entries, expected {}", b.data.len(), n * 3 * b.count),
                );
            }
        }
    }

    let ann = &mesh.annotations;
    for (set, indices) in [
        ("face_center", &ann.face_center),
        ("eye_midpoint", &ann.eye_midpoint),
        ("face_vertices", &ann.face_vertices),
    ] {
        if let Some(&bad) = indices.iter().find(|&&v| v as usize >= n) {
            report.push(
                IssueKind::IndexOutOfRange,
                format!("annotation {set}"),
                format!("vertex index {bad} >= {n}"),
            );
        }
    }
    let nf = ann.face_vertices.len();
    if let Some(t) = ann
        .face_triangles
        .iter()
        .position(|tri| tri.iter().any(|&v| v as usize >= nf))
    {
        report.push(
            IssueKind::IndexOutOfRange,
            format!("face triangle {t}"),
            format!("face-patch index >= {nf}"),
        );
    }
    if !ann.joint_mirror.is_empty() {
        if ann.joint_mirror.len() != j {
            report.push(
                IssueKind::SizeMismatch,
                "joint_mirror",
                format!("{} entries for {j} joints", ann.joint_mirror.len()),
            );
        } else if let Some(bad) = ann.joint_mirror.iter().position(|&m| m as usize >= j) {
            report.push(
                IssueKind::IndexOutOfRange,
                format!("joint_mirror {bad}"),
                format!("joint index >= {j}"),
            );
        }
    }
    for (name, &joint) in &ann.keypoint_joints {
        if joint as usize >= j {
            report.push(
                IssueKind::IndexOutOfRange,
                format!("keypoint {name}"),
                format!("joint index {joint} >= {j}"),
            );
        }
    }
    report
}

pub fn validate_splats(splats: &[Splat], num_triangles: Option<usize>) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, s) in splats.iter().enumerate() {
        let el = || format!("splat {i}");
        let finite = s.mu_local.iter().all(|x| x.is_finite())
            && s.log_scale.iter().all(|x| x.is_finite())
            && s.color.iter().all(|x| x.is_finite())
            && s.opacity.is_finite();
        if !finite {
            report.push(IssueKind::NonFinite, el(), "parameters");
        }
        let qn = s.rot_local.quaternion().norm();
        if !((qn - 1.0).abs() <= UNIT_TOL) {
            report.push(IssueKind::NonUnitRotation, el(), format!("|q| = {qn}"));
        }
        if s.scale().iter().any(|x| !(*x > 0.0)) {
            report.push(IssueKind::NonPositiveScale, el(), "exp(log_scale) underflows");
        }
        if !(0.0..=1.0).contains(&s.opacity) {
            report.push(IssueKind::OpacityOutOfRange, el(), format!("{}", s.opacity));
        }
        if s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            report.push(IssueKind::ColorOutOfRange, el(), format!("{:?}", s.color));
        }
        if let Some(m) = num_triangles {
            if s.polygon_id as usize >= m {
                report.push(
                    IssueKind::IndexOutOfRange,
                    el(),
                    format!("polygon_id {} >= {m}", s.polygon_id),
                );
            }
        }
    }
    report
}

/// Checks every mesh and splat invariant and reports all violations found.
pub fn validate_asset(mesh: &SkinnedMesh, splats: &[Splat]) -> ValidationReport {
    let mut report = validate_mesh(mesh);
    report
        .issues
        .extend(validate_splats(splats, Some(mesh.num_triangles())).issues);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Quat, Vec3};
    use crate::types::{MeshAnnotations, ROOT_PARENT};

    fn two_triangle_mesh() -> SkinnedMesh {
        SkinnedMesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            joint_names: vec!["root".into(), "child".into()],
            joint_parents: vec![ROOT_PARENT, 0],
            joint_rest_positions: vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            skin_weights: vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75],
            shape_basis: None,
            expression_basis: None,
            annotations: MeshAnnotations::default(),
        }
    }

    fn splat(polygon_id: u32) -> Splat {
        Splat {
            mu_local: Vec3::zeros(),
            rot_local: Quat::identity(),
            log_scale: Vec3::repeat(-2.0),
            color: Vec3::repeat(0.5),
            opacity: 0.5,
            polygon_id,
        }
    }

    #[test]
    fn well_formed_asset_passes() {
        let report = validate_asset(&two_triangle_mesh(), &[splat(0), splat(1)]);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn polygon_id_at_triangle_count_fails() {
        let report = validate_asset(&two_triangle_mesh(), &[splat(0), splat(2)]);
        assert!(!report.passed());
        assert!(report.has(IssueKind::IndexOutOfRange));
        let text = report.to_string();
        assert!(text.contains("index out of range"));
        assert!(text.contains("splat 1"));
    }

    #[test]
    fn unnormalized_weight_row_fails() {
        let mut mesh = two_triangle_mesh();
        mesh.skin_weights[2] = 0.3;
        let report = validate_asset(&mesh, &[]);
        assert!(report.has(IssueKind::WeightsNotNormalized));
        assert!(report.to_string().contains("weights not normalized"));
        assert!(report.to_string().contains("vertex 1"));
    }

    #[test]
    fn cyclic_or_multi_root_hierarchy_fails() {
        let mut mesh = two_triangle_mesh();
        mesh.joint_parents = vec![1, 0];
        assert!(validate_mesh(&mesh).has(IssueKind::BadHierarchy));
        mesh.joint_parents = vec![ROOT_PARENT, ROOT_PARENT];
        assert!(validate_mesh(&mesh).has(IssueKind::BadHierarchy));
    }

    #[test]
    fn degenerate_and_out_of_range_triangles_fail() {
        let mut mesh = two_triangle_mesh();
        mesh.triangles.push([0, 0, 1]);
        mesh.triangles.push([0, 1, 9]);
        let report = validate_mesh(&mesh);
        assert!(report.has(IssueKind::DegenerateTriangle));
        assert!(report.has(IssueKind::IndexOutOfRange));
    }

    #[test]
    fn splat_range_checks() {
        let mut s = splat(0);
        s.opacity = 1.5;
        s.color.x = -0.1;
        let report = validate_splats(&[s], None);
        assert!(report.has(IssueKind::OpacityOutOfRange));
        assert!(report.has(IssueKind::ColorOutOfRange));
    }
}
