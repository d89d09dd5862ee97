//! Missing-hand detection and constant-angular-velocity gap filling on the
//! 2D shoulder → elbow → wrist → palm chain.
//!
//! Angles are absolute image-plane angles `atan2(dy, dx)` taken directly on
//! pixel coordinates. Every angular difference is wrapped to `(-π, π]`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Keypoint, KeypointSequence};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
const MIN_BONE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn prefix(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Layout indices of one arm's chain joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArmIndices {
    pub shoulder: usize,
    pub elbow: usize,
    pub wrist: usize,
    pub palm: usize,
}

impl ArmIndices {
    pub fn resolve(layout: &[String], side: Side) -> Result<Self> {
        let find = |joint: &str| {
            let name = format!("{}_{joint}", side.prefix());
            layout
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("keypoint layout has no '{name}'")))
        };
        Ok(Self {
            shoulder: find("shoulder")?,
            elbow: find("elbow")?,
            wrist: find("wrist")?,
            palm: find("palm")?,
        })
    }

    fn all(&self) -> [usize; 4] {
        [self.shoulder, self.elbow, self.wrist, self.palm]
    }
}

/// Finger keypoints follow the `<side>_hand_*` naming convention.
fn finger_indices(layout: &[String], side: Side) -> Vec<usize> {
    let prefix = format!("{}_hand_", side.prefix());
    layout
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with(&prefix))
        .map(|(i, _)| i)
        .collect()
}

/// A run of missing-hand frames bracketed by visible frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapAnnotation {
    pub side: Side,
    /// Frame `t - n`.
    pub last_visible: usize,
    /// Frame `t`.
    pub first_reappear: usize,
    pub n: usize,
}

/// A run of missing-hand frames that touches the start or end of the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfillableRun {
    pub side: Side,
    pub first_missing: usize,
    pub last_missing: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<GapAnnotation>,
    pub unfillable: Vec<UnfillableRun>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainState {
    pub theta_se: f64,
    pub theta_ew: f64,
    pub theta_wp: f64,
    pub len_se: f64,
    pub len_ew: f64,
    pub len_wp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularVelocities {
    pub omega_se: f64,
    pub omega_ew: f64,
    pub omega_wp: f64,
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

pub fn is_hand_missing(frame: &[Keypoint], arm: &ArmIndices, threshold: f64) -> bool {
    frame[arm.wrist].confidence < threshold && frame[arm.palm].confidence < threshold
}

/// Flags frames whose wrist and palm confidences are both below `threshold`
/// and groups them into maximal runs per side.
pub fn detect_missing_hands(seq: &KeypointSequence, threshold: f64) -> Result<GapReport> {
    if seq.frames.len() < 2 {
        return Err(Error::Precondition(format!(
            "gap detection needs at least 2 frames, got {}",
            seq.frames.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut report = GapReport::default();
    let last = seq.frames.len() - 1;
    for side in Side::BOTH {
        let arm = ArmIndices::resolve(&seq.layout, side)?;
        let missing: Vec<bool> = seq
            .frames
            .iter()
            .map(|f| is_hand_missing(f, &arm, threshold))
            .collect();
        let mut f = 0;
        while f <= last {
            if !missing[f] {
                f += 1;
                continue;
            }
            let start = f;
            while f <= last && missing[f] {
                f += 1;
            }
            let end = f - 1;
            if start == 0 || end == last {
                report.unfillable.push(UnfillableRun {
                    side,
                    first_missing: start,
                    last_missing: end,
                });
            } else {
                report.gaps.push(GapAnnotation {
                    side,
                    last_visible: start - 1,
                    first_reappear: end + 1,
                    n: end + 2 - start,
                });
            }
        }
    }
    Ok(report)
}

/// Absolute segment angles and bone lengths from four chain points.
pub fn chain_state_from_points(points: [[f64; 2]; 4]) -> Result<ChainState> {
    const NAMES: [&str; 4] = ["shoulder", "elbow", "wrist", "palm"];
    let seg = |a: usize| -> Result<(f64, f64)> {
        let dx = points[a + 1][0] - points[a][0];
        let dy = points[a + 1][1] - points[a][1];
        let len = dx.hypot(dy);
        if len < MIN_BONE {
            return Err(Error::DegenerateBone {
                from: NAMES[a].into(),
                to: NAMES[a + 1].into(),
            });
        }
        Ok((dy.atan2(dx), len))
    };
    let (theta_se, len_se) = seg(0)?;
    let (theta_ew, len_ew) = seg(1)?;
    let (theta_wp, len_wp) = seg(2)?;
    Ok(ChainState {
        theta_se,
        theta_ew,
        theta_wp,
        len_se,
        len_ew,
        len_wp,
    })
}

pub fn chain_angles(layout: &[String], frame: &[Keypoint], side: Side) -> Result<ChainState> {
    let arm = ArmIndices::resolve(layout, side)?;
    chain_state_from_points(arm.all().map(|i| [frame[i].x, frame[i].y]))
}

/// Per-segment rotation between two chain states: the shoulder segment's
/// absolute change, then each distal segment's change relative to its parent.
pub fn relative_deltas(a: &ChainState, b: &ChainState) -> (f64, f64, f64) {
    let abs_se = wrap_angle(b.theta_se - a.theta_se);
    let abs_ew = wrap_angle(b.theta_ew - a.theta_ew);
    let abs_wp = wrap_angle(b.theta_wp - a.theta_wp);
    let d_se = abs_se;
    let d_ew = abs_ew - d_se;
    let d_wp = abs_wp - d_ew - d_se;
    (d_se, d_ew, d_wp)
}

pub fn angular_velocities(a: &ChainState, b: &ChainState, n: usize) -> AngularVelocities {
    let (d_se, d_ew, d_wp) = relative_deltas(a, b);
    let n = n as f64;
    AngularVelocities {
        omega_se: d_se / n,
        omega_ew: d_ew / n,
        omega_wp: d_wp / n,
    }
}

fn require_visible(
    seq: &KeypointSequence,
    frame: usize,
    indices: &[usize],
    threshold: f64,
    what: &str,
) -> Result<()> {
    for &j in indices {
        if seq.frames[frame][j].confidence < threshold {
            return Err(Error::Precondition(format!(
                "{what}: '{}' not visible in frame {frame}",
                seq.layout[j]
            )));
        }
    }
    Ok(())
}

/// Replaces the elbow, wrist, palm and finger keypoints of the interior gap
/// frames with kinematic-chain extrapolations. Synthesized keypoints carry
/// `confidence = threshold` and `synthetic = true`.
pub fn fill_gap(
    seq: &KeypointSequence,
    gap: &GapAnnotation,
    threshold: f64,
) -> Result<KeypointSequence> {
    let len = seq.frames.len();
    let start = gap.last_visible;
    let end = gap.first_reappear;
    if end >= len || end <= start || end - start != gap.n || gap.n == 0 {
        return Err(Error::Unfillable(format!(
            "gap {start}..{end} (n = {}) is not bracketed inside a {len}-frame sequence",
            gap.n
        )));
    }
    let mut out = seq.clone();
    if gap.n == 1 {
        return Ok(out);
    }
    let arm = ArmIndices::resolve(&seq.layout, gap.side)?;
    require_visible(seq, start, &arm.all(), threshold, "frame t-n")?;
    require_visible(seq, end, &arm.all(), threshold, "frame t")?;
    for i in start + 1..end {
        require_visible(seq, i, &[arm.shoulder], threshold, "gap frame")?;
    }

    let base = chain_angles(&seq.layout, &seq.frames[start], gap.side)?;
    let target = chain_angles(&seq.layout, &seq.frames[end], gap.side)?;
    let w = angular_velocities(&base, &target, gap.n);
    let fingers = finger_indices(&seq.layout, gap.side);
    let palm_base = seq.frames[start][arm.palm];

    let mut prev = base;
    for i in start + 1..end {
        let dt = (i - start) as f64;
        let theta_se = base.theta_se + dt * w.omega_se;
        let theta_ew = base.theta_ew + dt * (w.omega_se + w.omega_ew);
        let theta_wp = base.theta_wp + dt * (w.omega_se + w.omega_ew + w.omega_wp);

        let frame = &mut out.frames[i];
        let s = frame[arm.shoulder];
        let ex = s.x + prev.len_se * theta_se.cos();
        let ey = s.y + prev.len_se * theta_se.sin();
        let wx = ex + prev.len_ew * theta_ew.cos();
        let wy = ey + prev.len_ew * theta_ew.sin();
        let px = wx + prev.len_wp * theta_wp.cos();
        let py = wy + prev.len_wp * theta_wp.sin();

        let synth = |x, y| Keypoint {
            x,
            y,
            confidence: threshold,
            synthetic: true,
        };
        frame[arm.elbow] = synth(ex, ey);
        frame[arm.wrist] = synth(wx, wy);
        frame[arm.palm] = synth(px, py);
        for &f in &fingers {
            let src = seq.frames[start][f];
            frame[f] = synth(src.x + px - palm_base.x, src.y + py - palm_base.y);
        }
        prev = ChainState {
            theta_se,
            theta_ew,
            theta_wp,
            ..prev
        };
    }
    Ok(out)
}

/// Outcome of filling every fillable gap in a sequence.
#[derive(Clone, Debug)]
pub struct FillOutcome {
    pub sequence: KeypointSequence,
    pub report: GapReport,
    /// Gaps whose preconditions failed, with the reason.
    pub failed: Vec<(GapAnnotation, String)>,
}

pub fn fill_all_gaps(seq: &KeypointSequence, threshold: f64) -> Result<FillOutcome> {
    let report = detect_missing_hands(seq, threshold)?;
    let mut sequence = seq.clone();
    let mut failed = Vec::new();
    for gap in &report.gaps {
        // Gaps never overlap on one side, and the two sides touch disjoint
        // keypoints, so filling them one after another is order independent.
        match fill_gap(&sequence, gap, threshold) {
            Ok(filled) => sequence = filled,
            Err(e) => failed.push((*gap, e.to_string())),
        }
    }
    Ok(FillOutcome {
        sequence,
        report,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Vec<String> {
        [
            "left_shoulder",
            "left_elbow",
            "left_wrist",
            "left_palm",
            "right_shoulder",
            "right_elbow",
            "right_wrist",
            "right_palm",
            "left_hand_thumb",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn visible_frame() -> Vec<Keypoint> {
        let pts = [
            (0.0, 0.0),
            (10.0, 0.0),
            (20.0, 0.0),
            (25.0, 0.0),
            (-5.0, 0.0),
            (-15.0, 0.0),
            (-25.0, 0.0),
            (-30.0, 0.0),
            (27.0, 2.0),
        ];
        pts.iter().map(|&(x, y)| Keypoint::new(x, y, 0.9)).collect()
    }

    fn sequence(frames: usize) -> KeypointSequence {
        KeypointSequence {
            layout: layout(),
            frames: vec![visible_frame(); frames],
        }
    }

    fn hide_left(seq: &mut KeypointSequence, frame: usize, wrist: f64, palm: f64) {
        seq.frames[frame][2].confidence = wrist;
        seq.frames[frame][3].confidence = palm;
    }

    #[test]
    fn detects_bracketed_gap() {
        let mut seq = sequence(8);
        for f in 3..=5 {
            hide_left(&mut seq, f, 0.1, 0.1);
        }
        let report = detect_missing_hands(&seq, 0.3).unwrap();
        assert_eq!(
            report.gaps,
            vec![GapAnnotation {
                side: Side::Left,
                last_visible: 2,
                first_reappear: 6,
                n: 4
            }]
        );
        assert!(report.unfillable.is_empty());
    }

    #[test]
    fn one_confident_joint_is_not_missing() {
        let mut seq = sequence(5);
        hide_left(&mut seq, 2, 0.1, 0.9);
        let report = detect_missing_hands(&seq, 0.3).unwrap();
        assert!(report.gaps.is_empty());
    }

    #[test]
    fn all_visible_gives_empty_report() {
        let report = detect_missing_hands(&sequence(4), 0.3).unwrap();
        assert_eq!(report, GapReport::default());
    }

    #[test]
    fn boundary_runs_are_unfillable() {
        let mut seq = sequence(6);
        hide_left(&mut seq, 0, 0.0, 0.0);
        hide_left(&mut seq, 1, 0.0, 0.0);
        seq.frames[5][6].confidence = 0.0;
        seq.frames[5][7].confidence = 0.0;
        let report = detect_missing_hands(&seq, 0.3).unwrap();
        assert!(report.gaps.is_empty());
        assert_eq!(report.unfillable.len(), 2);
        assert_eq!(report.unfillable[0].last_missing, 1);
        assert_eq!(report.unfillable[1].side, Side::Right);
    }

    #[test]
    fn missing_palm_in_layout_is_config_error() {
        let mut seq = sequence(3);
        seq.layout[3] = "left_hand".into();
        assert!(matches!(
            detect_missing_hands(&seq, 0.3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_sequence_rejected() {
        assert!(detect_missing_hands(&sequence(1), 0.3).is_err());
    }

    #[test]
    fn collinear_arm_angles() {
        let s = chain_state_from_points([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        assert_eq!((s.theta_se, s.theta_ew, s.theta_wp), (0.0, 0.0, 0.0));
        assert_eq!((s.len_se, s.len_ew, s.len_wp), (1.0, 1.0, 1.0));
    }

    #[test]
    fn vertical_bone_is_half_pi() {
        let s = chain_state_from_points([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(s.theta_se, PI / 2.0);
    }

    #[test]
    fn coincident_joints_are_degenerate() {
        let r = chain_state_from_points([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [2.0, 1.0]]);
        assert!(matches!(r, Err(Error::DegenerateBone { .. })));
    }

    #[test]
    fn identical_states_have_zero_deltas() {
        let s = chain_state_from_points([[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [4.0, 4.0]]).unwrap();
        assert_eq!(relative_deltas(&s, &s), (0.0, 0.0, 0.0));
    }

    #[test]
    fn deltas_decompose_absolute_changes() {
        let a = ChainState {
            theta_se: 0.0,
            theta_ew: 0.0,
            theta_wp: 0.0,
            len_se: 1.0,
            len_ew: 1.0,
            len_wp: 1.0,
        };
        let b = ChainState {
            theta_se: 0.2,
            theta_ew: 0.5,
            theta_wp: 0.9,
            ..a
        };
        let (d0, d1, d2) = relative_deltas(&a, &b);
        assert!((d0 - 0.2).abs() < 1e-15);
        assert!((d1 - 0.3).abs() < 1e-15);
        assert!((d2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn single_step_gap_is_identity() {
        let seq = sequence(4);
        let gap = GapAnnotation {
            side: Side::Left,
            last_visible: 1,
            first_reappear: 2,
            n: 1,
        };
        assert_eq!(fill_gap(&seq, &gap, 0.3).unwrap(), seq);
    }

    #[test]
    fn static_arm_is_copied_and_fingers_follow_palm() {
        let mut seq = sequence(6);
        for f in 2..=3 {
            hide_left(&mut seq, f, 0.05, 0.05);
            // shoulder moves, arm shape must follow it rigidly
            seq.frames[f][0].x += f as f64;
            seq.frames[f][1] = Keypoint::new(500.0, 500.0, 0.1);
            seq.frames[f][8] = Keypoint::new(-1.0, -1.0, 0.0);
        }
        let gap = detect_missing_hands(&seq, 0.3).unwrap().gaps[0];
        let filled = fill_gap(&seq, &gap, 0.3).unwrap();
        for f in 2..=3 {
            let fr = &filled.frames[f];
            let dx = f as f64;
            assert!((fr[1].x - (10.0 + dx)).abs() < 1e-12 && fr[1].y.abs() < 1e-12);
            assert!((fr[3].x - (25.0 + dx)).abs() < 1e-12);
            assert!((fr[8].x - (27.0 + dx)).abs() < 1e-12 && (fr[8].y - 2.0).abs() < 1e-12);
            assert!(fr[1].synthetic && fr[2].synthetic && fr[3].synthetic && fr[8].synthetic);
            assert_eq!(fr[3].confidence, 0.3);
            assert!(!fr[0].synthetic);
            let st = chain_angles(&filled.layout, fr, Side::Left).unwrap();
            assert!((st.len_se - 10.0).abs() < 1e-9);
            assert!((st.len_ew - 10.0).abs() < 1e-9);
            assert!((st.len_wp - 5.0).abs() < 1e-9);
        }
        // untouched frames
        assert_eq!(filled.frames[0], seq.frames[0]);
        assert_eq!(filled.frames[4], seq.frames[4]);
    }

    #[test]
    fn boundary_gap_cannot_be_filled() {
        let seq = sequence(4);
        let gap = GapAnnotation {
            side: Side::Left,
            last_visible: 2,
            first_reappear: 5,
            n: 3,
        };
        assert!(matches!(fill_gap(&seq, &gap, 0.3), Err(Error::Unfillable(_))));
    }

    #[test]
    fn hidden_shoulder_is_precondition_error() {
        let mut seq = sequence(5);
        hide_left(&mut seq, 2, 0.0, 0.0);
        seq.frames[2][0].confidence = 0.0;
        let gap = detect_missing_hands(&seq, 0.3).unwrap().gaps[0];
        assert!(matches!(fill_gap(&seq, &gap, 0.3), Err(Error::Precondition(_))));
    }
}
