//! Training losses and evaluation metrics for root-relative 3D poses.
//!
//! Losses are the per-joint Euclidean-distance sums used by the training
//! objective; metrics are millimeter errors: MPJPE (protocol #1), P-MPJPE
//! after per-frame similarity alignment (protocol #2), and MPJVE on first
//! temporal differences.

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::model::PredictionScheme;

fn pose_dims(g: &ValueGrid, what: &str) -> Result<(usize, usize)> {
    match g.shape() {
        [j, 3] => Ok((1, *j)),
        [f, j, 3] => Ok((*f, *j)),
        other => Err(Error::dimension(format!("{what}: expected [J,3] or [F,J,3], got {other:?}"))),
    }
}

fn check_same(pred: &ValueGrid, gt: &ValueGrid, what: &str) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dimension(format!(
            "{what}: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    pose_dims(pred, what)
}

/// Sum over frames and joints of the per-joint Euclidean distance.
pub fn sequence_loss(pred: &ValueGrid, gt: &ValueGrid) -> Result<f64> {
    check_same(pred, gt, "sequence_loss")?;
    let mut total = 0.0;
    for (p, t) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)) {
        total += dist3(p, t);
    }
    Ok(total)
}

/// Single-frame variant of the sequence loss.
pub fn single_frame_loss(pred: &ValueGrid, gt: &ValueGrid) -> Result<f64> {
    let (frames, _) = check_same(pred, gt, "single_frame_loss")?;
    if frames != 1 {
        return Err(Error::dimension(format!(
            "single_frame_loss: expected one frame, got {frames}"
        )));
    }
    sequence_loss(pred, gt)
}

/// Weighted combination of the two loss terms. `Full` keeps only the
/// sequence-scale term and `Single` only the target-frame term; the remaining
/// schemes use both.
pub fn total_loss(
    loss_seq: f64,
    loss_single: f64,
    weight_seq: f64,
    weight_single: f64,
    mode: PredictionScheme,
) -> Result<f64> {
    if weight_seq < 0.0 || weight_single < 0.0 {
        return Err(Error::config("loss weights must be non-negative"));
    }
    let (wf, ws) = match mode {
        PredictionScheme::Full => (weight_seq, 0.0),
        PredictionScheme::Single => (0.0, weight_single),
        _ => (weight_seq, weight_single),
    };
    if wf == 0.0 && ws == 0.0 {
        return Err(Error::config("all effective loss weights are zero"));
    }
    Ok(wf * loss_seq + ws * loss_single)
}

fn dist3(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Mean per-joint position error (protocol #1).
pub fn mpjpe(pred: &ValueGrid, gt: &ValueGrid) -> Result<f64> {
    let (frames, joints) = check_same(pred, gt, "mpjpe")?;
    Ok(sequence_loss(pred, gt)? / (frames * joints) as f64)
}

/// Outcome details of the per-frame Procrustes alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlignmentStats {
    /// Frames where the point cloud was degenerate and only translation was removed.
    pub degenerate_frames: usize,
}

/// P-MPJPE (protocol #2): per frame, align the prediction to the ground truth
/// in translation, rotation, and uniform scale, then measure MPJPE.
///
/// The rotation comes from the SVD of the centered cross-covariance with the
/// determinant sign corrected, so reflections are never credited. Frames with
/// a collapsed point cloud fall back to translation-only alignment and are
/// counted in the returned stats.
pub fn p_mpjpe_with_stats(pred: &ValueGrid, gt: &ValueGrid) -> Result<(f64, AlignmentStats)> {
    let (frames, joints) = check_same(pred, gt, "p_mpjpe")?;
    let mut total = 0.0;
    let mut stats = AlignmentStats::default();
    let w = joints * 3;
    for f in 0..frames {
        let p = &pred.data()[f * w..(f + 1) * w];
        let g = &gt.data()[f * w..(f + 1) * w];
        total += aligned_frame_error(p, g, joints, &mut stats);
    }
    Ok((total / (frames * joints) as f64, stats))
}

pub fn p_mpjpe(pred: &ValueGrid, gt: &ValueGrid) -> Result<f64> {
    let (err, stats) = p_mpjpe_with_stats(pred, gt)?;
    if stats.degenerate_frames > 0 {
        log::warn!(
            "p_mpjpe: {} frame(s) degenerate; translation-only alignment used",
            stats.degenerate_frames
        );
    }
    Ok(err)
}

fn aligned_frame_error(pred: &[f64], gt: &[f64], joints: usize, stats: &mut AlignmentStats) -> f64 {
    let n = joints as f64;
    let mut mu_p = [0.0; 3];
    let mut mu_g = [0.0; 3];
    for j in 0..joints {
        for c in 0..3 {
            mu_p[c] += pred[j * 3 + c] / n;
            mu_g[c] += gt[j * 3 + c] / n;
        }
    }
    let centered = |src: &[f64], mu: &[f64; 3], j: usize, c: usize| src[j * 3 + c] - mu[c];
    let mut norm_p = 0.0;
    let mut norm_g = 0.0;
    for j in 0..joints {
        for c in 0..3 {
            norm_p += centered(pred, &mu_p, j, c).powi(2);
            norm_g += centered(gt, &mu_g, j, c).powi(2);
        }
    }
    if norm_p < 1e-12 || norm_g < 1e-12 {
        stats.degenerate_frames += 1;
        let mut sum = 0.0;
        for j in 0..joints {
            let mut sq = 0.0;
            for c in 0..3 {
                sq += (centered(pred, &mu_p, j, c) - centered(gt, &mu_g, j, c)).powi(2);
            }
            sum += sq.sqrt();
        }
        return sum;
    }

    // cross-covariance of centered clouds (pred rows as source, gt as target)
    let mut h: Matrix3<f64> = Matrix3::zeros();
    for j in 0..joints {
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += centered(pred, &mu_p, j, r) * centered(gt, &mu_g, j, c);
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let scale =
        (svd.singular_values[0] + svd.singular_values[1] + d * svd.singular_values[2]) / norm_p;

    let mut sum = 0.0;
    for j in 0..joints {
        let p = nalgebra::Vector3::new(
            centered(pred, &mu_p, j, 0),
            centered(pred, &mu_p, j, 1),
            centered(pred, &mu_p, j, 2),
        );
        let aligned = rotation * p * scale;
        let mut sq = 0.0;
        for c in 0..3 {
            let diff = aligned[c] + mu_g[c] - gt[j * 3 + c];
            sq += diff * diff;
        }
        sum += sq.sqrt();
    }
    sum
}

/// MPJVE: MPJPE of the first temporal differences of both sequences.
pub fn mpjve(pred: &ValueGrid, gt: &ValueGrid) -> Result<f64> {
    let (frames, joints) = check_same(pred, gt, "mpjve")?;
    if frames < 2 {
        return Err(Error::dimension("mpjve: needs at least 2 frames"));
    }
    let w = joints * 3;
    let mut total = 0.0;
    for f in 1..frames {
        for j in 0..joints {
            let idx = f * w + j * 3;
            let prev = idx - w;
            let dp = [
                pred.data()[idx] - pred.data()[prev],
                pred.data()[idx + 1] - pred.data()[prev + 1],
                pred.data()[idx + 2] - pred.data()[prev + 2],
            ];
            let dg = [
                gt.data()[idx] - gt.data()[prev],
                gt.data()[idx + 1] - gt.data()[prev + 1],
                gt.data()[idx + 2] - gt.data()[prev + 2],
            ];
            total += dist3(&dp, &dg);
        }
    }
    Ok(total / ((frames - 1) * joints) as f64)
}

/// Millimeter metrics for one evaluation slice.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActionMetrics {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub mpjve: f64,
    pub samples: usize,
}

/// Evaluation summary with a per-action breakdown.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    pub mpjve: f64,
    pub per_action: BTreeMap<String, ActionMetrics>,
}

impl MetricReport {
    /// CSV rendering: one row per action plus a trailing "Avg." row.
    /// f64 values are printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,mpjpe,p_mpjpe,mpjve,samples\n");
        for (action, m) in &self.per_action {
            out.push_str(&format!(
                "{action},{},{},{},{}\n",
                m.mpjpe, m.p_mpjpe, m.mpjve, m.samples
            ));
        }
        let total: usize = self.per_action.values().map(|m| m.samples).sum();
        out.push_str(&format!("Avg.,{},{},{},{total}\n", self.mpjpe, self.p_mpjpe, self.mpjve));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use nalgebra::{Rotation3, Vector3};

    fn random_pose(rng: &mut RngStream, frames: usize, joints: usize) -> ValueGrid {
        ValueGrid::from_fn(&[frames, joints, 3], |_| rng.uniform_in(-500.0, 500.0))
    }

    #[test]
    fn losses_zero_on_equal_inputs() {
        let mut rng = RngStream::new(1);
        let x = random_pose(&mut rng, 4, 6);
        assert_eq!(sequence_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn sequence_loss_345_triangle() {
        let gt = ValueGrid::zeros(&[2, 3, 3]);
        let mut pred = ValueGrid::zeros(&[2, 3, 3]);
        // one joint in one frame off by (3,4,0)
        pred.data_mut()[9 + 3] = 3.0;
        pred.data_mut()[9 + 4] = 4.0;
        assert!((sequence_loss(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_loss_sums_joint_distances() {
        let gt = ValueGrid::zeros(&[2, 3]);
        let mut pred = ValueGrid::zeros(&[2, 3]);
        pred.data_mut()[2] = 1.0; // joint 0 off by (0,0,1)
        pred.data_mut()[4] = 2.0; // joint 1 off by (0,2,0)
        assert!((single_frame_loss(&pred, &gt).unwrap() - 3.0).abs() < 1e-12);
        // multi-frame input is rejected
        let seq = ValueGrid::zeros(&[2, 2, 3]);
        assert!(single_frame_loss(&seq, &seq).is_err());
    }

    #[test]
    fn losses_match_scalar_loop_oracle() {
        let mut rng = RngStream::new(2);
        let pred = random_pose(&mut rng, 5, 7);
        let gt = random_pose(&mut rng, 5, 7);
        let mut expected = 0.0;
        for f in 0..5 {
            for j in 0..7 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let idx = (f * 7 + j) * 3 + c;
                    sq += (pred.data()[idx] - gt.data()[idx]).powi(2);
                }
                expected += sq.sqrt();
            }
        }
        assert!((sequence_loss(&pred, &gt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting_and_modes() {
        let five = total_loss(2.0, 3.0, 1.0, 1.0, PredictionScheme::FullToSingle).unwrap();
        assert_eq!(five, 5.0);
        assert_eq!(total_loss(2.0, 3.0, 1.0, 1.0, PredictionScheme::Single).unwrap(), 3.0);
        assert_eq!(total_loss(2.0, 3.0, 1.0, 1.0, PredictionScheme::Full).unwrap(), 2.0);
        assert!(total_loss(2.0, 3.0, 0.0, 0.0, PredictionScheme::FullToSingle).is_err());
        assert!(total_loss(2.0, 3.0, -1.0, 1.0, PredictionScheme::FullToSingle).is_err());
    }

    #[test]
    fn mpjpe_known_offset() {
        let mut rng = RngStream::new(3);
        let gt = random_pose(&mut rng, 3, 5);
        let mut pred = gt.clone();
        for chunk in pred.data_mut().chunks_exact_mut(3) {
            chunk[1] += 3.0;
            chunk[2] += 4.0;
        }
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn p_mpjpe_invariant_under_similarity_transform() {
        let mut rng = RngStream::new(4);
        let gt = random_pose(&mut rng, 4, 8);
        let rot = Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.8, 0.52)),
            1.2345,
        );
        let mut pred = gt.clone();
        for chunk in pred.data_mut().chunks_exact_mut(3) {
            let v = rot * Vector3::new(chunk[0], chunk[1], chunk[2]) * 2.0
                + Vector3::new(100.0, -42.0, 7.0);
            chunk.copy_from_slice(&[v[0], v[1], v[2]]);
        }
        let (err, stats) = p_mpjpe_with_stats(&pred, &gt).unwrap();
        assert!(err < 1e-9, "similarity-aligned error {err}");
        assert_eq!(stats.degenerate_frames, 0);
    }

    #[test]
    fn p_mpjpe_invariant_under_common_rigid_transform() {
        let mut rng = RngStream::new(14);
        let gt = random_pose(&mut rng, 3, 8);
        let pred = random_pose(&mut rng, 3, 8);
        let base = p_mpjpe(&pred, &gt).unwrap();
        let rot = Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(-0.5, 0.1, 0.85)),
            0.777,
        );
        let apply = |g: &ValueGrid| {
            let mut out = g.clone();
            for chunk in out.data_mut().chunks_exact_mut(3) {
                let v = rot * Vector3::new(chunk[0], chunk[1], chunk[2])
                    + Vector3::new(-3.0, 14.0, 200.0);
                chunk.copy_from_slice(&[v[0], v[1], v[2]]);
            }
            out
        };
        let moved = p_mpjpe(&apply(&pred), &apply(&gt)).unwrap();
        assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    #[test]
    fn reflection_not_credited() {
        // a mirrored skeleton must not align to zero error
        let mut rng = RngStream::new(5);
        let gt = random_pose(&mut rng, 1, 10);
        let mut pred = gt.clone();
        for chunk in pred.data_mut().chunks_exact_mut(3) {
            chunk[0] = -chunk[0];
        }
        let err = p_mpjpe(&pred, &gt).unwrap();
        assert!(err > 1.0, "reflection scored {err}");
    }

    #[test]
    fn p_mpjpe_not_above_mpjpe_on_random_pairs() {
        let mut rng = RngStream::new(6);
        for _ in 0..1000 {
            let gt = random_pose(&mut rng, 1, 17);
            let pred = random_pose(&mut rng, 1, 17);
            let direct = mpjpe(&pred, &gt).unwrap();
            let aligned = p_mpjpe(&pred, &gt).unwrap();
            assert!(aligned <= direct + 1e-9, "aligned {aligned} > direct {direct}");
        }
    }

    #[test]
    fn degenerate_prediction_flagged() {
        let mut rng = RngStream::new(7);
        let gt = random_pose(&mut rng, 1, 6);
        let pred = ValueGrid::full(&[1, 6, 3], 55.0);
        let (_, stats) = p_mpjpe_with_stats(&pred, &gt).unwrap();
        assert_eq!(stats.degenerate_frames, 1);
    }

    #[test]
    fn mpjve_kills_constant_offsets() {
        let mut rng = RngStream::new(8);
        let gt = random_pose(&mut rng, 6, 5);
        let mut pred = gt.clone();
        for chunk in pred.data_mut().chunks_exact_mut(3) {
            chunk[0] += 17.0;
            chunk[1] -= 4.0;
            chunk[2] += 0.5;
        }
        assert!(mpjve(&pred, &gt).unwrap() < 1e-12);
        let single = ValueGrid::zeros(&[1, 5, 3]);
        assert!(mpjve(&single, &single).is_err());
    }

    #[test]
    fn mpjve_matches_loop_oracle() {
        let mut rng = RngStream::new(9);
        let pred = random_pose(&mut rng, 5, 4);
        let gt = random_pose(&mut rng, 5, 4);
        let w = 12;
        let mut expected = 0.0;
        for f in 1..5 {
            for j in 0..4 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let idx = f * w + j * 3 + c;
                    let dp = pred.data()[idx] - pred.data()[idx - w];
                    let dg = gt.data()[idx] - gt.data()[idx - w];
                    sq += (dp - dg) * (dp - dg);
                }
                expected += sq.sqrt();
            }
        }
        expected /= (4 * 4) as f64;
        assert!((mpjve(&pred, &gt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_layout_round_trips_values() {
        let mut report = MetricReport {
            mpjpe: 12.345678901234567,
            p_mpjpe: 10.1,
            mpjve: 1.5,
            per_action: BTreeMap::new(),
        };
        report.per_action.insert(
            "Walk".into(),
            ActionMetrics { mpjpe: 13.0, p_mpjpe: 11.0, mpjve: 2.0, samples: 10 },
        );
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "action,mpjpe,p_mpjpe,mpjve,samples");
        assert!(lines[1].starts_with("Walk,"));
        assert!(lines[2].starts_with("Avg.,"));
        let avg_mpjpe: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(avg_mpjpe, report.mpjpe);
    }
}
