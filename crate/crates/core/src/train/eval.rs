use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::metrics::{p_mpjpe_with_stats, ActionMetrics, MetricReport};
use crate::model::{forward_eval, ModelConfig, ModelParameters};
use crate::synth::{flip_pose, PoseSequenceSample, SkeletonSpec};

const EVAL_CHUNK: usize = 64;

/// Evaluate target-frame predictions over a windowed dataset.
///
/// With flip averaging on, each prediction is the mean of the plain forward
/// and the un-flipped forward of the mirrored input. Predictions are
/// re-rooted (root joint subtracted) before metrics, matching the
/// root-relative targets. MPJVE is computed by stitching per-window center
/// predictions back into their source sequences in frame order and
/// differencing.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParameters,
    dataset: &[PoseSequenceSample],
    skel: &SkeletonSpec,
    flip_averaging: bool,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::config("evaluate: empty dataset"));
    }
    let joints = cfg.joints;
    if dataset[0].frames() != cfg.frames || dataset[0].joints() != joints {
        return Err(Error::dimension(format!(
            "evaluate: dataset windows [{}, {}] do not match config [{}, {}]",
            dataset[0].frames(),
            dataset[0].joints(),
            cfg.frames,
            joints
        )));
    }
    if flip_averaging && skel.joints() != joints {
        return Err(Error::dimension("evaluate: skeleton does not match dataset joints"));
    }

    let predictions = predict_centers(cfg, params, dataset, skel, flip_averaging)?;

    // position metrics over every window
    let mut per_action_pos: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut sum_mpjpe = 0.0;
    let mut sum_p_mpjpe = 0.0;
    for (sample, pred) in dataset.iter().zip(&predictions) {
        let gt = &sample.target_center;
        let e1 = crate::metrics::mpjpe(pred, gt)?;
        let (e2, _) = p_mpjpe_with_stats(pred, gt)?;
        sum_mpjpe += e1;
        sum_p_mpjpe += e2;
        let entry = per_action_pos.entry(sample.meta.action.clone()).or_default();
        entry.0 += e1;
        entry.1 += e2;
        entry.2 += 1;
    }
    let n = dataset.len() as f64;

    // velocity metric over stitched sequences
    let mut by_sequence: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, sample) in dataset.iter().enumerate() {
        by_sequence.entry(sample.meta.sequence_id).or_default().push(i);
    }
    let mut velocity_num = 0.0; // summed per-joint velocity errors
    let mut velocity_den = 0usize; // (frames-1) * joints
    let mut per_action_vel: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for indices in by_sequence.values_mut() {
        indices.sort_by_key(|&i| dataset[i].meta.frame_index);
        if indices.len() < 2 {
            continue;
        }
        let frames = indices.len();
        let mut pred_seq = ValueGrid::zeros(&[frames, joints, 3]);
        let mut gt_seq = ValueGrid::zeros(&[frames, joints, 3]);
        for (row, &i) in indices.iter().enumerate() {
            pred_seq.data_mut()[row * joints * 3..(row + 1) * joints * 3]
                .copy_from_slice(predictions[i].data());
            gt_seq.data_mut()[row * joints * 3..(row + 1) * joints * 3]
                .copy_from_slice(dataset[i].target_center.data());
        }
        let mpjve = crate::metrics::mpjve(&pred_seq, &gt_seq)?;
        let weight = (frames - 1) * joints;
        velocity_num += mpjve * weight as f64;
        velocity_den += weight;
        let action = dataset[indices[0]].meta.action.clone();
        let entry = per_action_vel.entry(action).or_default();
        entry.0 += mpjve * weight as f64;
        entry.1 += weight;
    }
    if velocity_den == 0 {
        log::warn!("evaluate: no sequence has two or more windows; MPJVE reported as 0");
    }

    let mut per_action = BTreeMap::new();
    for (action, (m, p, count)) in per_action_pos {
        let vel = per_action_vel
            .get(&action)
            .map(|(num, den)| if *den > 0 { num / *den as f64 } else { 0.0 })
            .unwrap_or(0.0);
        per_action.insert(
            action,
            ActionMetrics {
                mpjpe: m / count as f64,
                p_mpjpe: p / count as f64,
                mpjve: vel,
                samples: count,
            },
        );
    }
    Ok(MetricReport {
        mpjpe: sum_mpjpe / n,
        p_mpjpe: sum_p_mpjpe / n,
        mpjve: if velocity_den > 0 { velocity_num / velocity_den as f64 } else { 0.0 },
        per_action,
    })
}

/// Re-rooted center-frame predictions for every window, in dataset order.
pub fn predict_centers(
    cfg: &ModelConfig,
    params: &ModelParameters,
    dataset: &[PoseSequenceSample],
    skel: &SkeletonSpec,
    flip_averaging: bool,
) -> Result<Vec<ValueGrid>> {
    let joints = cfg.joints;
    let mut predictions = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(EVAL_CHUNK) {
        let plain = batch_forward_centers(cfg, params, chunk, false, skel)?;
        if flip_averaging {
            let mirrored = batch_forward_centers(cfg, params, chunk, true, skel)?;
            for (a, b) in plain.into_iter().zip(mirrored) {
                let unflipped = flip_pose(&b, skel)?;
                let mut avg = a;
                for (x, y) in avg.data_mut().iter_mut().zip(unflipped.data()) {
                    *x = 0.5 * (*x + y);
                }
                predictions.push(re_root(avg, joints));
            }
        } else {
            for p in plain {
                predictions.push(re_root(p, joints));
            }
        }
    }
    Ok(predictions)
}

fn batch_forward_centers(
    cfg: &ModelConfig,
    params: &ModelParameters,
    chunk: &[PoseSequenceSample],
    mirrored: bool,
    skel: &SkeletonSpec,
) -> Result<Vec<ValueGrid>> {
    let b = chunk.len();
    let (t, j) = (cfg.frames, cfg.joints);
    let mut data = Vec::with_capacity(b * t * j * 2);
    for sample in chunk {
        if mirrored {
            data.extend_from_slice(flip_pose(&sample.input2d, skel)?.data());
        } else {
            data.extend_from_slice(sample.input2d.data());
        }
    }
    let batch = ValueGrid::new(vec![b, t, j, 2], data)?;
    let out = forward_eval(cfg, params, &batch, false)?;
    let width = j * 3;
    Ok((0..b)
        .map(|s| {
            let mm: Vec<f64> = out.target3d.data()[s * width..(s + 1) * width]
                .iter()
                .map(|v| v * crate::train::MM_PER_MODEL_UNIT)
                .collect();
            ValueGrid::new(vec![j, 3], mm).expect("slice shape")
        })
        .collect())
}

fn re_root(mut pose: ValueGrid, joints: usize) -> ValueGrid {
    let root = [pose.data()[0], pose.data()[1], pose.data()[2]];
    for jj in 0..joints {
        pose.data_mut()[jj * 3] -= root[0];
        pose.data_mut()[jj * 3 + 1] -= root[1];
        pose.data_mut()[jj * 3 + 2] -= root[2];
    }
    pose
}
