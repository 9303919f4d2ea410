//! Deterministic training orchestration: AMSGrad with per-epoch learning-rate
//! decay, mode-routed supervision on the two regression heads, optional flip
//! augmentation, per-epoch evaluation, and best-checkpoint retention.

mod attention;
mod eval;
mod optimizer;

pub use attention::export_attention;
pub use eval::{evaluate, predict_centers};
pub use optimizer::Amsgrad;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::model::{
    build_forward, BuiltForward, ForwardOptions, ModelConfig, ModelParameters, PredictionScheme,
};
use crate::rng::RngStream;
use crate::synth::{flip_pose, PoseSequenceSample, SkeletonSpec};
use crate::tape::{NodeId, Tape};
use crate::BN_MOMENTUM;

/// The network regresses meter-scaled coordinates; dataset targets and all
/// reported metrics are millimeters.
pub const MM_PER_MODEL_UNIT: f64 = 1000.0;

/// Training hyperparameters around a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Initial learning rate.
    pub lr0: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips during training.
    pub flip_augment: bool,
    /// Flip averaging during evaluation.
    pub flip_eval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr0: 0.001,
            lr_decay: 0.95,
            epochs: 80,
            batch_size: 128,
            seed: 0,
            flip_augment: true,
            flip_eval: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lr0 <= 0.0 {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::config("lr_decay must be in (0, 1]"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(json)
            .map_err(|e| Error::config(format!("invalid train config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// One epoch's record. Wall time is informational only and stays out of the
/// serialized log so identical runs produce identical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Sequence-scale loss terms (unweighted, batch-mean of per-sample sums).
    pub loss_seq: f64,
    /// Target-frame-scale loss terms (unweighted).
    pub loss_single: f64,
    /// The optimized objective (weighted).
    pub loss_total: f64,
    pub eval_mpjpe: f64,
    pub eval_p_mpjpe: f64,
    pub eval_mpjve: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
}

impl RunLog {
    pub fn to_csv(&self, model: &ModelConfig) -> String {
        let per_joint_seq = (model.frames * model.joints) as f64;
        let per_joint_single = model.joints as f64;
        let mut out = String::from(
            "epoch,lr,loss_seq,loss_single,loss_total,loss_seq_per_joint,loss_single_per_joint,eval_mpjpe,eval_p_mpjpe,eval_mpjve\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.loss_seq,
                e.loss_single,
                e.loss_total,
                e.loss_seq / per_joint_seq,
                e.loss_single / per_joint_single,
                e.eval_mpjpe,
                e.eval_p_mpjpe,
                e.eval_mpjve,
            ));
        }
        out
    }
}

/// Result of a training run. When a non-finite loss aborts training,
/// `aborted` carries the diagnostic and `params` the last good state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-eval epoch (or last good state on abort).
    pub params: ModelParameters,
    pub best_epoch: usize,
    pub log: RunLog,
    pub aborted: Option<String>,
}

struct AssembledBatch {
    inputs: ValueGrid,
    gt_seq: ValueGrid,
    gt_center: ValueGrid,
}

fn worker_threads() -> usize {
    std::env::var("SL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Gather one batch, applying per-sample deterministic flip augmentation.
/// Sample slots are filled independently, so the result does not depend on
/// the worker count.
fn assemble_batch(
    cfg: &ModelConfig,
    dataset: &[PoseSequenceSample],
    indices: &[usize],
    skel: &SkeletonSpec,
    flip_augment: bool,
    seed: u64,
    epoch: usize,
    threads: usize,
) -> Result<AssembledBatch> {
    let b = indices.len();
    let (t, j) = (cfg.frames, cfg.joints);
    let in_w = t * j * 2;
    let seq_w = t * j * 3;
    let ctr_w = j * 3;
    let mut inputs = vec![0.0; b * in_w];
    let mut gt_seq = vec![0.0; b * seq_w];
    let mut gt_center = vec![0.0; b * ctr_w];

    let fill = |idx: usize,
                input_slot: &mut [f64],
                seq_slot: &mut [f64],
                ctr_slot: &mut [f64]|
     -> Result<()> {
        let sample = &dataset[idx];
        let mut stream =
            RngStream::new(seed).derive(0xF11B).derive(epoch as u64).derive(idx as u64);
        let flip = flip_augment && stream.chance(0.5);
        if flip {
            input_slot.copy_from_slice(flip_pose(&sample.input2d, skel)?.data());
            seq_slot.copy_from_slice(flip_pose(&sample.target_seq, skel)?.data());
            ctr_slot.copy_from_slice(flip_pose(&sample.target_center, skel)?.data());
        } else {
            input_slot.copy_from_slice(sample.input2d.data());
            seq_slot.copy_from_slice(sample.target_seq.data());
            ctr_slot.copy_from_slice(sample.target_center.data());
        }
        Ok(())
    };

    if threads <= 1 || b < 2 * threads {
        for (slot, &idx) in indices.iter().enumerate() {
            fill(
                idx,
                &mut inputs[slot * in_w..(slot + 1) * in_w],
                &mut gt_seq[slot * seq_w..(slot + 1) * seq_w],
                &mut gt_center[slot * ctr_w..(slot + 1) * ctr_w],
            )?;
        }
    } else {
        let chunk = b.div_ceil(threads);
        let mut outcomes: Vec<Result<()>> = Vec::new();
        std::thread::scope(|scope| {
            let mut in_rest = inputs.as_mut_slice();
            let mut seq_rest = gt_seq.as_mut_slice();
            let mut ctr_rest = gt_center.as_mut_slice();
            let mut handles = Vec::new();
            for chunk_indices in indices.chunks(chunk) {
                let n = chunk_indices.len();
                let (in_slice, in_tail) = in_rest.split_at_mut(n * in_w);
                let (seq_slice, seq_tail) = seq_rest.split_at_mut(n * seq_w);
                let (ctr_slice, ctr_tail) = ctr_rest.split_at_mut(n * ctr_w);
                in_rest = in_tail;
                seq_rest = seq_tail;
                ctr_rest = ctr_tail;
                let fill = &fill;
                handles.push(scope.spawn(move || -> Result<()> {
                    for (local, &idx) in chunk_indices.iter().enumerate() {
                        fill(
                            idx,
                            &mut in_slice[local * in_w..(local + 1) * in_w],
                            &mut seq_slice[local * seq_w..(local + 1) * seq_w],
                            &mut ctr_slice[local * ctr_w..(local + 1) * ctr_w],
                        )?;
                    }
                    Ok(())
                }));
            }
            for handle in handles {
                outcomes.push(match handle.join() {
                    Ok(r) => r,
                    Err(_) => Err(Error::Internal("assembly worker panicked".into())),
                });
            }
        });
        for outcome in outcomes {
            outcome?;
        }
    }

    Ok(AssembledBatch {
        inputs: ValueGrid::new(vec![b, t, j, 2], inputs)?,
        gt_seq: ValueGrid::new(vec![b * t, j * 3], gt_seq)?,
        gt_center: ValueGrid::new(vec![b, j * 3], gt_center)?,
    })
}

struct BatchLoss {
    total: NodeId,
    seq_scale: f64,
    single_scale: f64,
}

/// Attach the mode-routed loss terms to a built forward pass. Returned raw
/// values are batch means of the per-sample sums.
fn attach_losses(
    tape: &mut Tape,
    cfg: &ModelConfig,
    built: &BuiltForward,
    gt_seq: &ValueGrid,
    gt_center: &ValueGrid,
) -> Result<BatchLoss> {
    let b = built.batch as f64;
    let (w1, w2) = cfg.effective_loss_weights();
    let to_model_units = |g: &ValueGrid| {
        let data = g.data().iter().map(|v| v / MM_PER_MODEL_UNIT).collect();
        ValueGrid::new(g.shape().to_vec(), data).expect("same shape")
    };
    let gt_seq_leaf = tape.leaf(to_model_units(gt_seq));
    let gt_center_leaf = tape.leaf(to_model_units(gt_center));

    let mut seq_scale = 0.0;
    let mut single_scale = 0.0;
    let mut weighted_terms: Vec<NodeId> = Vec::new();

    tape.set_scope("loss");
    if w1 > 0.0 {
        let (term, is_seq_scale) = match cfg.mode {
            PredictionScheme::SingleToSingle => {
                let center = tape.center_rows(built.seq_head, cfg.frames)?;
                (tape.joint_dist_sum(center, gt_center_leaf)?, false)
            }
            _ => (tape.joint_dist_sum(built.seq_head, gt_seq_leaf)?, true),
        };
        let raw = tape.value(term).data()[0] / b;
        if is_seq_scale {
            seq_scale += raw;
        } else {
            single_scale += raw;
        }
        weighted_terms.push(tape.scale(term, w1 / b)?);
    }
    if w2 > 0.0 {
        if let Some(head2) = built.target_head {
            let (term, is_seq_scale) = if built.seq2_len == 1 {
                (tape.joint_dist_sum(head2, gt_center_leaf)?, false)
            } else {
                (tape.joint_dist_sum(head2, gt_seq_leaf)?, true)
            };
            let raw = tape.value(term).data()[0] / b;
            if is_seq_scale {
                seq_scale += raw;
            } else {
                single_scale += raw;
            }
            weighted_terms.push(tape.scale(term, w2 / b)?);
        }
    }
    let total = match weighted_terms.len() {
        1 => weighted_terms[0],
        2 => tape.add(weighted_terms[0], weighted_terms[1])?,
        _ => return Err(Error::config("no active loss terms")),
    };
    Ok(BatchLoss { total, seq_scale, single_scale })
}

/// Train a model. Fully deterministic given (config, datasets, binary):
/// epoch shuffles, dropout, and flip draws all derive from the seed.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[PoseSequenceSample],
    eval_set: &[PoseSequenceSample],
    skel: &SkeletonSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::config("train: empty dataset"));
    }
    for set in [train_set, eval_set] {
        if set[0].frames() != cfg.model.frames || set[0].joints() != cfg.model.joints {
            return Err(Error::dimension(format!(
                "train: dataset windows [{}, {}] do not match config [{}, {}]",
                set[0].frames(),
                set[0].joints(),
                cfg.model.frames,
                cfg.model.joints
            )));
        }
    }
    let threads = worker_threads();
    let root = RngStream::new(cfg.seed);
    let mut params = ModelParameters::init(&cfg.model, cfg.seed)?;
    let mut opt = Amsgrad::new();
    let mut log = RunLog::default();
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let lr = cfg.lr0 * cfg.lr_decay.powi(epoch as i32);
        let mut shuffle_rng = root.derive(0x5EED).derive(epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut sum_seq = 0.0;
        let mut sum_single = 0.0;
        let mut sum_total = 0.0;
        let mut batches = 0usize;
        for (batch_idx, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(
                &cfg.model,
                train_set,
                batch_indices,
                skel,
                cfg.flip_augment,
                cfg.seed,
                epoch,
                threads,
            )?;
            let mut tape = Tape::new();
            let mut drop_rng =
                root.derive(0xD201).derive(epoch as u64).derive(batch_idx as u64);
            let step = build_forward(
                &mut tape,
                &cfg.model,
                &params,
                &batch.inputs,
                ForwardOptions::training(),
                &mut drop_rng,
            )
            .and_then(|built| {
                attach_losses(&mut tape, &cfg.model, &built, &batch.gt_seq, &batch.gt_center)
                    .map(|loss| (built, loss))
            });
            let (built, loss) = match step {
                Ok(v) => v,
                Err(Error::Numeric { scope, detail }) => {
                    let diagnostic = format!(
                        "non-finite loss at epoch {epoch} batch {batch_idx} ({scope}: {detail}); training aborted"
                    );
                    log::error!("{diagnostic}");
                    let (best_epoch, best_params) = match best {
                        Some((_, e, p)) => (e, p),
                        None => (0, params),
                    };
                    return Ok(TrainOutcome {
                        params: best_params,
                        best_epoch,
                        log,
                        aborted: Some(diagnostic),
                    });
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(loss.total)?;
            opt.step(&mut params, &grads, lr)?;
            for (prefix, stats) in &built.stat_updates {
                params.update_running_stats(prefix, stats, BN_MOMENTUM)?;
            }
            sum_seq += loss.seq_scale;
            sum_single += loss.single_scale;
            sum_total += tape.value(loss.total).data()[0];
            batches += 1;
        }

        let report = evaluate(&cfg.model, &params, eval_set, skel, cfg.flip_eval)?;
        let entry = EpochLog {
            epoch,
            lr,
            loss_seq: sum_seq / batches as f64,
            loss_single: sum_single / batches as f64,
            loss_total: sum_total / batches as f64,
            eval_mpjpe: report.mpjpe,
            eval_p_mpjpe: report.p_mpjpe,
            eval_mpjve: report.mpjve,
            wall_secs: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.3} eval mpjpe {:.3} ({:.2}s)",
            entry.loss_total,
            entry.eval_mpjpe,
            entry.wall_secs
        );
        let is_better = best.as_ref().map(|(m, _, _)| report.mpjpe < *m).unwrap_or(true);
        if is_better {
            best = Some((report.mpjpe, epoch, params.clone()));
        }
        log.epochs.push(entry);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, best_epoch, log, aborted: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, CameraSpec, GenConfig, SkeletonSpec};

    fn toy_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                frames: 9,
                joints: 17,
                d_model: 16,
                d_hidden: 32,
                heads: 2,
                vte_layers: 1,
                ste_layers: 2,
                strides: vec![3, 3],
                ..ModelConfig::default()
            },
            epochs,
            batch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn toy_data(seed: u64, frames: usize) -> Vec<PoseSequenceSample> {
        let skel = SkeletonSpec::default_17();
        let cam = CameraSpec::default_front();
        let gen = GenConfig {
            seed,
            sequences: 2,
            frames_per_sequence: frames,
            window: 9,
            ..Default::default()
        };
        generate_dataset(&skel, &cam, &gen).unwrap()
    }

    #[test]
    fn loss_decreases_over_a_few_epochs() {
        let skel = SkeletonSpec::default_17();
        let data = toy_data(1, 24);
        let cfg = toy_train_config(5);
        let out = train(&cfg, &data, &data, &skel).unwrap();
        assert!(out.aborted.is_none());
        let first = out.log.epochs.first().unwrap().loss_total;
        let last = out.log.epochs.last().unwrap().loss_total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let skel = SkeletonSpec::default_17();
        let data = toy_data(2, 16);
        let cfg = toy_train_config(3);
        let a = train(&cfg, &data, &data, &skel).unwrap();
        let b = train(&cfg, &data, &data, &skel).unwrap();
        assert!(a.params.bits_eq(&b.params));
        assert_eq!(a.best_epoch, b.best_epoch);
        assert_eq!(a.log.to_csv(&cfg.model), b.log.to_csv(&cfg.model));
    }

    #[test]
    fn best_checkpoint_eval_reproduces_logged_numbers() {
        let skel = SkeletonSpec::default_17();
        let train_data = toy_data(3, 20);
        let eval_data = toy_data(4, 12);
        let cfg = toy_train_config(4);
        let out = train(&cfg, &train_data, &eval_data, &skel).unwrap();
        let report =
            evaluate(&cfg.model, &out.params, &eval_data, &skel, cfg.flip_eval).unwrap();
        let logged = &out.log.epochs[out.best_epoch];
        assert_eq!(report.mpjpe.to_bits(), logged.eval_mpjpe.to_bits());
        assert_eq!(report.p_mpjpe.to_bits(), logged.eval_p_mpjpe.to_bits());
        assert_eq!(report.mpjve.to_bits(), logged.eval_mpjve.to_bits());
    }

    #[test]
    fn mode_routing_trains_expected_terms() {
        let skel = SkeletonSpec::default_17();
        let data = toy_data(5, 12);
        // single: no sequence-scale term
        let mut cfg = toy_train_config(1);
        cfg.model.mode = PredictionScheme::Single;
        let out = train(&cfg, &data, &data, &skel).unwrap();
        assert_eq!(out.log.epochs[0].loss_seq, 0.0);
        assert!(out.log.epochs[0].loss_single > 0.0);

        // full-to-single: both
        let mut cfg = toy_train_config(1);
        cfg.model.mode = PredictionScheme::FullToSingle;
        let out = train(&cfg, &data, &data, &skel).unwrap();
        assert!(out.log.epochs[0].loss_seq > 0.0);
        assert!(out.log.epochs[0].loss_single > 0.0);

        // full-to-full: both heads at sequence scale
        let mut cfg = toy_train_config(1);
        cfg.model.mode = PredictionScheme::FullToFull;
        let out = train(&cfg, &data, &data, &skel).unwrap();
        assert!(out.log.epochs[0].loss_seq > 0.0);
        assert_eq!(out.log.epochs[0].loss_single, 0.0);

        // single-to-single: both heads at single scale
        let mut cfg = toy_train_config(1);
        cfg.model.mode = PredictionScheme::SingleToSingle;
        let out = train(&cfg, &data, &data, &skel).unwrap();
        assert_eq!(out.log.epochs[0].loss_seq, 0.0);
        assert!(out.log.epochs[0].loss_single > 0.0);
    }

    #[test]
    fn ablation_modes_reachable() {
        let skel = SkeletonSpec::default_17();
        let data = toy_data(6, 12);
        // no first stack
        let mut cfg = toy_train_config(1);
        cfg.model.vte_layers = 0;
        cfg.model.mode = PredictionScheme::Single;
        train(&cfg, &data, &data, &skel).unwrap();
        // no second stack
        let mut cfg = toy_train_config(1);
        cfg.model.ste_layers = 0;
        cfg.model.strides = vec![];
        cfg.model.mode = PredictionScheme::Full;
        train(&cfg, &data, &data, &skel).unwrap();
    }

    #[test]
    fn worker_threads_do_not_change_batches() {
        let skel = SkeletonSpec::default_17();
        let data = toy_data(7, 16);
        let cfg = toy_train_config(1).model;
        let indices: Vec<usize> = (0..12).collect();
        let a = assemble_batch(&cfg, &data, &indices, &skel, true, 9, 0, 1).unwrap();
        let b = assemble_batch(&cfg, &data, &indices, &skel, true, 9, 0, 3).unwrap();
        assert!(a.inputs.bits_eq(&b.inputs));
        assert!(a.gt_seq.bits_eq(&b.gt_seq));
        assert!(a.gt_center.bits_eq(&b.gt_center));
    }

    #[test]
    fn run_log_csv_has_expected_columns() {
        let log = RunLog {
            epochs: vec![EpochLog {
                epoch: 0,
                lr: 0.001,
                loss_seq: 100.0,
                loss_single: 10.0,
                loss_total: 110.0,
                eval_mpjpe: 50.0,
                eval_p_mpjpe: 40.0,
                eval_mpjve: 5.0,
                wall_secs: 1.0,
            }],
        };
        let cfg = ModelConfig::default();
        let csv = log.to_csv(&cfg);
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("epoch,lr,"));
        assert!(!header.contains("wall"), "wall time must stay out of the log");
        let row = lines.next().unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 10);
        // per-joint means: 100 / (27*17), 10 / 17
        let per_joint_seq: f64 = fields[5].parse().unwrap();
        assert!((per_joint_seq - 100.0 / 459.0).abs() < 1e-12);
    }
}
