use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::rng::RngStream;
use crate::tape::{BatchStats, NodeId, Tape};
use crate::{BN_MOMENTUM, EPS_NORM};

use super::config::ModelConfig;
use super::params::ModelParameters;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Keep per-layer attention maps in the output for inspection/export.
    pub retain_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions { train: false, retain_attention: false }
    }

    pub fn training() -> Self {
        ForwardOptions { train: true, retain_attention: false }
    }
}

/// Attention weights of one layer, exactly as used in the forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Layer label, e.g. "vte.0" or "ste.2".
    pub module: String,
    pub heads: usize,
    pub seq_len: usize,
    /// [batch * heads, L, L]; rows sum to 1.
    pub maps: ValueGrid,
}

/// Tape handles produced by one forward build; the trainer attaches losses
/// to the head nodes on the same tape.
pub struct BuiltForward {
    pub batch: usize,
    /// Sequence head on the first stack output: [batch * frames, 3J].
    pub seq_head: NodeId,
    /// Second-stack head: [batch * seq2_len, 3J]; absent with no second stack.
    pub target_head: Option<NodeId>,
    /// Output length of the second stack (1 when strided down to one token).
    pub seq2_len: usize,
    pub attention: Vec<AttentionRecord>,
    /// Batch-norm statistics to fold into running estimates after a train step.
    pub stat_updates: Vec<(String, BatchStats)>,
}

/// Detached forward results.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Full-sequence prediction: [T, J, 3] or [B, T, J, 3].
    pub seq3d: ValueGrid,
    /// Target-frame prediction: [J, 3] or [B, J, 3].
    pub target3d: ValueGrid,
    pub attention: Vec<AttentionRecord>,
}

struct NetBuilder<'a> {
    tape: &'a mut Tape,
    cfg: &'a ModelConfig,
    params: &'a ModelParameters,
    opts: ForwardOptions,
    rng: &'a mut RngStream,
    leaves: HashMap<String, NodeId>,
    attention: Vec<AttentionRecord>,
    stat_updates: Vec<(String, BatchStats)>,
}

impl<'a> NetBuilder<'a> {
    fn p(&mut self, path: &str) -> Result<NodeId> {
        if let Some(id) = self.leaves.get(path) {
            return Ok(*id);
        }
        let entry = self
            .params
            .entry(path)
            .ok_or_else(|| Error::Internal(format!("missing parameter {path}")))?;
        let id = if entry.trainable {
            self.tape.param(path, entry.grid.clone())
        } else {
            self.tape.leaf(entry.grid.clone())
        };
        self.leaves.insert(path.to_string(), id);
        Ok(id)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.p(&format!("{prefix}.gain"))?;
        let shift = self.p(&format!("{prefix}.shift"))?;
        self.tape.layer_norm(x, gain, shift, EPS_NORM)
    }

    fn batch_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.p(&format!("{prefix}.gain"))?;
        let shift = self.p(&format!("{prefix}.shift"))?;
        if self.opts.train {
            let (id, stats) = self.tape.batch_norm_train(x, gain, shift, EPS_NORM)?;
            self.stat_updates.push((prefix.to_string(), stats));
            Ok(id)
        } else {
            if self.params.get(&format!("{prefix}.batches"))?.data()[0] == 0.0 {
                log::warn!(
                    "batch norm {prefix} evaluated before any running-stat update; using init stats"
                );
            }
            let mean = self.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
            let var = self.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
            self.tape.batch_norm_eval(x, gain, shift, &mean, &var, EPS_NORM)
        }
    }

    fn linear(&mut self, x: NodeId, wpath: &str, bpath: &str) -> Result<NodeId> {
        let w = self.p(wpath)?;
        let b = self.p(bpath)?;
        self.tape.linear(x, w, b)
    }

    fn conv(&mut self, x: NodeId, prefix: &str, stride: usize, seq_len: usize) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.conv1d(x, w, b, stride, seq_len)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.dropout(x, self.cfg.dropout, self.rng, self.opts.train)
    }

    /// z + W_O * MSA(LN(z)) with the layer's fused head projections.
    fn attention_block(&mut self, z: NodeId, prefix: &str, seq_len: usize) -> Result<NodeId> {
        let normed = self.layer_norm(z, &format!("{prefix}.ln1"))?;
        let q = self.linear(normed, &format!("{prefix}.msa.wq"), &format!("{prefix}.msa.bq"))?;
        let k = self.linear(normed, &format!("{prefix}.msa.wk"), &format!("{prefix}.msa.bk"))?;
        let v = self.linear(normed, &format!("{prefix}.msa.wv"), &format!("{prefix}.msa.bv"))?;
        let (heads_out, maps) = self.tape.msa(q, k, v, self.cfg.heads, seq_len)?;
        if self.opts.retain_attention {
            self.attention.push(AttentionRecord {
                module: prefix.to_string(),
                heads: self.cfg.heads,
                seq_len,
                maps,
            });
        }
        let projected =
            self.linear(heads_out, &format!("{prefix}.msa.wo"), &format!("{prefix}.msa.bo"))?;
        self.tape.add(z, projected)
    }

    /// Length-preserving encoder layer: attention block, then a two-layer
    /// feed-forward residual branch.
    fn plain_layer(&mut self, z: NodeId, prefix: &str, seq_len: usize) -> Result<NodeId> {
        let attended = self.attention_block(z, prefix, seq_len)?;
        let normed = self.layer_norm(attended, &format!("{prefix}.ln2"))?;
        let hidden = self.linear(normed, &format!("{prefix}.ffn.fc1.w"), &format!("{prefix}.ffn.fc1.b"))?;
        let hidden = self.tape.relu(hidden)?;
        let hidden = self.dropout(hidden)?;
        let out = self.linear(hidden, &format!("{prefix}.ffn.fc2.w"), &format!("{prefix}.ffn.fc2.b"))?;
        self.tape.add(attended, out)
    }

    /// Strided encoder layer: per-layer position table, attention block, then
    /// a convolutional feed-forward branch whose strided conv shrinks the
    /// sequence; a max-pooled residual matches the new length.
    fn strided_layer(
        &mut self,
        z: NodeId,
        prefix: &str,
        seq_len: usize,
        stride: usize,
    ) -> Result<(NodeId, usize)> {
        let table = self.p(&format!("{prefix}.pos"))?;
        let z = self.tape.add_seq(z, table, seq_len)?;
        let attended = self.attention_block(z, prefix, seq_len)?;
        let normed = self.layer_norm(attended, &format!("{prefix}.ln2"))?;
        let hidden =
            self.conv(normed, &format!("{prefix}.cffn.conv1"), self.cfg.stride_expand, seq_len)?;
        let hidden = self.tape.relu(hidden)?;
        let hidden = self.dropout(hidden)?;
        let reduced = self.conv(hidden, &format!("{prefix}.cffn.conv2"), stride, seq_len)?;
        let pooled = self.tape.max_pool1d(attended, stride, seq_len)?;
        let out = self.tape.add(pooled, reduced)?;
        Ok((out, crate::tape::conv_out_len(seq_len, stride)))
    }

    /// Batch norm then a width-1 projection to J*3 channels.
    fn head(&mut self, z: NodeId, prefix: &str) -> Result<NodeId> {
        let normed = self.batch_norm(z, &format!("{prefix}.bn"))?;
        self.linear(normed, &format!("{prefix}.proj.w"), &format!("{prefix}.proj.b"))
    }
}

/// Record the full network onto `tape`. The input is [B, T, J, 2] or
/// [T, J, 2]; activations flow as [B*T, channels] grids.
pub fn build_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParameters,
    input: &ValueGrid,
    opts: ForwardOptions,
    rng: &mut RngStream,
) -> Result<BuiltForward> {
    cfg.validate()?;
    params.matches_config(cfg)?;
    let batch = match input.shape() {
        [t, j, c] if *t == cfg.frames && *j == cfg.joints && *c == 2 => 1,
        [b, t, j, c] if *t == cfg.frames && *j == cfg.joints && *c == 2 => *b,
        other => {
            return Err(Error::dimension(format!(
                "input must be [T={}, J={}, 2] or [B, T, J, 2], got {other:?}",
                cfg.frames, cfg.joints
            )))
        }
    };
    input.ensure_finite("input")?;

    let mut b = NetBuilder {
        tape,
        cfg,
        params,
        opts,
        rng,
        leaves: HashMap::new(),
        attention: Vec::new(),
        stat_updates: Vec::new(),
    };

    // pose embedding: flatten joints, project, batch norm, dropout, relu
    b.tape.set_scope("embed");
    let flat = b.tape.leaf(input.reshaped(vec![batch * cfg.frames, cfg.input_width()])?);
    let projected = b.linear(flat, "embed.proj.w", "embed.proj.b")?;
    let normed = b.batch_norm(projected, "embed.bn")?;
    let dropped = b.dropout(normed)?;
    let embedded = b.tape.relu(dropped)?;

    // first-stack position table, then the plain encoder layers
    b.tape.set_scope("pos");
    let e1 = b.p("pos.e1")?;
    let mut z = b.tape.add_seq(embedded, e1, cfg.frames)?;
    for n in 0..cfg.vte_layers {
        let prefix = format!("vte.{n}");
        b.tape.set_scope(&prefix);
        z = b.plain_layer(z, &prefix, cfg.frames)?;
    }
    let stack1_out = z;

    b.tape.set_scope("head_seq");
    let seq_head = b.head(stack1_out, "head_seq")?;

    let (target_head, seq2_len) = if cfg.ste_layers == 0 {
        (None, cfg.frames)
    } else {
        let mut z2 = stack1_out;
        let mut len = cfg.frames;
        if cfg.mode.second_stack_strided() {
            for n in 0..cfg.ste_layers {
                let prefix = format!("ste.{n}");
                b.tape.set_scope(&prefix);
                let (next, next_len) = b.strided_layer(z2, &prefix, len, cfg.strides[n])?;
                z2 = next;
                len = next_len;
            }
        } else {
            for n in 0..cfg.ste_layers {
                let prefix = format!("vte.{}", cfg.vte_layers + n);
                b.tape.set_scope(&prefix);
                z2 = b.plain_layer(z2, &prefix, len)?;
            }
        }
        b.tape.set_scope("head_target");
        (Some(b.head(z2, "head_target")?), len)
    };

    b.tape.set_scope("");
    Ok(BuiltForward {
        batch,
        seq_head,
        target_head,
        seq2_len,
        attention: b.attention,
        stat_updates: b.stat_updates,
    })
}

fn detach_output(
    tape: &Tape,
    cfg: &ModelConfig,
    built: &BuiltForward,
    batched_input: bool,
) -> Result<ForwardOutput> {
    let bsz = built.batch;
    let (t, j) = (cfg.frames, cfg.joints);
    let seq3d = tape.value(built.seq_head).reshaped(if batched_input {
        vec![bsz, t, j, 3]
    } else {
        vec![t, j, 3]
    })?;

    // target prediction: the strided head's single token, the center frame of
    // a plain second stack, or the center frame of the sequence head.
    let mid = cfg.target_frame();
    let width = cfg.output_width();
    let mut target = vec![0.0; bsz * width];
    match built.target_head {
        Some(id) => {
            let grid = tape.value(id);
            if built.seq2_len == 1 {
                target.copy_from_slice(grid.data());
            } else {
                for s in 0..bsz {
                    let row = s * built.seq2_len + mid;
                    target[s * width..(s + 1) * width]
                        .copy_from_slice(&grid.data()[row * width..(row + 1) * width]);
                }
            }
        }
        None => {
            let grid = tape.value(built.seq_head);
            for s in 0..bsz {
                let row = s * t + mid;
                target[s * width..(s + 1) * width]
                    .copy_from_slice(&grid.data()[row * width..(row + 1) * width]);
            }
        }
    }
    let target3d = ValueGrid::new(
        if batched_input { vec![bsz, j, 3] } else { vec![j, 3] },
        target,
    )?;
    Ok(ForwardOutput { seq3d, target3d, attention: built.attention.clone() })
}

/// Run the network. In train mode the batch-norm running statistics in
/// `params` are updated; in eval mode `params` is left untouched and the
/// outputs are a pure function of (params, input).
pub fn forward(
    cfg: &ModelConfig,
    params: &mut ModelParameters,
    input: &ValueGrid,
    opts: ForwardOptions,
    rng: &mut RngStream,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let built = build_forward(&mut tape, cfg, params, input, opts, rng)?;
    let out = detach_output(&tape, cfg, &built, input.rank() == 4)?;
    if opts.train {
        for (prefix, stats) in &built.stat_updates {
            params.update_running_stats(prefix, stats, BN_MOMENTUM)?;
        }
    }
    Ok(out)
}

/// Eval-mode forward without mutable access; a pure function of its inputs.
pub fn forward_eval(
    cfg: &ModelConfig,
    params: &ModelParameters,
    input: &ValueGrid,
    retain_attention: bool,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let mut rng = RngStream::new(0); // eval draws nothing
    let opts = ForwardOptions { train: false, retain_attention };
    let built = build_forward(&mut tape, cfg, params, input, opts, &mut rng)?;
    detach_output(&tape, cfg, &built, input.rank() == 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::PredictionScheme;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 1,
            strides: vec![9],
            ..ModelConfig::default()
        }
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> ValueGrid {
        let mut rng = RngStream::new(seed);
        ValueGrid::from_fn(&[cfg.frames, cfg.joints, 2], |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn default_config_shapes_match_figure_schedule() {
        let cfg = ModelConfig { d_model: 32, d_hidden: 64, heads: 4, ..ModelConfig::default() };
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let input = random_input(&cfg, 2);
        let out = forward_eval(&cfg, &params, &input, true).unwrap();
        assert_eq!(out.seq3d.shape(), &[27, 17, 3]);
        assert_eq!(out.target3d.shape(), &[17, 3]);
        // attention lengths walk the stage schedule 27 -> 9 -> 3 (inputs to each layer)
        let ste_lens: Vec<usize> = out
            .attention
            .iter()
            .filter(|r| r.module.starts_with("ste."))
            .map(|r| r.seq_len)
            .collect();
        assert_eq!(ste_lens, vec![27, 9, 3]);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let cfg = toy_config();
        let params = ModelParameters::init(&cfg, 3).unwrap();
        let input = random_input(&cfg, 4);
        let a = forward_eval(&cfg, &params, &input, false).unwrap();
        let b = forward_eval(&cfg, &params, &input, false).unwrap();
        assert!(a.seq3d.bits_eq(&b.seq3d));
        assert!(a.target3d.bits_eq(&b.target3d));
    }

    #[test]
    fn batched_input_matches_per_sample_eval() {
        let cfg = toy_config();
        let mut params = ModelParameters::init(&cfg, 5).unwrap();
        // push a few train steps through batch norm so eval stats are not init
        let mut rng = RngStream::new(9);
        for step in 0..3 {
            let batch = ValueGrid::from_fn(&[4, cfg.frames, cfg.joints, 2], |_| {
                rng.uniform_in(-1.0, 1.0)
            });
            let mut drop_rng = RngStream::new(step);
            forward(&cfg, &mut params, &batch, ForwardOptions::training(), &mut drop_rng).unwrap();
        }
        let a = random_input(&cfg, 11);
        let b = random_input(&cfg, 12);
        let mut stacked = Vec::new();
        stacked.extend_from_slice(a.data());
        stacked.extend_from_slice(b.data());
        let batch = ValueGrid::new(vec![2, cfg.frames, cfg.joints, 2], stacked).unwrap();
        let joint = forward_eval(&cfg, &params, &batch, false).unwrap();
        let solo_a = forward_eval(&cfg, &params, &a, false).unwrap();
        let solo_b = forward_eval(&cfg, &params, &b, false).unwrap();
        assert_eq!(joint.target3d.shape(), &[2, 5, 3]);
        let width = 15;
        assert!(joint.target3d.data()[..width]
            .iter()
            .zip(solo_a.target3d.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(joint.target3d.data()[width..]
            .iter()
            .zip(solo_b.target3d.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn no_second_stack_uses_center_frame() {
        let cfg = ModelConfig {
            ste_layers: 0,
            strides: vec![],
            mode: PredictionScheme::Full,
            ..toy_config()
        };
        let params = ModelParameters::init(&cfg, 6).unwrap();
        let input = random_input(&cfg, 7);
        let out = forward_eval(&cfg, &params, &input, false).unwrap();
        let mid = cfg.target_frame();
        let width = cfg.output_width();
        let center = &out.seq3d.data()[mid * width..(mid + 1) * width];
        assert_eq!(out.target3d.data(), center);
    }

    #[test]
    fn no_first_stack_consumes_embedded_input_directly() {
        let cfg = ModelConfig {
            vte_layers: 0,
            mode: PredictionScheme::Single,
            ..toy_config()
        };
        let params = ModelParameters::init(&cfg, 8).unwrap();
        let input = random_input(&cfg, 9);
        let out = forward_eval(&cfg, &params, &input, true).unwrap();
        assert_eq!(out.target3d.shape(), &[5, 3]);
        assert!(out.attention.iter().all(|r| r.module.starts_with("ste.")));
    }

    #[test]
    fn zeroed_residual_projections_leave_predictions_to_heads() {
        // zero every residual-branch output projection; changing attention or
        // ffn input weights must then leave the outputs unchanged, while
        // changing a head weight must not.
        let cfg = toy_config();
        let mut params = ModelParameters::init(&cfg, 10).unwrap();
        for (path, entry) in params.iter_mut() {
            if path.ends_with("msa.wo")
                || path.ends_with("msa.bo")
                || path.contains("ffn.fc2")
                || path.contains("cffn.conv2")
            {
                entry.grid.data_mut().fill(0.0);
            }
        }
        let input = random_input(&cfg, 11);
        let base = forward_eval(&cfg, &params, &input, false).unwrap();

        let mut tweaked = params.clone();
        tweaked.get_mut("vte.0.msa.wq").unwrap().data_mut()[0] += 10.0;
        tweaked.get_mut("vte.0.ffn.fc1.w").unwrap().data_mut()[0] += 10.0;
        tweaked.get_mut("ste.0.cffn.conv1.w").unwrap().data_mut()[0] += 10.0;
        let same = forward_eval(&cfg, &tweaked, &input, false).unwrap();
        assert!(base.seq3d.bits_eq(&same.seq3d));
        assert!(base.target3d.bits_eq(&same.target3d));

        let mut head_tweaked = params.clone();
        head_tweaked.get_mut("head_target.proj.b").unwrap().data_mut()[0] += 1.0;
        let differs = forward_eval(&cfg, &head_tweaked, &input, false).unwrap();
        assert!(base.target3d.max_abs_diff(&differs.target3d) > 0.5);
    }

    #[test]
    fn position_tables_break_time_reversal_equivariance() {
        let cfg = toy_config();
        let mut params = ModelParameters::init(&cfg, 12).unwrap();
        let input = random_input(&cfg, 13);
        let mut reversed = ValueGrid::zeros(input.shape());
        let width = cfg.joints * 2;
        for t in 0..cfg.frames {
            reversed.data_mut()[t * width..(t + 1) * width]
                .copy_from_slice(&input.data()[(cfg.frames - 1 - t) * width..(cfg.frames - t) * width]);
        }

        // with tables zeroed, the first stack (attention + row-wise maps) is
        // reversal-equivariant, so the sequence head output reverses with the input
        let mut no_tables = params.clone();
        for (path, entry) in no_tables.iter_mut() {
            if path == "pos.e1" || path.ends_with(".pos") {
                entry.grid.data_mut().fill(0.0);
            }
        }
        let fwd = forward_eval(&cfg, &no_tables, &input, false).unwrap();
        let bwd = forward_eval(&cfg, &no_tables, &reversed, false).unwrap();
        let w3 = cfg.output_width();
        let mut worst = 0.0f64;
        for t in 0..cfg.frames {
            let a = &fwd.seq3d.data()[t * w3..(t + 1) * w3];
            let b = &bwd.seq3d.data()[(cfg.frames - 1 - t) * w3..(cfg.frames - t) * w3];
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-9, "equivariance violated without tables: {worst}");

        // with the learned tables restored, equivariance must break
        params.get_mut("pos.e1").unwrap().data_mut()[0] += 0.5;
        let fwd = forward_eval(&cfg, &params, &input, false).unwrap();
        let bwd = forward_eval(&cfg, &params, &reversed, false).unwrap();
        let mut worst = 0.0f64;
        for t in 0..cfg.frames {
            let a = &fwd.seq3d.data()[t * w3..(t + 1) * w3];
            let b = &bwd.seq3d.data()[(cfg.frames - 1 - t) * w3..(cfg.frames - t) * w3];
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst > 1e-6, "tables should break equivariance");
    }

    #[test]
    fn nan_input_rejected() {
        let cfg = toy_config();
        let params = ModelParameters::init(&cfg, 1).unwrap();
        let mut input = random_input(&cfg, 1);
        input.data_mut()[3] = f64::NAN;
        assert!(matches!(
            forward_eval(&cfg, &params, &input, false),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_embeds_to_zero() {
        let cfg = toy_config();
        let mut params = ModelParameters::init(&cfg, 2).unwrap();
        params.get_mut("embed.proj.b").unwrap().data_mut().fill(0.0);
        // isolate the embedding by zeroing residual outputs and head params
        for (path, entry) in params.iter_mut() {
            if path.ends_with("msa.wo")
                || path.ends_with("msa.bo")
                || path.contains("ffn.fc2")
                || path.contains("cffn.conv2")
                || path.starts_with("head_")
                || path == "pos.e1"
                || path.ends_with(".pos")
            {
                entry.grid.data_mut().fill(0.0);
            }
        }
        let input = ValueGrid::zeros(&[cfg.frames, cfg.joints, 2]);
        let out = forward_eval(&cfg, &params, &input, false).unwrap();
        assert!(out.seq3d.data().iter().all(|&v| v == 0.0));
        assert!(out.target3d.data().iter().all(|&v| v == 0.0));
    }
}
