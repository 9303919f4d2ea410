use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::conv_out_len;

/// Supervision scheme coupling the two regression heads to the loss.
///
/// `Full` and `FullToFull` replace the strided stack with plain
/// length-preserving encoder layers so the second head also emits a full
/// sequence; the remaining schemes keep the strided stack that collapses the
/// sequence to a single target token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionScheme {
    /// Sequence supervision on the final (plain) stack output only.
    Full,
    /// Target-frame supervision on the strided stack output only.
    Single,
    /// Sequence supervision on both stack outputs (second stack plain).
    FullToFull,
    /// Target-frame supervision on both heads (first head at its center frame).
    SingleToSingle,
    /// Sequence supervision on the first head, target-frame on the second.
    FullToSingle,
}

impl PredictionScheme {
    /// Whether the second stack shrinks the sequence with strided convolutions.
    pub fn second_stack_strided(self) -> bool {
        matches!(self, PredictionScheme::Single | PredictionScheme::SingleToSingle | PredictionScheme::FullToSingle)
    }
}

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Receptive field T: input frames per window (odd).
    pub frames: usize,
    /// Joints per pose J.
    pub joints: usize,
    /// Token width d_m.
    pub d_model: usize,
    /// Feed-forward hidden width d_f.
    pub d_hidden: usize,
    /// Attention heads h; per-head width is d_model / heads.
    pub heads: usize,
    /// Plain encoder layers N1.
    pub vte_layers: usize,
    /// Second-stack layers N2.
    pub ste_layers: usize,
    /// Kernel size of the expanding CFFN conv (k_f, width-1 in the default).
    pub kernel_expand: usize,
    /// Kernel size of the strided CFFN conv (k_m).
    pub kernel_reduce: usize,
    /// Stride of the expanding conv (fixed at 1).
    pub stride_expand: usize,
    /// Per-layer strides of the reducing conv; their ceil-division chain must
    /// map `frames` to exactly 1 when the second stack is strided.
    pub strides: Vec<usize>,
    /// Dropout probability used in the embedding and feed-forward blocks.
    pub dropout: f64,
    /// Weight of the sequence-scale loss term.
    pub loss_weight_seq: f64,
    /// Weight of the target-frame loss term.
    pub loss_weight_single: f64,
    pub mode: PredictionScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 27,
            joints: 17,
            d_model: 256,
            d_hidden: 512,
            heads: 8,
            vte_layers: 3,
            ste_layers: 3,
            kernel_expand: 1,
            kernel_reduce: 3,
            stride_expand: 1,
            strides: vec![3, 3, 3],
            dropout: 0.1,
            loss_weight_seq: 1.0,
            loss_weight_single: 1.0,
            mode: PredictionScheme::FullToSingle,
        }
    }
}

impl ModelConfig {
    /// Default architecture for one of the standard receptive fields,
    /// with its stride schedule.
    pub fn for_frames(frames: usize) -> Result<Self> {
        let strides = match frames {
            27 => vec![3, 3, 3],
            81 => vec![9, 3, 3],
            243 => vec![3, 9, 9],
            351 => vec![3, 9, 13],
            _ => {
                return Err(Error::config(format!(
                    "no stride schedule for {frames} frames; supported: 27, 81, 243, 351"
                )))
            }
        };
        Ok(ModelConfig { frames, strides, ..ModelConfig::default() })
    }

    /// 0-based index of the target (center) frame.
    pub fn target_frame(&self) -> usize {
        self.frames / 2
    }

    pub fn input_width(&self) -> usize {
        self.joints * 2
    }

    pub fn output_width(&self) -> usize {
        self.joints * 3
    }

    /// Sequence lengths through the second stack: the input length followed
    /// by the length after each layer. Plain second stacks preserve length.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.frames];
        let mut t = self.frames;
        for n in 0..self.ste_layers {
            if self.mode.second_stack_strided() {
                t = conv_out_len(t, self.strides[n]);
            }
            lens.push(t);
        }
        lens
    }

    /// Per-mode effective weights for the (first-head, second-head) loss terms.
    pub fn effective_loss_weights(&self) -> (f64, f64) {
        if self.ste_layers == 0 {
            // single-stack ablation: only the sequence head exists
            return (self.loss_weight_seq, 0.0);
        }
        match self.mode {
            PredictionScheme::Full => (0.0, self.loss_weight_seq),
            PredictionScheme::Single => (0.0, self.loss_weight_single),
            _ => (self.loss_weight_seq, self.loss_weight_single),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames % 2 == 0 {
            return Err(Error::config(format!(
                "frames must be odd and positive for a well-defined center frame, got {}",
                self.frames
            )));
        }
        if self.joints == 0 {
            return Err(Error::config("joints must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_hidden == 0 {
            return Err(Error::config("d_hidden must be positive"));
        }
        if self.kernel_expand % 2 == 0 || self.kernel_reduce % 2 == 0 {
            return Err(Error::config(format!(
                "kernel sizes must be odd, got ({}, {})",
                self.kernel_expand, self.kernel_reduce
            )));
        }
        if self.stride_expand != 1 {
            return Err(Error::config(format!(
                "the expanding conv stride is fixed at 1, got {}",
                self.stride_expand
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.loss_weight_seq < 0.0 || self.loss_weight_single < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.strides.len() != self.ste_layers {
            return Err(Error::config(format!(
                "strides length {} must equal ste_layers {}",
                self.strides.len(),
                self.ste_layers
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("strides must be >= 1"));
        }
        if self.ste_layers > 0 && self.mode.second_stack_strided() {
            let end = *self.stage_lengths().last().unwrap();
            if end != 1 {
                return Err(Error::config(format!(
                    "stride schedule {:?} maps {} frames to {end}, not 1",
                    self.strides, self.frames
                )));
            }
        }
        if self.vte_layers == 0 && self.mode != PredictionScheme::Single {
            return Err(Error::config(
                "removing the first stack (vte_layers = 0) requires mode \"single\"",
            ));
        }
        if self.ste_layers == 0 && self.mode != PredictionScheme::Full {
            return Err(Error::config(
                "removing the second stack (ste_layers = 0) requires mode \"full\"",
            ));
        }
        let (w1, w2) = self.effective_loss_weights();
        if w1 <= 0.0 && w2 <= 0.0 {
            return Err(Error::config("all effective loss weights are zero"));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(json)
            .map_err(|e| Error::config(format!("invalid model config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn presets_cover_paper_receptive_fields() {
        for (frames, expect) in [
            (27, vec![27, 9, 3, 1]),
            (81, vec![81, 9, 3, 1]),
            (243, vec![243, 81, 9, 1]),
            (351, vec![351, 117, 13, 1]),
        ] {
            let cfg = ModelConfig::for_frames(frames).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.stage_lengths(), expect);
        }
        assert!(ModelConfig::for_frames(100).is_err());
    }

    #[test]
    fn schedule_not_reaching_one_rejected() {
        let cfg = ModelConfig { strides: vec![3, 3, 1], ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = ModelConfig { d_model: 250, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = ModelConfig { kernel_reduce: 4, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ablation_mode_coupling() {
        let no_vte = ModelConfig {
            vte_layers: 0,
            mode: PredictionScheme::Single,
            ..ModelConfig::default()
        };
        no_vte.validate().unwrap();
        let bad = ModelConfig { vte_layers: 0, ..ModelConfig::default() };
        assert!(bad.validate().is_err());

        let no_ste = ModelConfig {
            ste_layers: 0,
            strides: vec![],
            mode: PredictionScheme::Full,
            ..ModelConfig::default()
        };
        no_ste.validate().unwrap();
        let bad = ModelConfig { ste_layers: 0, strides: vec![], ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_rejected() {
        let cfg = ModelConfig {
            loss_weight_seq: 0.0,
            loss_weight_single: 0.0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_mirrors_field_names() {
        let cfg = ModelConfig::default();
        let json = cfg.to_json();
        for key in [
            "frames",
            "joints",
            "d_model",
            "d_hidden",
            "heads",
            "vte_layers",
            "ste_layers",
            "kernel_expand",
            "kernel_reduce",
            "stride_expand",
            "strides",
            "dropout",
            "loss_weight_seq",
            "loss_weight_single",
            "mode",
        ] {
            assert!(json.contains(&format!("\"{key}\"")), "missing key {key}");
        }
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
        // partial JSON falls back to defaults
        let partial = ModelConfig::from_json(r#"{"frames": 81, "strides": [9,3,3]}"#).unwrap();
        assert_eq!(partial.frames, 81);
        assert_eq!(partial.d_model, 256);
    }

    #[test]
    fn plain_second_stack_preserves_length() {
        let cfg = ModelConfig { mode: PredictionScheme::FullToFull, ..ModelConfig::default() };
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_lengths(), vec![27, 27, 27, 27]);
    }
}
