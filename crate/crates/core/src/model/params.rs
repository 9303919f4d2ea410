use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::rng::RngStream;
use crate::tape::BatchStats;

use super::config::ModelConfig;

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); used for weights and biases.
    UniformFanIn(usize),
    /// N(0, 0.02^2); used for position tables.
    PositionTable,
    Zeros,
    Ones,
}

/// One named array in the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub grid: ValueGrid,
    pub trainable: bool,
}

/// Every learnable array plus batch-norm running statistics, keyed by a
/// stable path string. The path set is a function of the config alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters {
    entries: BTreeMap<String, ParamEntry>,
}

fn norm_specs(prefix: &str, width: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        path: format!("{prefix}.gain"),
        shape: vec![width],
        init: InitKind::Ones,
        trainable: true,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.shift"),
        shape: vec![width],
        init: InitKind::Zeros,
        trainable: true,
    });
}

fn batch_norm_specs(prefix: &str, width: usize, out: &mut Vec<ParamSpec>) {
    norm_specs(prefix, width, out);
    out.push(ParamSpec {
        path: format!("{prefix}.running_mean"),
        shape: vec![width],
        init: InitKind::Zeros,
        trainable: false,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.running_var"),
        shape: vec![width],
        init: InitKind::Ones,
        trainable: false,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.batches"),
        shape: vec![1],
        init: InitKind::Zeros,
        trainable: false,
    });
}

fn linear_specs(prefix: &str, din: usize, dout: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        path: format!("{prefix}.w"),
        shape: vec![din, dout],
        init: InitKind::UniformFanIn(din),
        trainable: true,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.b"),
        shape: vec![dout],
        init: InitKind::UniformFanIn(din),
        trainable: true,
    });
}

fn conv_specs(prefix: &str, k: usize, din: usize, dout: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        path: format!("{prefix}.w"),
        shape: vec![k, din, dout],
        init: InitKind::UniformFanIn(k * din),
        trainable: true,
    });
    out.push(ParamSpec {
        path: format!("{prefix}.b"),
        shape: vec![dout],
        init: InitKind::UniformFanIn(k * din),
        trainable: true,
    });
}

fn attention_specs(prefix: &str, d_model: usize, out: &mut Vec<ParamSpec>) {
    for name in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            path: format!("{prefix}.{name}"),
            shape: vec![d_model, d_model],
            init: InitKind::UniformFanIn(d_model),
            trainable: true,
        });
        out.push(ParamSpec {
            path: format!("{prefix}.{}", name.replace('w', "b")),
            shape: vec![d_model],
            init: InitKind::UniformFanIn(d_model),
            trainable: true,
        });
    }
}

fn plain_layer_specs(prefix: &str, cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    norm_specs(&format!("{prefix}.ln1"), cfg.d_model, out);
    attention_specs(&format!("{prefix}.msa"), cfg.d_model, out);
    norm_specs(&format!("{prefix}.ln2"), cfg.d_model, out);
    linear_specs(&format!("{prefix}.ffn.fc1"), cfg.d_model, cfg.d_hidden, out);
    linear_specs(&format!("{prefix}.ffn.fc2"), cfg.d_hidden, cfg.d_model, out);
}

fn strided_layer_specs(prefix: &str, in_len: usize, cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        path: format!("{prefix}.pos"),
        shape: vec![in_len, cfg.d_model],
        init: InitKind::PositionTable,
        trainable: true,
    });
    norm_specs(&format!("{prefix}.ln1"), cfg.d_model, out);
    attention_specs(&format!("{prefix}.msa"), cfg.d_model, out);
    norm_specs(&format!("{prefix}.ln2"), cfg.d_model, out);
    conv_specs(&format!("{prefix}.cffn.conv1"), cfg.kernel_expand, cfg.d_model, cfg.d_hidden, out);
    conv_specs(&format!("{prefix}.cffn.conv2"), cfg.kernel_reduce, cfg.d_hidden, cfg.d_model, out);
}

fn head_specs(prefix: &str, cfg: &ModelConfig, out: &mut Vec<ParamSpec>) {
    batch_norm_specs(&format!("{prefix}.bn"), cfg.d_model, out);
    linear_specs(&format!("{prefix}.proj"), cfg.d_model, cfg.output_width(), out);
}

/// The full parameter layout for a config, sorted by path.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    linear_specs("embed.proj", cfg.input_width(), cfg.d_model, &mut specs);
    batch_norm_specs("embed.bn", cfg.d_model, &mut specs);
    specs.push(ParamSpec {
        path: "pos.e1".to_string(),
        shape: vec![cfg.frames, cfg.d_model],
        init: InitKind::PositionTable,
        trainable: true,
    });
    for n in 0..cfg.vte_layers {
        plain_layer_specs(&format!("vte.{n}"), cfg, &mut specs);
    }
    if cfg.ste_layers > 0 {
        if cfg.mode.second_stack_strided() {
            let lens = cfg.stage_lengths();
            for n in 0..cfg.ste_layers {
                strided_layer_specs(&format!("ste.{n}"), lens[n], cfg, &mut specs);
            }
        } else {
            // plain second stack: more encoder layers continuing the index
            for n in 0..cfg.ste_layers {
                plain_layer_specs(&format!("vte.{}", cfg.vte_layers + n), cfg, &mut specs);
            }
        }
        head_specs("head_target", cfg, &mut specs);
    }
    head_specs("head_seq", cfg, &mut specs);
    specs.sort_by(|a, b| a.path.cmp(&b.path));
    specs
}

impl ModelParameters {
    /// Deterministic initialization: each array is drawn from a substream
    /// derived from the seed and its own path, so a given (config, seed)
    /// always produces identical bytes.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(seed);
        let mut entries = BTreeMap::new();
        for spec in param_specs(cfg) {
            let mut rng = root.derive(crate::hash::fnv1a64(spec.path.as_bytes()));
            let grid = match spec.init {
                InitKind::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    ValueGrid::from_fn(&spec.shape, |_| rng.uniform_in(-bound, bound))
                }
                InitKind::PositionTable => {
                    ValueGrid::from_fn(&spec.shape, |_| rng.normal_scaled(0.0, 0.02))
                }
                InitKind::Zeros => ValueGrid::zeros(&spec.shape),
                InitKind::Ones => ValueGrid::full(&spec.shape, 1.0),
            };
            entries.insert(spec.path, ParamEntry { grid, trainable: spec.trainable });
        }
        Ok(ModelParameters { entries })
    }

    pub fn from_entries(entries: BTreeMap<String, ParamEntry>) -> Self {
        ModelParameters { entries }
    }

    pub fn get(&self, path: &str) -> Result<&ValueGrid> {
        self.entries
            .get(path)
            .map(|e| &e.grid)
            .ok_or_else(|| Error::Internal(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut ValueGrid> {
        self.entries
            .get_mut(path)
            .map(|e| &mut e.grid)
            .ok_or_else(|| Error::Internal(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over trainable entries (running statistics are
    /// bookkeeping, not parameters).
    pub fn trainable_value_count(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.grid.len()).sum()
    }

    /// Fold train-mode batch statistics into the running estimates stored
    /// under `<prefix>.running_mean` / `.running_var`, and bump the counter.
    pub fn update_running_stats(
        &mut self,
        prefix: &str,
        stats: &BatchStats,
        momentum: f64,
    ) -> Result<()> {
        let mean = self.get_mut(&format!("{prefix}.running_mean"))?;
        for (m, b) in mean.data_mut().iter_mut().zip(&stats.mean) {
            *m = (1.0 - momentum) * *m + momentum * b;
        }
        let var = self.get_mut(&format!("{prefix}.running_var"))?;
        for (v, b) in var.data_mut().iter_mut().zip(&stats.var) {
            *v = (1.0 - momentum) * *v + momentum * b;
        }
        let count = self.get_mut(&format!("{prefix}.batches"))?;
        count.data_mut()[0] += 1.0;
        Ok(())
    }

    /// Exact bit-level equality of every entry.
    pub fn bits_eq(&self, other: &ModelParameters) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(path, e)| {
                other
                    .entries
                    .get(path)
                    .map(|o| o.trainable == e.trainable && o.grid.bits_eq(&e.grid))
                    .unwrap_or(false)
            })
    }

    /// Check that the stored paths and shapes match a config's layout.
    pub fn matches_config(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.entries.len() {
            return Err(Error::config(format!(
                "parameter set has {} entries, config expects {}",
                self.entries.len(),
                specs.len()
            )));
        }
        for spec in &specs {
            let entry = self
                .entries
                .get(&spec.path)
                .ok_or_else(|| Error::config(format!("missing parameter {}", spec.path)))?;
            if entry.grid.shape() != spec.shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    spec.path,
                    entry.grid.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}
