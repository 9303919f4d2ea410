//! Analytic multiply-accumulate counts for the two encoder stacks, the
//! compression ratio between them, parameter counting, and an instrumented
//! counter that validates the closed forms against the real forward pass.
//!
//! Counting convention: 1 MAC = 1 FLOP. Counted work is the attention
//! projections, the attention score/value products, and the feed-forward
//! linears/convolutions; normalizations, softmax exponentials, and bias adds
//! are excluded.

use std::collections::BTreeMap;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::error::Result;
use crate::grid::ValueGrid;
use crate::model::{build_forward, param_specs, ForwardOptions, ModelConfig, ModelParameters};
use crate::rng::RngStream;
use crate::tape::Tape;

type Rat = Ratio<i128>;

fn rat(n: i128) -> Rat {
    Ratio::from_integer(n)
}

/// Per-layer MACs of a plain encoder layer at sequence length `t`, width `d`
/// (hidden width 2d): 8td^2 + 2t^2 d.
pub fn flops_vte_layer(t: u64, d: u64) -> u128 {
    let (t, d) = (t as u128, d as u128);
    8 * t * d * d + 2 * t * t * d
}

/// Whole-stack MACs of `layers` plain encoder layers: N (8TD^2 + 2T^2 D).
pub fn flops_vte(layers: u64, t: u64, d: u64) -> u128 {
    layers as u128 * flops_vte_layer(t, d)
}

/// Per-layer MACs of a strided encoder layer at input length `t`:
/// (6 + 2K/S) t d^2 + 2 t^2 d, kept as an exact rational.
pub fn flops_ste_layer_exact(t: u64, d: u64, s: u64, k: u64) -> Rat {
    let (t, d, s, k) = (t as i128, d as i128, s as i128, k as i128);
    (rat(6) + Ratio::new(2 * k, s)) * rat(t * d * d) + rat(2 * t * t * d)
}

/// Whole-stack MACs of the strided encoder: sum over n of
/// (6 + 2K/S)/S^(n-1) T D^2 + 2/S^(2(n-1)) T^2 D, exact.
pub fn flops_ste_exact(layers: u64, t: u64, d: u64, s: u64, k: u64) -> Rat {
    let (t, d, s, k) = (t as i128, d as i128, s as i128, k as i128);
    let mut total = Rat::zero();
    for n in 1..=layers as i128 {
        let s_nm1 = s.pow((n - 1) as u32);
        let term1 = (rat(6) + Ratio::new(2 * k, s)) / rat(s_nm1) * rat(t * d * d);
        let term2 = Ratio::new(2, s_nm1 * s_nm1) * rat(t as i128 * t * d);
        total += term1 + term2;
    }
    total
}

/// `flops_ste_exact` rounded to the nearest integer MAC.
pub fn flops_ste(layers: u64, t: u64, d: u64, s: u64, k: u64) -> u128 {
    let exact = flops_ste_exact(layers, t, d, s, k);
    exact.round().to_integer() as u128
}

/// Closed-form ratio F_STE / F_VTE for (N, S, K) = (3, 3, 3):
/// (468 D + 91 T) / (972 D + 243 T).
pub fn beta_closed_form(t: u64, d: u64) -> Rat {
    let (t, d) = (t as i128, d as i128);
    Ratio::new(468 * d + 91 * t, 972 * d + 243 * t)
}

/// beta = F_STE / F_VTE and alpha = 2 / (1 + beta), from the exact sums.
pub fn compression_ratio(layers: u64, t: u64, d: u64, s: u64, k: u64) -> (f64, f64) {
    let vte = rat(flops_vte(layers, t, d) as i128);
    let ste = flops_ste_exact(layers, t, d, s, k);
    let beta = ste / vte;
    let alpha = rat(2) / (rat(1) + beta);
    (alpha.to_f64().unwrap(), beta.to_f64().unwrap())
}

/// Trainable parameter count with a per-module breakdown (first path segment).
pub fn count_params(cfg: &ModelConfig) -> Result<(u64, BTreeMap<String, u64>)> {
    cfg.validate()?;
    let mut total = 0u64;
    let mut breakdown: BTreeMap<String, u64> = BTreeMap::new();
    for spec in param_specs(cfg) {
        if !spec.trainable {
            continue;
        }
        let n = spec.len() as u64;
        total += n;
        let segment = spec.path.split('.').next().unwrap_or("").to_string();
        *breakdown.entry(segment).or_default() += n;
    }
    Ok((total, breakdown))
}

/// Run one instrumented forward pass (batch 1, eval mode) and return the
/// multiply-accumulate count per scope label ("vte.0", "ste.2", "embed", ...).
pub fn measure_macs(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<String, u64>> {
    let params = ModelParameters::init(cfg, seed)?;
    let mut rng = RngStream::new(seed);
    let input =
        ValueGrid::from_fn(&[cfg.frames, cfg.joints, 2], |_| rng.uniform_in(-1.0, 1.0));
    let mut tape = Tape::new();
    let mut fwd_rng = RngStream::new(seed);
    build_forward(&mut tape, cfg, &params, &input, ForwardOptions::eval(), &mut fwd_rng)?;
    Ok(tape.macs_by_scope())
}

/// Analytic counts, ratios, and optional model-derived numbers for one
/// architecture point.
#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub layers: u64,
    pub frames: u64,
    pub d_model: u64,
    pub stride: u64,
    pub kernel: u64,
    pub flops_vte: u128,
    pub flops_ste: u128,
    pub alpha: f64,
    pub beta: f64,
    pub param_count: Option<u64>,
    pub param_breakdown: BTreeMap<String, u64>,
    pub measured_macs: BTreeMap<String, u64>,
}

impl ComplexityReport {
    /// Analytic part only.
    pub fn analytic(layers: u64, frames: u64, d_model: u64, stride: u64, kernel: u64) -> Self {
        let (alpha, beta) = compression_ratio(layers, frames, d_model, stride, kernel);
        ComplexityReport {
            layers,
            frames,
            d_model,
            stride,
            kernel,
            flops_vte: flops_vte(layers, frames, d_model),
            flops_ste: flops_ste(layers, frames, d_model, stride, kernel),
            alpha,
            beta,
            param_count: None,
            param_breakdown: BTreeMap::new(),
            measured_macs: BTreeMap::new(),
        }
    }

    /// Attach parameter counts and instrumented per-layer MACs for a config.
    pub fn with_model(mut self, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let (total, breakdown) = count_params(cfg)?;
        self.param_count = Some(total);
        self.param_breakdown = breakdown;
        self.measured_macs = measure_macs(cfg, seed)?;
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("complexity report (1 MAC = 1 FLOP; norms/softmax/bias excluded)\n");
        out.push_str(&format!(
            "N={} T={} D={} S={} K={}\n",
            self.layers, self.frames, self.d_model, self.stride, self.kernel
        ));
        out.push_str(&format!("F_VTE  = {} MACs\n", self.flops_vte));
        out.push_str(&format!("F_STE  = {} MACs\n", self.flops_ste));
        out.push_str(&format!("beta   = {:.6}\n", self.beta));
        out.push_str(&format!("alpha  = {:.4}\n", self.alpha));
        if let Some(count) = self.param_count {
            out.push_str(&format!(
                "params = {count} trainable values ({:.2}M; head/refine stages beyond the two heads not included)\n",
                count as f64 / 1e6
            ));
            for (seg, n) in &self.param_breakdown {
                out.push_str(&format!("  {seg:<12} {n}\n"));
            }
        }
        if !self.measured_macs.is_empty() {
            out.push_str("measured MACs per layer:\n");
            for (scope, macs) in &self.measured_macs {
                out.push_str(&format!("  {scope:<12} {macs}\n"));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        out.push_str(&format!("layers,{}\n", self.layers));
        out.push_str(&format!("frames,{}\n", self.frames));
        out.push_str(&format!("d_model,{}\n", self.d_model));
        out.push_str(&format!("stride,{}\n", self.stride));
        out.push_str(&format!("kernel,{}\n", self.kernel));
        out.push_str(&format!("flops_vte,{}\n", self.flops_vte));
        out.push_str(&format!("flops_ste,{}\n", self.flops_ste));
        out.push_str(&format!("alpha,{}\n", self.alpha));
        out.push_str(&format!("beta,{}\n", self.beta));
        if let Some(count) = self.param_count {
            out.push_str(&format!("param_count,{count}\n"));
        }
        for (scope, macs) in &self.measured_macs {
            out.push_str(&format!("macs.{scope},{macs}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictionScheme;

    #[test]
    fn vte_flops_reference_point() {
        assert_eq!(flops_vte(3, 27, 256), 43_587_072);
        assert_eq!(flops_vte(1, 1, 1), 10);
        // linear in the layer count
        assert_eq!(flops_vte(6, 27, 256), 2 * flops_vte(3, 27, 256));
    }

    #[test]
    fn ste_flops_reference_point_term_by_term() {
        assert_eq!(flops_ste(1, 27, 256, 3, 3), 14_529_024);
        let second = flops_ste(2, 27, 256, 3, 3) - flops_ste(1, 27, 256, 3, 3);
        assert_eq!(second, 4_760_064);
        let third = flops_ste(3, 27, 256, 3, 3) - flops_ste(2, 27, 256, 3, 3);
        assert_eq!(third, 1_577_472);
        assert_eq!(flops_ste(3, 27, 256, 3, 3), 20_866_560);
    }

    #[test]
    fn ste_single_layer_equals_layer_form() {
        for (t, d, s, k) in [(27, 256, 3, 3), (81, 64, 9, 3), (10, 16, 4, 5)] {
            assert_eq!(flops_ste_exact(1, t, d, s, k), flops_ste_layer_exact(t, d, s, k));
        }
    }

    #[test]
    fn ste_large_stride_limit_drops_kernel_term() {
        // as S grows, a single layer approaches 6TD^2 + 2T^2D
        let t = 27u64;
        let d = 256u64;
        let limit = (6 * t as u128 * d as u128 * d as u128 + 2 * t as u128 * t as u128 * d as u128)
            as f64;
        let big_s = flops_ste_exact(1, t, d, 1_000_000, 3).to_f64().unwrap();
        assert!((big_s - limit) / limit < 1e-5);
        assert!(big_s >= limit);
    }

    #[test]
    fn compression_reference_point() {
        let (alpha, beta) = compression_ratio(3, 27, 256, 3, 3);
        let expected_beta = 122_265.0 / 255_393.0;
        assert!((beta - expected_beta).abs() < 1e-12, "beta {beta}");
        assert!((alpha - 1.3525).abs() < 0.0005, "alpha {alpha}");
    }

    #[test]
    fn compression_limit_at_large_width() {
        let (alpha, _) = compression_ratio(3, 27, 1_000_000, 3, 3);
        assert!((alpha - 1.35).abs() < 0.005, "alpha {alpha}");
    }

    #[test]
    fn beta_closed_form_equals_raw_sums() {
        let mut rng = RngStream::new(40);
        for _ in 0..100 {
            let t = 1 + rng.index(500) as u64;
            let d = 1 + rng.index(2000) as u64;
            let raw = flops_ste_exact(3, t, d, 3, 3) / rat(flops_vte(3, t, d) as i128);
            let closed = beta_closed_form(t, d);
            assert_eq!(raw, closed, "T={t} D={d}");
            assert!((raw.to_f64().unwrap() - closed.to_f64().unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_monotone_in_width() {
        // beta rises from 91/243 (D -> 0) toward 468/972 (D -> inf), so alpha
        // falls toward its 1.35 limit; verified over a grid.
        for t in [9u64, 27, 81, 351] {
            let mut prev = f64::NEG_INFINITY;
            for d in [8u64, 16, 64, 256, 1024, 65536] {
                let beta = beta_closed_form(t, d).to_f64().unwrap();
                assert!(beta > prev, "T={t} D={d}: {beta} !> {prev}");
                assert!(beta > 91.0 / 243.0 && beta < 468.0 / 972.0);
                prev = beta;
            }
        }
    }

    #[test]
    fn alpha_identity_on_grid() {
        for layers in [1u64, 2, 3, 5] {
            for (t, d, s, k) in [(27u64, 64u64, 3u64, 3u64), (81, 128, 9, 3), (45, 32, 5, 5)] {
                let (alpha, _) = compression_ratio(layers, t, d, s, k);
                let fv = flops_vte(layers, t, d) as f64;
                let fs = flops_ste_exact(layers, t, d, s, k).to_f64().unwrap();
                let direct = 2.0 * fv / (fv + fs);
                assert!((alpha - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count_default_config_near_4m() {
        let cfg = ModelConfig::default();
        let (count, breakdown) = count_params(&cfg).unwrap();
        let target = 4_010_000f64;
        assert!(
            (count as f64 - target).abs() / target < 0.05,
            "default config has {count} params"
        );
        assert!(breakdown["vte"] > 0 && breakdown["ste"] > 0);
    }

    #[test]
    fn param_count_vte_only_near_1_61m() {
        let cfg = ModelConfig {
            ste_layers: 0,
            strides: vec![],
            mode: PredictionScheme::Full,
            ..ModelConfig::default()
        };
        let (count, _) = count_params(&cfg).unwrap();
        let target = 1_610_000f64;
        assert!(
            (count as f64 - target).abs() / target < 0.05,
            "single-stack config has {count} params"
        );
    }

    #[test]
    fn toy_param_count_matches_hand_formula() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 5,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 2,
            strides: vec![3, 3],
            ..ModelConfig::default()
        };
        let (count, _) = count_params(&cfg).unwrap();
        let (t, j, d, df, kf, km) = (9u64, 5u64, 16u64, 32u64, 1u64, 3u64);
        let embed = (2 * j * d + d) + 2 * d;
        let e1 = t * d;
        let vte = 2 * d + 4 * (d * d + d) + 2 * d + (d * df + df) + (df * d + d);
        let ste_shared = 2 * d + 4 * (d * d + d) + 2 * d;
        let cffn = (kf * d * df + df) + (km * df * d + d);
        let ste = (9 * d + ste_shared + cffn) + (3 * d + ste_shared + cffn);
        let head = 2 * d + (d * 3 * j + 3 * j);
        let expected = embed + e1 + vte + ste + 2 * head;
        assert_eq!(count, expected);
    }

    #[test]
    fn measured_macs_match_closed_forms_on_divisible_stages() {
        let cfg = ModelConfig { d_model: 64, d_hidden: 128, ..ModelConfig::default() };
        let macs = measure_macs(&cfg, 0).unwrap();
        // plain layers: exactly 8td^2 + 2t^2d each
        for n in 0..3 {
            assert_eq!(macs[&format!("vte.{n}")] as u128, flops_vte_layer(27, 64), "vte.{n}");
        }
        // strided layers at stage lengths 27, 9, 3 divide evenly by 3
        let lens = [27u64, 9, 3];
        for (n, &t) in lens.iter().enumerate() {
            let analytic = flops_ste_layer_exact(t, 64, 3, 3);
            assert!(analytic.is_integer());
            assert_eq!(macs[&format!("ste.{n}")] as i128, analytic.to_integer(), "ste.{n}");
        }
    }

    #[test]
    fn measured_macs_within_5_percent_on_padded_stages() {
        // 25 -> ceil(25/3) = 9 -> 1: the first stage does not divide evenly
        let cfg = ModelConfig {
            frames: 25,
            d_model: 64,
            d_hidden: 128,
            ste_layers: 2,
            strides: vec![3, 9],
            ..ModelConfig::default()
        };
        let macs = measure_macs(&cfg, 0).unwrap();
        let analytic = flops_ste_layer_exact(25, 64, 3, 3).to_f64().unwrap();
        let measured = macs["ste.0"] as f64;
        let rel = (measured - analytic).abs() / analytic;
        assert!(rel < 0.05, "padded stage off by {rel}");
        assert!(measured != analytic, "stage 25/3 should not match exactly");
    }

    #[test]
    fn report_text_has_key_figures() {
        let report = ComplexityReport::analytic(3, 27, 256, 3, 3);
        let text = report.to_text();
        assert!(text.contains("43587072"));
        assert!(text.contains("20866560"));
        assert!(text.contains("1.3525"));
        let csv = report.to_csv();
        assert!(csv.contains("flops_vte,43587072"));
    }
}
