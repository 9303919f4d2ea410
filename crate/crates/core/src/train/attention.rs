use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::model::{forward_eval, AttentionRecord, ModelConfig, ModelParameters};
use crate::synth::PoseSequenceSample;

/// Run one sample through the network with attention retention and write the
/// per-layer, per-head maps as CSV (exact values) plus grayscale PNG
/// (max-normalized for visibility). File names encode module, layer, and
/// head, e.g. `vte_0_head3.csv`.
pub fn export_attention(
    cfg: &ModelConfig,
    params: &ModelParameters,
    sample: &PoseSequenceSample,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out = forward_eval(cfg, params, &sample.input2d, true)?;
    if out.attention.is_empty() {
        return Err(Error::Internal("forward retained no attention maps".into()));
    }
    std::fs::create_dir_all(out_dir.as_ref())?;
    let mut written = Vec::new();
    for record in &out.attention {
        written.extend(write_record(record, out_dir.as_ref())?);
    }
    Ok(written)
}

fn write_record(record: &AttentionRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let l = record.seq_len;
    let stem = record.module.replace('.', "_");
    let mut written = Vec::new();
    for head in 0..record.heads {
        let map = &record.maps.data()[head * l * l..(head + 1) * l * l];
        let mut csv = String::new();
        for row in 0..l {
            let cells: Vec<String> =
                map[row * l..(row + 1) * l].iter().map(|v| v.to_string()).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        let csv_path = dir.join(format!("{stem}_head{head}.csv"));
        std::fs::write(&csv_path, csv)?;
        written.push(csv_path);

        let peak = map.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let mut img = GrayImage::new(l as u32, l as u32);
        for row in 0..l {
            for col in 0..l {
                let v = (map[row * l + col] / peak * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(col as u32, row as u32, Luma([v]));
            }
        }
        let png_path = dir.join(format!("{stem}_head{head}.png"));
        img.save(&png_path).map_err(|e| Error::Internal(format!("png write failed: {e}")))?;
        written.push(png_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, CameraSpec, GenConfig, SkeletonSpec};

    #[test]
    fn exported_csv_equals_in_memory_maps() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 17,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 2,
            strides: vec![3, 3],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 8).unwrap();
        let skel = SkeletonSpec::default_17();
        let cam = CameraSpec::default_front();
        let gen =
            GenConfig { sequences: 1, frames_per_sequence: 9, window: 9, ..Default::default() };
        let sample = &generate_dataset(&skel, &cam, &gen).unwrap()[4];
        let dir = tempfile::tempdir().unwrap();
        let files = export_attention(&cfg, &params, sample, dir.path()).unwrap();
        // 3 layers x 2 heads x (csv + png)
        assert_eq!(files.len(), 12);

        let out = forward_eval(&cfg, &params, &sample.input2d, true).unwrap();
        for record in &out.attention {
            let l = record.seq_len;
            for head in 0..record.heads {
                let stem = record.module.replace('.', "_");
                let csv =
                    std::fs::read_to_string(dir.path().join(format!("{stem}_head{head}.csv")))
                        .unwrap();
                let mut parsed = Vec::new();
                for line in csv.lines() {
                    for cell in line.split(',') {
                        parsed.push(cell.parse::<f64>().unwrap());
                    }
                }
                let expected = &record.maps.data()[head * l * l..(head + 1) * l * l];
                assert_eq!(parsed.len(), expected.len());
                for (a, b) in parsed.iter().zip(expected) {
                    assert!((a - b).abs() < 1e-12);
                }
                // attention rows sum to 1 in the exported data
                for row in 0..l {
                    let sum: f64 = parsed[row * l..(row + 1) * l].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn final_strided_layer_exports_unit_map() {
        let cfg = ModelConfig {
            frames: 9,
            joints: 17,
            d_model: 16,
            d_hidden: 32,
            heads: 2,
            vte_layers: 1,
            ste_layers: 2,
            strides: vec![9, 1],
            ..ModelConfig::default()
        };
        let params = ModelParameters::init(&cfg, 9).unwrap();
        let skel = SkeletonSpec::default_17();
        let cam = CameraSpec::default_front();
        let gen =
            GenConfig { sequences: 1, frames_per_sequence: 9, window: 9, ..Default::default() };
        let sample = &generate_dataset(&skel, &cam, &gen).unwrap()[0];
        let dir = tempfile::tempdir().unwrap();
        export_attention(&cfg, &params, sample, dir.path()).unwrap();
        // second strided layer runs at length 1: its map is exactly [[1.0]]
        let csv = std::fs::read_to_string(dir.path().join("ste_1_head0.csv")).unwrap();
        assert_eq!(csv.trim(), "1");
    }
}
