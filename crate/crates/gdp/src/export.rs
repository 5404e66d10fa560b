//! Trajectory export: per-frame ground truth versus prediction as CSV plus
//! a top-down overlay plot (regenerable from the CSV alone).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::dataset::Dataset;
use crate::eval::{evaluate, EvalError};
use crate::model::Model;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory csv is malformed at line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
    #[error("png encode failed: {0}")]
    Png(String),
}

/// One exported frame row.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRow {
    pub frame_id: usize,
    pub gt: [f64; 3],
    pub pred: [f64; 3],
    pub translation_err_m: f64,
    pub rotation_err_deg: f64,
}

/// Evaluate the dataset and write `trajectory.csv` plus `trajectory.png`
/// into `out_dir`. Overlapping windows contribute their first prediction
/// per frame.
pub fn export_trajectory(
    model: &Model,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<Vec<TrajectoryRow>, ExportError> {
    std::fs::create_dir_all(out_dir)?;
    let report = evaluate(model, dataset)?;
    let mut first: BTreeMap<usize, &crate::eval::FrameError> = BTreeMap::new();
    for frame in &report.metrics.per_frame {
        first.entry(frame.frame_id).or_insert(frame);
    }
    let rows: Vec<TrajectoryRow> = first
        .values()
        .map(|f| TrajectoryRow {
            frame_id: f.frame_id,
            gt: dataset.poses[f.frame_id].d,
            pred: f.predicted.d,
            translation_err_m: f.translation_m,
            rotation_err_deg: f.rotation_deg,
        })
        .collect();

    let csv_path = out_dir.join("trajectory.csv");
    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "frame_id,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,trans_err_m,rot_err_deg")?;
    for row in &rows {
        writeln!(
            file,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            row.frame_id,
            row.gt[0],
            row.gt[1],
            row.gt[2],
            row.pred[0],
            row.pred[1],
            row.pred[2],
            row.translation_err_m,
            row.rotation_err_deg
        )?;
    }
    drop(file);

    // The plot is always rendered back from the CSV so the file alone
    // suffices to reproduce it.
    let csv_text = std::fs::read_to_string(&csv_path)?;
    let png = plot_from_csv(&csv_text)?;
    std::fs::write(out_dir.join("trajectory.png"), png)?;
    Ok(rows)
}

/// Parse an exported trajectory CSV.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>, ExportError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header))
            if header == "frame_id,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,trans_err_m,rot_err_deg" => {}
        other => {
            return Err(ExportError::BadCsv {
                line: 1,
                reason: format!("unexpected header {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(ExportError::BadCsv {
                line: idx + 1,
                reason: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, ExportError> {
            s.parse().map_err(|e| ExportError::BadCsv {
                line: idx + 1,
                reason: format!("{e}"),
            })
        };
        rows.push(TrajectoryRow {
            frame_id: fields[0].parse().map_err(|e| ExportError::BadCsv {
                line: idx + 1,
                reason: format!("{e}"),
            })?,
            gt: [parse(fields[1])?, parse(fields[2])?, parse(fields[3])?],
            pred: [parse(fields[4])?, parse(fields[5])?, parse(fields[6])?],
            translation_err_m: parse(fields[7])?,
            rotation_err_deg: parse(fields[8])?,
        });
    }
    Ok(rows)
}

const PLOT_SIZE: u32 = 600;
const GT_COLOR: [u8; 3] = [40, 70, 200];
const PRED_COLOR: [u8; 3] = [210, 50, 40];

/// Render the top-down overlay (ground truth bold, prediction thin, star at
/// the start) from CSV text alone. Returns encoded PNG bytes.
pub fn plot_from_csv(text: &str) -> Result<Vec<u8>, ExportError> {
    let rows = parse_trajectory_csv(text)?;
    let mut img = image::RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, image::Rgb([255, 255, 255]));
    if !rows.is_empty() {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for row in &rows {
            for p in [&row.gt, &row.pred] {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let margin = 40.0;
        let scale = (PLOT_SIZE as f64 - 2.0 * margin) / span;
        let project = |p: &[f64; 3]| {
            let x = margin + (p[0] - lo[0]) * scale;
            let y = PLOT_SIZE as f64 - margin - (p[1] - lo[1]) * scale;
            (x as i64, y as i64)
        };

        let gt: Vec<(i64, i64)> = rows.iter().map(|r| project(&r.gt)).collect();
        let pred: Vec<(i64, i64)> = rows.iter().map(|r| project(&r.pred)).collect();
        for pair in gt.windows(2) {
            draw_line(&mut img, pair[0], pair[1], GT_COLOR, 1);
        }
        for pair in pred.windows(2) {
            draw_line(&mut img, pair[0], pair[1], PRED_COLOR, 0);
        }
        draw_star(&mut img, gt[0], GT_COLOR);
        draw_star(&mut img, pred[0], PRED_COLOR);
    }
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ExportError::Png(e.to_string()))?;
    Ok(bytes)
}

fn put_pixel(img: &mut image::RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

/// Bresenham segment with optional thickness.
fn draw_line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3], thick: i64) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        for oy in -thick..=thick {
            for ox in -thick..=thick {
                put_pixel(img, x + ox, y + oy, color);
            }
        }
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_star(img: &mut image::RgbImage, center: (i64, i64), color: [u8; 3]) {
    for d in -6i64..=6 {
        put_pixel(img, center.0 + d, center.1, color);
        put_pixel(img, center.0, center.1 + d, color);
        put_pixel(img, center.0 + d, center.1 + d, color);
        put_pixel(img, center.0 + d, center.1 - d, color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::dataset::generate_dataset;

    fn tiny_config() -> Config {
        let mut config = Config::default();
        config.data.num_poses = 6;
        config.data.image_size = 32;
        config.data.window_size = 2;
        config.model.stage_widths = [4, 4, 8, 8];
        config.diffusion.heads = 2;
        config.diffusion.steps_per_unit = 1;
        config.diffusion.vector_blocks = 1;
        config
    }

    #[test]
    fn export_writes_csv_and_rerenderable_plot() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let dataset = generate_dataset(&config, &dir.path().join("data")).unwrap();
        let model = Model::new(&config);
        let rows = export_trajectory(&model, &dataset, &dir.path().join("out")).unwrap();
        assert_eq!(rows.len(), dataset.poses.len());

        let csv_path = dir.path().join("out/trajectory.csv");
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), dataset.poses.len() + 1);

        let png_path = dir.path().join("out/trajectory.png");
        let written = std::fs::read(&png_path).unwrap();
        assert!(!written.is_empty());
        // Re-render from the CSV alone: byte-identical plot.
        let rerendered = plot_from_csv(&csv).unwrap();
        assert_eq!(written, rerendered);
    }

    #[test]
    fn csv_parser_rejects_malformed_rows() {
        assert!(parse_trajectory_csv("bogus\n").is_err());
        let header = "frame_id,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,trans_err_m,rot_err_deg\n";
        assert!(parse_trajectory_csv(&format!("{header}0,1,2\n")).is_err());
        let ok = parse_trajectory_csv(&format!("{header}0,1,2,3,4,5,6,7,8\n")).unwrap();
        assert_eq!(ok.len(), 1);
        assert_eq!(ok[0].gt, [1.0, 2.0, 3.0]);
    }
}
