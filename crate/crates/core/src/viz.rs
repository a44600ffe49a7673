//! Attention-trace frames: the attended image with the window drawn on top.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndcore::Tensor;

use crate::attention::GlimpseWindow;
use crate::error::{ArcError, Result};
use crate::model::{ComparisonTrace, Presented};
use crate::training::LogisticProbe;

pub const TRACE_FILE: &str = "trace.txt";

/// Default pixel magnification of frames.
pub const FRAME_SCALE: usize = 8;

const WINDOW_COLOUR: Rgb<u8> = Rgb([255, 0, 0]);

/// Window rectangle in image pixels: the kernel-centre bounding box grown by
/// `gamma` on every side, as `(x0, y0, x1, y1)`.
pub fn window_rect(w: &GlimpseWindow, glimpse: usize) -> (f64, f64, f64, f64) {
    let half = (glimpse as f64 - 1.0) / 2.0 * w.delta;
    (w.x - half - w.gamma, w.y - half - w.gamma, w.x + half + w.gamma, w.y + half + w.gamma)
}

/// Ink is drawn dark on a light background.
pub fn render_frame(image: &Tensor, window: &GlimpseWindow, glimpse: usize, scale: usize) -> RgbImage {
    let side = image.shape()[0];
    let size = (side * scale) as u32;
    let mut frame = RgbImage::from_fn(size, size, |px, py| {
        let v = image.at(py as usize / scale, px as usize / scale).clamp(0.0, 1.0);
        let g = (255.0 * (1.0 - v)).round() as u8;
        Rgb([g, g, g])
    });
    // Pixel centres sit at (i + 0.5) * scale in frame coordinates.
    let to_frame = |p: f64| ((p + 0.5) * scale as f64).round() as i64;
    let (x0, y0, x1, y1) = window_rect(window, glimpse);
    let (fx0, fy0, fx1, fy1) = (to_frame(x0), to_frame(y0), to_frame(x1), to_frame(y1));
    let max = i64::from(size) - 1;
    let mut put = |x: i64, y: i64| {
        if (0..=max).contains(&x) && (0..=max).contains(&y) {
            frame.put_pixel(x as u32, y as u32, WINDOW_COLOUR);
        }
    };
    for x in fx0.max(0)..=fx1.min(max) {
        put(x, fy0);
        put(x, fy1);
    }
    for y in fy0.max(0)..=fy1.min(max) {
        put(fx0, y);
        put(fx1, y);
    }
    frame
}

/// Probe score of the state after step `t`, when a probe for it exists.
fn probe_score(t: usize, hidden: &Tensor, probes: &[LogisticProbe]) -> Option<f64> {
    if !(t + 1).is_multiple_of(2) {
        return None;
    }
    let k = (t + 1).div_ceil(2);
    probes.iter().find(|p| p.k == k).map(|p| p.predict(hidden))
}

/// Sidecar text: one line per step with the exact trace values.
pub fn trace_text(trace: &ComparisonTrace, probes: &[LogisticProbe]) -> String {
    let mut s = String::from("# t, image, x, y, delta, gamma, probe\n");
    for step in &trace.steps {
        let image = match step.image {
            Presented::First => "a",
            Presented::Second => "b",
        };
        let probe = probe_score(step.t, &step.hidden, probes).map_or_else(|| "-".to_string(), |p| p.to_string());
        let w = &step.window;
        let _ = writeln!(s, "{}, {image}, {}, {}, {}, {}, {probe}", step.t, w.x, w.y, w.delta, w.gamma);
    }
    let _ = writeln!(s, "# similarity {}", trace.similarity);
    s
}

/// Writes `step_00.png`, `step_01.png`, ... and the sidecar into `out`.
pub fn write_frames(
    out: &Path,
    trace: &ComparisonTrace,
    images: (&Tensor, &Tensor),
    glimpse: usize,
    probes: &[LogisticProbe],
    scale: usize,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(ArcError::io(out))?;
    let mut paths = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let image = match step.image {
            Presented::First => images.0,
            Presented::Second => images.1,
        };
        let path = out.join(format!("step_{:02}.png", step.t));
        render_frame(image, &step.window, glimpse, scale)
            .save(&path)
            .map_err(|e| ArcError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        paths.push(path);
    }
    let sidecar = out.join(TRACE_FILE);
    fs::write(&sidecar, trace_text(trace, probes)).map_err(ArcError::io(&sidecar))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_window_covers_image() {
        let w = GlimpseWindow {
            x_hat: 0.0,
            y_hat: 0.0,
            delta_hat: 0.0,
            x: 7.5,
            y: 7.5,
            delta: 4.0,
            gamma: 1.0,
        };
        let (x0, y0, x1, y1) = window_rect(&w, 4);
        assert_eq!((x0, y0, x1, y1), (0.5, 0.5, 14.5, 14.5));
        let frame = render_frame(&Tensor::zeros(&[16, 16]), &w, 4, 2);
        assert_eq!(frame.dimensions(), (32, 32));
        assert_eq!(*frame.get_pixel(2, 2), WINDOW_COLOUR);
        assert_eq!(*frame.get_pixel(10, 10), Rgb([255, 255, 255]));
    }
}
