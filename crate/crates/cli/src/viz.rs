//! PNG emission: frame-strip previews of video clips and minimal line charts.

use std::path::Path;

use image::{Rgb, RgbImage};
use paircast::video::VideoClip;
use paircast::{Error, Result};

const GAP: u32 = 2;

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Render one or more clips as stacked horizontal frame strips.
/// Multi-channel clips render each channel as its own strip.
pub fn save_preview(path: &Path, clips: &[&VideoClip]) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::Domain("preview needs at least one clip".into()));
    }
    let (h, w) = (clips[0].h as u32, clips[0].w as u32);
    let t = clips.iter().map(|c| c.t).max().unwrap() as u32;
    let rows: u32 = clips.iter().map(|c| c.c as u32).sum();
    let img_w = t * w + (t - 1) * GAP;
    let img_h = rows * h + (rows - 1) * GAP;
    let mut img = RgbImage::from_pixel(img_w, img_h, Rgb([30, 30, 30]));
    let mut row = 0u32;
    for clip in clips {
        if clip.h as u32 != h || clip.w as u32 != w {
            return Err(Error::ShapeMismatch("preview clips must share frame geometry".into()));
        }
        for ch in 0..clip.c {
            let y0 = row * (h + GAP);
            for ft in 0..clip.t {
                let x0 = ft as u32 * (w + GAP);
                for y in 0..clip.h {
                    for x in 0..clip.w {
                        let v = to_u8(clip.get(ft, y, x, ch));
                        img.put_pixel(x0 + x as u32, y0 + y as u32, Rgb([v, v, v]));
                    }
                }
            }
            row += 1;
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * f).round() as i64;
        let y = (y0 + (y1 - y0) * f).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Minimal line chart: light background, framed plot area, one polyline per
/// series with a color-key block in the top-right corner (labels live in the
/// accompanying CSV, not in the image).
pub fn line_chart(path: &Path, series: &[Series]) -> Result<()> {
    let (width, height, margin) = (720u32, 440u32, 48.0);
    let mut img = RgbImage::from_pixel(width, height, Rgb([250, 250, 250]));

    let all = |f: for<'b> fn(&'b Series) -> &'b Vec<f64>| {
        series.iter().flat_map(move |s| f(s).iter().copied()).filter(|v| v.is_finite())
    };
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in all(|s| &s.x) {
        x_min = x_min.min(v);
        x_max = x_max.max(v);
    }
    for v in all(|s| &s.y) {
        y_min = y_min.min(v);
        y_max = y_max.max(v);
    }
    if !x_min.is_finite() || !y_min.is_finite() {
        return Err(Error::Domain("chart needs at least one finite point".into()));
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let px = |x: f64| margin + (x - x_min) / (x_max - x_min) * (width as f64 - 2.0 * margin);
    let py = |y: f64| {
        height as f64 - margin - (y - y_min) / (y_max - y_min) * (height as f64 - 2.0 * margin)
    };

    let frame = Rgb([120, 120, 120]);
    draw_line(&mut img, px(x_min), py(y_min), px(x_max), py(y_min), frame);
    draw_line(&mut img, px(x_min), py(y_min), px(x_min), py(y_max), frame);
    draw_line(&mut img, px(x_min), py(y_max), px(x_max), py(y_max), frame);
    draw_line(&mut img, px(x_max), py(y_min), px(x_max), py(y_max), frame);

    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let pts: Vec<(f64, f64)> = s
            .x
            .iter()
            .zip(s.y.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| (px(x), py(y)))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, color);
        }
        // color key swatch
        let (kx, ky) = (width - 24, 16 + 12 * si as u32);
        for dy in 0..8 {
            for dx in 0..8 {
                img.put_pixel(kx + dx, ky + dy, color);
            }
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use paircast::video::{Modality, Role};

    #[test]
    fn preview_and_chart_write_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let mut clip = VideoClip::zeros(3, 8, 8, 1, Modality::A, Role::Target);
        clip.set(1, 4, 4, 0, 1.0);
        let p1 = dir.path().join("preview.png");
        save_preview(&p1, &[&clip, &clip]).unwrap();
        assert!(p1.exists());

        let p2 = dir.path().join("chart.png");
        let s = Series { x: (0..50).map(|i| i as f64).collect(), y: (0..50).map(|i| (-(i as f64) / 10.0).exp()).collect() };
        line_chart(&p2, &[s]).unwrap();
        assert!(p2.exists());
    }

    #[test]
    fn chart_rejects_empty_series() {
        let dir = tempfile::tempdir().unwrap();
        let s = Series { x: vec![f64::NAN], y: vec![f64::NAN] };
        assert!(line_chart(&dir.path().join("x.png"), &[s]).is_err());
    }
}
