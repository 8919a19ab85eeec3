//! Deterministic raster plots: a fixed-canvas line plot of a series (the
//! image handed to the captioning model) and a bar chart for accuracy
//! reports. Text is drawn with a built-in 5x7 bitmap font so output bytes
//! depend only on the input data.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

pub const PLOT_WIDTH: u32 = 640;
pub const PLOT_HEIGHT: u32 = 480;

const MARGIN_LEFT: u32 = 56;
const MARGIN_RIGHT: u32 = 12;
const MARGIN_TOP: u32 = 12;
const MARGIN_BOTTOM: u32 = 36;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const LINE: Rgb<u8> = Rgb([31, 119, 180]);
const BAR: Rgb<u8> = Rgb([76, 114, 176]);

/// 5x7 glyphs; each row uses the low 5 bits, bit 4 leftmost.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: Rgb<u8>) {
    let mut cursor = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..5 {
                if row & (0x10 >> dx) != 0 {
                    let px = cursor + dx;
                    let py = y + dy as i32;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cursor += 6;
    }
}

fn draw_line(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
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

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn render_series_image(series: &TimeSeries) -> Result<RgbImage> {
    series.validate()?;
    if series.values.len() < 2 {
        return Err(Error::data(&series.series_id, "plot requires >= 2 points"));
    }
    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, BG);
    let x0 = MARGIN_LEFT as i32;
    let x1 = (PLOT_WIDTH - MARGIN_RIGHT) as i32;
    let y0 = (PLOT_HEIGHT - MARGIN_BOTTOM) as i32;
    let y1 = MARGIN_TOP as i32;

    let vmin = series.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = series.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (vmax - vmin).max(1e-9);
    let (lo, hi) = (vmin - 0.05 * span, vmax + 0.05 * span);

    draw_line(&mut img, x0, y0, x1, y0, AXIS);
    draw_line(&mut img, x0, y0, x0, y1, AXIS);

    let n = series.values.len();
    let to_px = |t: usize, v: f64| -> (i32, i32) {
        let fx = t as f64 / (n - 1) as f64;
        let fy = (v - lo) / (hi - lo);
        (
            x0 + (fx * (x1 - x0) as f64).round() as i32,
            y0 - (fy * (y0 - y1) as f64).round() as i32,
        )
    };

    // 5 ticks per axis with labels
    for i in 0..=4 {
        let t = i * (n - 1) / 4;
        let (px, _) = to_px(t, lo);
        draw_line(&mut img, px, y0, px, y0 + 4, AXIS);
        let label = format!("{t}");
        draw_text(&mut img, px - 3 * label.len() as i32, y0 + 8, &label, AXIS);

        let v = lo + (hi - lo) * i as f64 / 4.0;
        let (_, py) = to_px(0, v);
        draw_line(&mut img, x0 - 4, py, x0, py, AXIS);
        let label = format_tick(v);
        draw_text(
            &mut img,
            x0 - 6 - 6 * label.len() as i32,
            py - 3,
            &label,
            AXIS,
        );
    }

    let mut prev = to_px(0, series.values[0]);
    for (t, &v) in series.values.iter().enumerate().skip(1) {
        let cur = to_px(t, v);
        draw_line(&mut img, prev.0, prev.1, cur.0, cur.1, LINE);
        prev = cur;
    }
    Ok(img)
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .encode(img.as_raw(), img.width(), img.height(), image::ColorType::Rgb8)
        .map_err(|e| Error::config(format!("png encode failed: {e}")))?;
    Ok(bytes)
}

/// PNG bytes of the fixed-canvas line plot (what the captioner sees).
pub fn render_plot_bytes(series: &TimeSeries) -> Result<Vec<u8>> {
    encode_png(&render_series_image(series)?)
}

/// Write the line plot as a PNG file.
pub fn render_plot(series: &TimeSeries, out_path: impl AsRef<Path>) -> Result<()> {
    let bytes = render_plot_bytes(series)?;
    std::fs::write(out_path.as_ref(), bytes)?;
    Ok(())
}

/// Bar chart of labeled values in `[0, 1]`, written as a PNG file.
pub fn bar_chart(out_path: impl AsRef<Path>, entries: &[(String, f64)]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::config("bar chart needs at least one entry"));
    }
    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, BG);
    let x0 = MARGIN_LEFT as i32;
    let x1 = (PLOT_WIDTH - MARGIN_RIGHT) as i32;
    let y0 = (PLOT_HEIGHT - MARGIN_BOTTOM) as i32;
    let y1 = MARGIN_TOP as i32;
    draw_line(&mut img, x0, y0, x1, y0, AXIS);
    draw_line(&mut img, x0, y0, x0, y1, AXIS);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let py = y0 - (f * (y0 - y1) as f64) as i32;
        draw_line(&mut img, x0 - 4, py, x0, py, AXIS);
        let label = format!("{}", (f * 100.0) as u32);
        draw_text(&mut img, x0 - 8 - 6 * label.len() as i32, py - 3, &label, AXIS);
    }
    let slot = (x1 - x0) / entries.len() as i32;
    let bar_w = (slot as f64 * 0.6) as i32;
    for (i, (label, value)) in entries.iter().enumerate() {
        let v = value.clamp(0.0, 1.0);
        let left = x0 + i as i32 * slot + (slot - bar_w) / 2;
        let top = y0 - (v * (y0 - y1) as f64) as i32;
        for x in left..left + bar_w {
            draw_line(&mut img, x, y0 - 1, x, top, BAR);
        }
        let text_x = left + bar_w / 2 - 3 * label.len() as i32;
        draw_text(&mut img, text_x, y0 + 8, label, AXIS);
        let pct = format!("{:.0}%", v * 100.0);
        draw_text(&mut img, left + bar_w / 2 - 3 * pct.len() as i32, top - 10, &pct, AXIS);
    }
    std::fs::write(out_path.as_ref(), encode_png(&img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> TimeSeries {
        TimeSeries::new("p", (0..64).map(|t| (t as f64 * 0.2).sin() * 2.0 + 0.01 * t as f64).collect())
    }

    #[test]
    fn plot_bytes_are_deterministic() {
        let s = series();
        let a = render_plot_bytes(&s).unwrap();
        let b = render_plot_bytes(&s).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert_eq!(&a[1..4], b"PNG");
    }

    #[test]
    fn plot_file_written_and_nonempty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        render_plot(&series(), &path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 0);
    }

    #[test]
    fn single_point_series_is_rejected() {
        let s = TimeSeries::new("one", vec![1.0]);
        assert!(render_plot_bytes(&s).is_err());
    }

    #[test]
    fn bar_chart_writes_deterministic_file() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.png");
        let path_b = dir.path().join("b.png");
        let entries = vec![
            ("PR".to_string(), 0.8),
            ("NU".to_string(), 0.55),
            ("OA".to_string(), 0.7),
        ];
        bar_chart(&path_a, &entries).unwrap();
        bar_chart(&path_b, &entries).unwrap();
        assert_eq!(std::fs::read(path_a).unwrap(), std::fs::read(path_b).unwrap());
    }
}
