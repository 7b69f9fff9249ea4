//! PNG figures drawn straight onto an RGB buffer. No text; axes are implied
//! by panel borders.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use msstyle_core::training::LogRecord;
use msstyle_core::Tensor;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([200, 200, 200]);
const TRUTH: Rgb<u8> = Rgb([40, 90, 200]);
const SYNTH: Rgb<u8> = Rgb([230, 120, 20]);
const STAGE_COLORS: [Rgb<u8>; 3] = [Rgb([40, 90, 200]), Rgb([30, 150, 60]), Rgb([200, 50, 50])];

#[derive(Debug, Clone, Copy)]
struct Panel {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

impl Panel {
    /// Pixel of data point `(u, v)` in unit coordinates, `v` pointing up.
    fn at(&self, u: f64, v: f64) -> (i64, i64) {
        let px = self.x as f64 + u.clamp(0.0, 1.0) * (self.w - 1) as f64;
        let py = self.y as f64 + (1.0 - v.clamp(0.0, 1.0)) * (self.h - 1) as f64;
        (px.round() as i64, py.round() as i64)
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, BG),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x as i64, y as i64, c);
            }
        }
    }

    /// Bresenham, two pixels thick.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            self.put(x, y + 1, c);
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

    fn border(&mut self, p: Panel) {
        let (l, t, r, b) = (p.x as i64 - 1, p.y as i64 - 1, (p.x + p.w) as i64, (p.y + p.h) as i64);
        for x in l..=r {
            self.put(x, t, FRAME);
            self.put(x, b, FRAME);
        }
        for y in t..=b {
            self.put(l, y, FRAME);
            self.put(r, y, FRAME);
        }
    }

    fn save(self, out: &Path) -> Result<()> {
        self.img.save(out).with_context(|| format!("writing {}", out.display()))
    }
}

/// Dark blue through teal to yellow.
fn colormap(t: f64) -> Rgb<u8> {
    let stops = [
        (0.0, [30.0, 20.0, 80.0]),
        (0.5, [30.0, 150.0, 140.0]),
        (1.0, [250.0, 230.0, 40.0]),
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let (a, b) = if t < 0.5 {
        (stops[0], stops[1])
    } else {
        (stops[1], stops[2])
    };
    let f = (t - a.0) / (b.0 - a.0);
    let mix = |i: usize| (a.1[i] + f * (b.1[i] - a.1[i])).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Matrix as colored cells; rows top to bottom, columns left to right.
fn cells(c: &mut Canvas, p: Panel, m: &Tensor, lo: f64, hi: f64, flip_rows: bool) {
    let (rows, cols) = (m.rows().max(1), m.cols().max(1));
    for r in 0..m.rows() {
        for k in 0..m.cols() {
            let rr = if flip_rows { rows - 1 - r } else { r };
            let x0 = p.x + (k as u64 * p.w as u64 / cols as u64) as u32;
            let x1 = p.x + ((k + 1) as u64 * p.w as u64 / cols as u64) as u32;
            let y0 = p.y + (rr as u64 * p.h as u64 / rows as u64) as u32;
            let y1 = p.y + ((rr + 1) as u64 * p.h as u64 / rows as u64) as u32;
            c.rect(
                x0,
                y0,
                x1.max(x0 + 1),
                y1.max(y0 + 1),
                colormap((m.get2(r, k) - lo) / (hi - lo)),
            );
        }
    }
    c.border(p);
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut data = Vec::with_capacity(r * c);
    for k in 0..c {
        for i in 0..r {
            data.push(m.get2(i, k));
        }
    }
    Tensor::matrix(c, r, data).expect("shape")
}

pub fn heatmap(a: &Tensor, out: &Path) -> Result<()> {
    let cell = (480 / a.cols().max(1)).clamp(8, 80) as u32;
    let row_h = (480 / a.rows().max(1)).clamp(4, 40) as u32;
    let p = Panel {
        x: 10,
        y: 10,
        w: cell * a.cols() as u32,
        h: row_h * a.rows() as u32,
    };
    let mut c = Canvas::new(p.w + 20, p.h + 20);
    let (_, hi) = min_max(a.data().iter().copied());
    cells(&mut c, p, a, 0.0, hi.max(1e-12), false);
    // current-sentence column
    let mid = a.cols() / 2;
    let x = p.x + (mid as u32) * cell + cell / 2;
    c.line(
        (x as i64, (p.y + p.h + 3) as i64),
        (x as i64, (p.y + p.h + 8) as i64),
        FRAME,
    );
    c.save(out)
}

/// Pitch with unvoiced (zero) frames left as gaps.
fn contour(c: &mut Canvas, p: Panel, pitch: &[f64], frames: usize, lo: f64, hi: f64, color: Rgb<u8>) {
    let mut prev: Option<(i64, i64)> = None;
    for (i, &f) in pitch.iter().enumerate() {
        if f <= 0.0 || !f.is_finite() {
            prev = None;
            continue;
        }
        let pt = p.at(i as f64 / (frames.max(2) - 1) as f64, (f - lo) / (hi - lo));
        if let Some(q) = prev {
            c.line(q, pt, color);
        } else {
            c.put(pt.0, pt.1, color);
        }
        prev = Some(pt);
    }
}

/// Recorded mel (top), synthesized mel (middle) and both pitch contours
/// (bottom) on a shared frame axis.
pub fn pitch_contour(truth_mel: &Tensor, truth_pitch: &[f64], mel: &Tensor, pitch: &[f64], out: &Path) -> Result<()> {
    let frames = truth_mel.rows().max(mel.rows()).max(1);
    let px = (6 * frames).clamp(300, 1200) as u32;
    let width = |n: usize| (px as u64 * n as u64 / frames as u64).max(1) as u32;
    let panel_h = 140;
    let top = Panel {
        x: 10,
        y: 10,
        w: width(truth_mel.rows()),
        h: panel_h,
    };
    let mid = Panel {
        x: 10,
        y: 10 + panel_h + 10,
        w: width(mel.rows()),
        h: panel_h,
    };
    let bottom = Panel {
        x: 10,
        y: 10 + 2 * (panel_h + 10),
        w: px,
        h: 180,
    };
    let mut c = Canvas::new(px + 20, bottom.y + bottom.h + 10);
    let (lo, hi) = min_max(truth_mel.data().iter().chain(mel.data()).copied());
    // mel bins run bottom to top
    cells(&mut c, top, &transpose(truth_mel), lo, hi, true);
    cells(&mut c, mid, &transpose(mel), lo, hi, true);
    let voiced = truth_pitch.iter().chain(pitch).copied().filter(|&f| f > 0.0);
    let (plo, phi) = min_max(voiced);
    let pad = 0.05 * (phi - plo);
    let (plo, phi) = (plo - pad, phi + pad);
    let ticks = 4;
    for k in 1..ticks {
        let v = k as f64 / ticks as f64;
        c.line(bottom.at(0.0, v), bottom.at(1.0, v), GRID);
    }
    contour(&mut c, bottom, truth_pitch, frames, plo, phi, TRUTH);
    contour(&mut c, bottom, pitch, frames, plo, phi, SYNTH);
    c.border(bottom);
    c.save(out)
}

/// Total loss per logged step on a log scale, coloured by stage, with
/// separators at stage changes.
pub fn losses(records: &[LogRecord], out: &Path) -> Result<()> {
    let p = Panel {
        x: 10,
        y: 10,
        w: 800,
        h: 400,
    };
    let mut c = Canvas::new(p.w + 20, p.h + 20);
    let logs: Vec<f64> = records.iter().map(|r| r.total.max(1e-12).log10()).collect();
    let (lo, hi) = min_max(logs.iter().copied());
    let n = records.len().max(2) - 1;
    for decade in lo.ceil() as i64..=hi.floor() as i64 {
        let v = (decade as f64 - lo) / (hi - lo);
        c.line(p.at(0.0, v), p.at(1.0, v), GRID);
    }
    for (i, w) in records.windows(2).enumerate() {
        if w[0].stage != w[1].stage {
            let u = (i as f64 + 0.5) / n as f64;
            c.line(p.at(u, 0.0), p.at(u, 1.0), GRID);
        }
    }
    let mut prev: Option<(i64, i64)> = None;
    for (i, (r, v)) in records.iter().zip(&logs).enumerate() {
        let pt = p.at(i as f64 / n as f64, (v - lo) / (hi - lo));
        let color = STAGE_COLORS[(r.stage as usize).clamp(1, 3) - 1];
        match prev {
            Some(q) if i > 0 && records[i - 1].stage == r.stage => c.line(q, pt, color),
            _ => c.put(pt.0, pt.1, color),
        }
        prev = Some(pt);
    }
    c.border(p);
    c.save(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_ends() {
        assert_eq!(colormap(0.0), Rgb([30, 20, 80]));
        assert_eq!(colormap(1.0), Rgb([250, 230, 40]));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
        assert_eq!(colormap(7.0), colormap(1.0));
    }

    #[test]
    fn degenerate_ranges_widen() {
        assert_eq!(min_max([2.0, 2.0].into_iter()), (1.5, 2.5));
        assert_eq!(min_max(std::iter::empty()), (0.0, 1.0));
        assert_eq!(min_max([f64::NAN, 1.0, 3.0].into_iter()), (1.0, 3.0));
    }

    #[test]
    fn line_hits_both_endpoints() {
        let mut c = Canvas::new(20, 20);
        c.line((1, 2), (15, 9), SYNTH);
        assert_eq!(*c.img.get_pixel(1, 2), SYNTH);
        assert_eq!(*c.img.get_pixel(15, 9), SYNTH);
        c.line((3, 3), (3, 3), TRUTH);
        assert_eq!(*c.img.get_pixel(3, 3), TRUTH);
    }

    #[test]
    fn heatmap_brightest_cell_is_yellow() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::matrix(2, 3, vec![0.1, 0.8, 0.1, 0.2, 0.6, 0.2]).unwrap();
        let out = dir.path().join("a.png");
        heatmap(&a, &out).unwrap();
        let img = image::open(&out).unwrap().to_rgb8();
        let cell = (480 / 3).clamp(8, 80) as u32;
        assert_eq!(*img.get_pixel(10 + cell + cell / 2, 15), colormap(1.0));
    }
}
