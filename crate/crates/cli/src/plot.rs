//! Four-panel learning-curve image: VRMSE, NEPS low, NEPS mid, NEPS high
//! against step, in a 2x2 grid with axes and no text.

use std::path::Path;

use anyhow::Result;
use flexitok::pipeline::CurveRow;
use image::{Rgb, RgbImage};

const PANEL_W: u32 = 480;
const PANEL_H: u32 = 320;
const MARGIN: i64 = 24;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const COLOURS: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([44, 160, 44]), Rgb([255, 127, 14]), Rgb([214, 39, 40])];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn panel(img: &mut RgbImage, ox: i64, oy: i64, pts: &[(f64, f64)], colour: Rgb<u8>) {
    let (x0, x1) = (ox + MARGIN, ox + PANEL_W as i64 - MARGIN / 2);
    let (y0, y1) = (oy + MARGIN / 2, oy + PANEL_H as i64 - MARGIN);
    for i in 1..4 {
        let y = y0 + (y1 - y0) * i / 4;
        line(img, (x0, y), (x1, y), GRID);
    }
    line(img, (x0, y1), (x1, y1), AXIS);
    line(img, (x0, y0), (x0, y1), AXIS);
    if pts.is_empty() {
        return;
    }
    let (smin, smax) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let vmax = pts.iter().fold(f64::MIN, |m, p| m.max(p.1));
    let vmin = pts.iter().fold(f64::MAX, |m, p| m.min(p.1)).min(0.0);
    let sx = |s: f64| x0 + ((s - smin) / (smax - smin).max(1.0) * (x1 - x0) as f64).round() as i64;
    let sy = |v: f64| y1 - ((v - vmin) / (vmax - vmin).max(1e-12) * (y1 - y0) as f64).round() as i64;
    let px: Vec<(i64, i64)> = pts.iter().map(|&(s, v)| (sx(s), sy(v))).collect();
    for w in px.windows(2) {
        line(img, w[0], w[1], colour);
    }
    for &(x, y) in &px {
        for (dx, dy) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            put(img, x + dx, y + dy, colour);
        }
    }
}

pub fn render(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PANEL_W * 2, PANEL_H * 2, BG);
    let series: [fn(&CurveRow) -> Option<f64>; 4] = [|r| r.vrmse, |r| r.neps_low, |r| r.neps_mid, |r| r.neps_high];
    for (i, f) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> =
            rows.iter().filter_map(|r| f(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v))).collect();
        let (ox, oy) = ((i % 2) as i64 * PANEL_W as i64, (i / 2) as i64 * PANEL_H as i64);
        panel(&mut img, ox, oy, &pts, COLOURS[i]);
    }
    img.save(path)?;
    Ok(())
}
