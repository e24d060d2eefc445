//! Minimal line charts of metrics streams. Each series is scaled to its own
//! range; the legend (colour, key, min, max) is printed to stdout.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};

const W: u32 = 800;
const H: u32 = 480;
const MARGIN: u32 = 40;
const COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

fn series(lines: &[serde_json::Value], key: &str) -> Result<Vec<(f64, f64)>> {
    lines
        .iter()
        .map(|v| {
            let x = v["step"].as_f64().context("metrics line without `step`")?;
            let y = v[key].as_f64().with_context(|| format!("metrics line without numeric `{key}`"))?;
            Ok((x, y))
        })
        .collect()
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
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

pub fn render(metrics: &Path, out: &Path, keys: &[String]) -> Result<()> {
    let text = std::fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let lines: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()?;
    if lines.is_empty() {
        bail!("{} has no metrics records", metrics.display());
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (MARGIN as i64, (H - MARGIN) as i64), ((W - MARGIN) as i64, (H - MARGIN) as i64), axis);
    line(&mut img, (MARGIN as i64, MARGIN as i64), (MARGIN as i64, (H - MARGIN) as i64), axis);
    let all: Vec<Vec<(f64, f64)>> = keys.iter().map(|k| series(&lines, k)).collect::<Result<_>>()?;
    let xmin = all.iter().flatten().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = all.iter().flatten().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    for (k, (key, pts)) in keys.iter().zip(&all).enumerate() {
        let c = COLORS[k % COLORS.len()];
        let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let to_px = |(x, y): (f64, f64)| {
            (
                MARGIN as i64 + ((x - xmin) / span(xmin, xmax) * pw).round() as i64,
                (H - MARGIN) as i64 - ((y - ymin) / span(ymin, ymax) * ph).round() as i64,
            )
        };
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0]), to_px(w[1]), Rgb(c));
        }
        if let [p] = pts.as_slice() {
            let (x, y) = to_px(*p);
            line(&mut img, (x - 2, y), (x + 2, y), Rgb(c));
        }
        println!("{key}: rgb({},{},{}) min={ymin} max={ymax}", c[0], c[1], c[2]);
    }
    img.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
