//! Plot and panel rendering for experiment outputs: heatmaps, line plots,
//! bar charts, class-mask colorings, prediction overlays and sample
//! grids. Everything renders straight into PNG; numbers carry a tiny
//! 3x5 pixel font so the images are self-describing, while the exact data
//! always lives in the JSON/CSV emitted next to them.

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::num::Pixel;
use crate::synth::quantize;
use crate::tensor::Tensor;
use image::{Rgb, RgbImage};
use std::path::Path;

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// palettes
// ---------------------------------------------------------------------------

/// Distinct colors for class masks; index 0 (background) is near-black.
pub fn class_color(class: usize) -> Rgb<u8> {
    const COLORS: [[u8; 3]; 10] = [
        [25, 25, 30],
        [231, 76, 60],
        [46, 204, 113],
        [52, 152, 219],
        [241, 196, 15],
        [155, 89, 182],
        [26, 188, 156],
        [230, 126, 34],
        [236, 240, 241],
        [127, 140, 141],
    ];
    Rgb(COLORS[class % COLORS.len()])
}

/// Viridis-like ramp for heatmap cells, v in [0, 1].
fn ramp(v: f64) -> Rgb<u8> {
    let anchors: [(f64, [f64; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for w in anchors.windows(2) {
        let (a, ca) = w[0];
        let (b, cb) = w[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return Rgb([
                (ca[0] + (cb[0] - ca[0]) * t) as u8,
                (ca[1] + (cb[1] - ca[1]) * t) as u8,
                (ca[2] + (cb[2] - ca[2]) * t) as u8,
            ]);
        }
    }
    Rgb([253, 231, 37])
}

// ---------------------------------------------------------------------------
// tiny digit font
// ---------------------------------------------------------------------------

// 3x5 glyphs for 0-9, '.', '-', each row a 3-bit pattern.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let g = glyph(ch);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..3 {
                if row & (0b100 >> rx) != 0 {
                    let px = cx + rx as i64;
                    let py = y + ry as i64;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height()
                    {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

const SERIES_COLORS: [[u8; 3]; 6] = [
    [52, 152, 219],
    [231, 76, 60],
    [46, 204, 113],
    [241, 196, 15],
    [155, 89, 182],
    [52, 73, 94],
];

// ---------------------------------------------------------------------------
// plots
// ---------------------------------------------------------------------------

/// Heatmap of a (rows x cols) grid; NaN cells render gray. Row and column
/// numeric labels are drawn along the edges.
pub fn heatmap(
    grid: &[Vec<f64>],
    row_labels: &[f64],
    col_labels: &[f64],
    path: &Path,
) -> Result<()> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Err(Error::config("heatmap needs a nonempty grid"));
    }
    let cell = 28u32;
    let margin = 30u32;
    let w = margin + cols as u32 * cell + 8;
    let h = margin + rows as u32 * cell + 8;
    let mut img = RgbImage::from_pixel(w, h, Rgb([250, 250, 250]));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for row in grid {
        for &v in row {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let span = (hi - lo).max(1e-12);
    for (ri, row) in grid.iter().enumerate() {
        for (ci, &v) in row.iter().enumerate() {
            let color = if v.is_finite() {
                ramp((v - lo) / span)
            } else {
                Rgb([120, 120, 120])
            };
            for dy in 0..cell - 1 {
                for dx in 0..cell - 1 {
                    img.put_pixel(
                        margin + ci as u32 * cell + dx,
                        margin + ri as u32 * cell + dy,
                        color,
                    );
                }
            }
            if v.is_finite() {
                draw_text(
                    &mut img,
                    (margin + ci as u32 * cell + 3) as i64,
                    (margin + ri as u32 * cell + 10) as i64,
                    &fmt_tick(v),
                    Rgb([20, 20, 20]),
                );
            }
        }
    }
    for (ri, &v) in row_labels.iter().enumerate().take(rows) {
        draw_text(
            &mut img,
            2,
            (margin + ri as u32 * cell + 10) as i64,
            &fmt_tick(v),
            Rgb([0, 0, 0]),
        );
    }
    for (ci, &v) in col_labels.iter().enumerate().take(cols) {
        draw_text(
            &mut img,
            (margin + ci as u32 * cell + 2) as i64,
            14,
            &fmt_tick(v),
            Rgb([0, 0, 0]),
        );
    }
    save_image(&img, path)
}

/// Line plot of one or more (x, y) series on shared axes.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::config("line_plot needs data"));
    }
    let (w, h) = (480u32, 320u32);
    let (ml, mr, mt, mb) = (44.0, 12.0, 14.0, 30.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w as f64 - ml - mr);
    let py = |y: f64| (h as f64 - mb) - (y - y0) / (y1 - y0) * (h as f64 - mt - mb);

    // axes and ticks
    let axis = Rgb([60, 60, 60]);
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);
    for i in 0..=4 {
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let yy = py(yv);
        draw_line(&mut img, ml - 3.0, yy, ml, yy, axis);
        draw_text(&mut img, 2, yy as i64 - 2, &fmt_tick(yv), axis);
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let xx = px(xv);
        draw_line(&mut img, xx, h as f64 - mb, xx, h as f64 - mb + 3.0, axis);
        draw_text(&mut img, xx as i64 - 6, (h - 22) as i64, &fmt_tick(xv), axis);
    }

    for (si, (_, pts)) in series.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[si % SERIES_COLORS.len()]);
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in sorted.windows(2) {
            draw_line(
                &mut img,
                px(pair[0].0),
                py(pair[0].1),
                px(pair[1].0),
                py(pair[1].1),
                color,
            );
        }
        for &(x, y) in &sorted {
            let (cx, cy) = (px(x), py(y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (qx, qy) = (cx as i64 + dx, cy as i64 + dy);
                    if qx >= 0 && qy >= 0 && (qx as u32) < w && (qy as u32) < h {
                        img.put_pixel(qx as u32, qy as u32, color);
                    }
                }
            }
        }
        // series swatch in the top margin
        let sx = ml as i64 + 60 * si as i64;
        for dx in 0..14 {
            let y = 4u32;
            if (sx + dx) >= 0 {
                img.put_pixel((sx + dx) as u32, y, color);
            }
        }
    }
    save_image(&img, path)
}

/// Bar chart with optional error whiskers, one bar per labelled value.
pub fn bar_chart(values: &[(String, f64, f64)], path: &Path) -> Result<()> {
    if values.is_empty() {
        return Err(Error::config("bar_chart needs data"));
    }
    let (w, h) = (440u32, 300u32);
    let (ml, mr, mt, mb) = (44.0, 12.0, 16.0, 26.0);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let hi = values
        .iter()
        .map(|(_, v, e)| v + e)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-9);
    let py = |v: f64| (h as f64 - mb) - v.max(0.0) / hi * (h as f64 - mt - mb);
    let axis = Rgb([60, 60, 60]);
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);
    for i in 0..=4 {
        let yv = hi * i as f64 / 4.0;
        let yy = py(yv);
        draw_line(&mut img, ml - 3.0, yy, ml, yy, axis);
        draw_text(&mut img, 2, yy as i64 - 2, &fmt_tick(yv), axis);
    }
    let n = values.len() as f64;
    let slot = (w as f64 - ml - mr) / n;
    for (i, (_, v, err)) in values.iter().enumerate() {
        let color = Rgb(SERIES_COLORS[i % SERIES_COLORS.len()]);
        let bx0 = ml + slot * i as f64 + slot * 0.2;
        let bx1 = ml + slot * i as f64 + slot * 0.8;
        let top = py(*v);
        for x in bx0 as u32..bx1 as u32 {
            for y in top as u32..(h as f64 - mb) as u32 {
                img.put_pixel(x, y, color);
            }
        }
        if *err > 0.0 {
            let cx = (bx0 + bx1) / 2.0;
            draw_line(&mut img, cx, py(v - err), cx, py(v + err), axis);
            draw_line(&mut img, cx - 4.0, py(v + err), cx + 4.0, py(v + err), axis);
            draw_line(&mut img, cx - 4.0, py(v - err), cx + 4.0, py(v - err), axis);
        }
        draw_text(
            &mut img,
            bx0 as i64,
            (h - 20) as i64,
            &fmt_tick(*v),
            Rgb([0, 0, 0]),
        );
    }
    save_image(&img, path)
}

// ---------------------------------------------------------------------------
// image panels
// ---------------------------------------------------------------------------

/// Convert a [-1, 1] tensor to RGB bytes.
pub fn tensor_to_rgb(pixels: &Tensor<Pixel>) -> RgbImage {
    let (h, w) = pixels.hw();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([
                    quantize(pixels.channel(0)[y * w + x]),
                    quantize(pixels.channel(1)[y * w + x]),
                    quantize(pixels.channel(2)[y * w + x]),
                ]),
            );
        }
    }
    img
}

/// Color-code a class (or cluster) mask.
pub fn mask_to_rgb(mask: &Mask) -> RgbImage {
    let mut img = RgbImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            img.put_pixel(
                x as u32,
                y as u32,
                class_color(mask.labels[y * mask.width + x] as usize),
            );
        }
    }
    img
}

/// Blend a colored mask over the image; alpha in [0, 1].
pub fn overlay(pixels: &Tensor<Pixel>, mask: &Mask, alpha: f64) -> RgbImage {
    let base = tensor_to_rgb(pixels);
    let colored = mask_to_rgb(mask);
    let mut out = base.clone();
    for (o, (b, c)) in out
        .pixels_mut()
        .zip(base.pixels().zip(colored.pixels()))
    {
        for ch in 0..3 {
            o.0[ch] = ((1.0 - alpha) * b.0[ch] as f64 + alpha * c.0[ch] as f64) as u8;
        }
    }
    out
}

/// Tile images (and optional masks beneath them) into one grid panel.
pub fn tile_panel(tiles: &[RgbImage], cols: usize, pad: u32) -> Result<RgbImage> {
    if tiles.is_empty() {
        return Err(Error::config("tile_panel needs at least one tile"));
    }
    let tw = tiles[0].width();
    let th = tiles[0].height();
    let cols = cols.max(1);
    let rows = tiles.len().div_ceil(cols);
    let mut img = RgbImage::from_pixel(
        cols as u32 * (tw + pad) + pad,
        rows as u32 * (th + pad) + pad,
        Rgb([245, 245, 245]),
    );
    for (i, tile) in tiles.iter().enumerate() {
        if tile.width() != tw || tile.height() != th {
            return Err(Error::config("tile_panel tiles must share dimensions"));
        }
        let cx = (i % cols) as u32 * (tw + pad) + pad;
        let cy = (i / cols) as u32 * (th + pad) + pad;
        for y in 0..th {
            for x in 0..tw {
                img.put_pixel(cx + x, cy + y, *tile.get_pixel(x, y));
            }
        }
    }
    Ok(img)
}

/// Grid of sampled images, written as one PNG.
pub fn sample_grid(samples: &[Tensor<Pixel>], cols: usize, path: &Path) -> Result<()> {
    let tiles: Vec<RgbImage> = samples.iter().map(tensor_to_rgb).collect();
    let panel = tile_panel(&tiles, cols, 2)?;
    save_image(&panel, path)
}
