//! PNG figure emission: quiver-over-heatmap advection plots, branch montages
//! and error curves. Rendering is hand-rolled on top of `image`.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::Result;
use crate::phycell::AdvectionField;
use crate::scalar::Scalar;

/// Intensity colormap: dark blue through cyan and yellow to red.
fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.25 {
        let t = v / 0.25;
        (0.0, t * 0.6, 0.4 + 0.6 * t)
    } else if v < 0.5 {
        let t = (v - 0.25) / 0.25;
        (0.0, 0.6 + 0.4 * t, 1.0 - t)
    } else if v < 0.75 {
        let t = (v - 0.5) / 0.25;
        (t, 1.0, 0.0)
    } else {
        let t = (v - 0.75) / 0.25;
        (1.0, 1.0 - t, 0.0)
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
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

fn heatmap<F: Scalar>(frame: &Array2<F>, scale: usize) -> RgbImage {
    let (h, w) = frame.dim();
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for i in 0..h {
        for j in 0..w {
            let c = colormap(frame[[i, j]].as_f64());
            for di in 0..scale {
                for dj in 0..scale {
                    img.put_pixel((j * scale + dj) as u32, (i * scale + di) as u32, c);
                }
            }
        }
    }
    img
}

/// Quiver plot of the advection field over an intensity background. The field
/// lives at latent resolution and is upsampled x4 over the pixel-domain
/// background; arrows are drawn every `stride` latent cells.
pub fn plot_advection<F: Scalar>(
    field: &AdvectionField<F>,
    background: &Array2<F>,
    out_path: &Path,
    stride: usize,
) -> Result<()> {
    let upsample = 4usize;
    let mut img = heatmap(background, 1);
    let (fh, fw) = field.u_x.dim();
    let stride = stride.max(1);
    // scale arrows so the largest one spans about two strides of pixels
    let max_mag = field
        .u_x
        .iter()
        .zip(field.u_y.iter())
        .map(|(&x, &y)| (x.as_f64().powi(2) + y.as_f64().powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    let arrow_px = (stride * upsample * 2) as f64;
    let scale = if max_mag > 0.0 { arrow_px / max_mag } else { 0.0 };
    let white = Rgb([255, 255, 255]);
    for i in (0..fh).step_by(stride) {
        for j in (0..fw).step_by(stride) {
            // arrow base at the cell center in pixel coordinates
            let cy = (i * upsample + upsample / 2) as f64;
            let cx = (j * upsample + upsample / 2) as f64;
            // u_x moves along rows (down), u_y along columns (right)
            let vy = field.u_x[[i, j]].as_f64() * scale;
            let vx = field.u_y[[i, j]].as_f64() * scale;
            let tip_x = cx + vx;
            let tip_y = cy + vy;
            draw_line(&mut img, cx as i64, cy as i64, tip_x as i64, tip_y as i64, white);
            // arrowhead: two short back-angled segments
            let mag = (vx * vx + vy * vy).sqrt();
            if mag > 1.0 {
                let (ux, uy) = (vx / mag, vy / mag);
                let head = (mag * 0.3).min(4.0);
                for side in [-1.0, 1.0] {
                    let hx = tip_x - head * (ux + side * 0.5 * uy);
                    let hy = tip_y - head * (uy - side * 0.5 * ux);
                    draw_line(&mut img, tip_x as i64, tip_y as i64, hx as i64, hy as i64, white);
                }
            }
        }
    }
    img.save(out_path)?;
    Ok(())
}

/// Montage of frame rows (e.g. combined / physical / residual) with one
/// column per lead time and 2-pixel separators.
pub fn plot_montage<F: Scalar>(rows: &[Vec<&Array2<F>>], out_path: &Path) -> Result<()> {
    assert!(!rows.is_empty() && !rows[0].is_empty());
    let (h, w) = rows[0][0].dim();
    let sep = 2usize;
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let width = cols * w + (cols - 1) * sep;
    let height = rows.len() * h + (rows.len() - 1) * sep;
    let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([40, 40, 40]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            let tile = heatmap(*frame, 1);
            let ox = ci * (w + sep);
            let oy = ri * (h + sep);
            for i in 0..h {
                for j in 0..w {
                    img.put_pixel((ox + j) as u32, (oy + i) as u32, *tile.get_pixel(j as u32, i as u32));
                }
            }
        }
    }
    img.save(out_path)?;
    Ok(())
}

/// Line chart of one or more series against lead time (axes plus polylines).
pub fn plot_curves(series: &[(&str, Vec<f64>)], out_path: &Path) -> Result<()> {
    let width = 480u32;
    let height = 320u32;
    let margin = 32i64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, margin, height as i64 - margin, width as i64 - margin / 2, height as i64 - margin, axis);
    draw_line(&mut img, margin, height as i64 - margin, margin, margin / 2, axis);
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let max_val = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    if max_len < 2 {
        img.save(out_path)?;
        return Ok(());
    }
    let palette = [
        Rgb([220, 50, 47]),
        Rgb([38, 139, 210]),
        Rgb([133, 153, 0]),
        Rgb([181, 137, 0]),
    ];
    let plot_w = (width as i64 - margin - margin / 2) as f64;
    let plot_h = (height as i64 - margin - margin / 2) as f64;
    for (si, (_, values)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        for pair in values.windows(2).enumerate() {
            let (i, w2) = pair;
            let x0 = margin as f64 + plot_w * i as f64 / (max_len - 1) as f64;
            let x1 = margin as f64 + plot_w * (i + 1) as f64 / (max_len - 1) as f64;
            let y0 = (height as i64 - margin) as f64 - plot_h * w2[0] / max_val;
            let y1 = (height as i64 - margin) as f64 - plot_h * w2[1] / max_val;
            draw_line(&mut img, x0 as i64, y0 as i64, x1 as i64, y1 as i64, color);
        }
        // tick marks on the x axis
        for i in 0..max_len {
            let x = margin as f64 + plot_w * i as f64 / (max_len - 1) as f64;
            draw_line(
                &mut img,
                x as i64,
                height as i64 - margin,
                x as i64,
                height as i64 - margin + 4,
                axis,
            );
        }
    }
    img.save(out_path)?;
    Ok(())
}
