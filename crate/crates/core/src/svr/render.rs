// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic rasterizer for scenes. No anti-aliasing: a pixel takes
//! the object color when its center lies inside the shape.

use image::RgbImage;

use crate::error::{Error, Result};

use super::scene::{Scene, Size};
use super::vocab::{ShapeKind, Vocabulary};

pub const CANVAS: u32 = 128;
pub const CELL: u32 = 32;
pub const BACKGROUND: [u8; 3] = [200, 200, 200];
pub const MASK_TILE: [u8; 3] = [128, 128, 128];
pub const MASK_GLYPH: [u8; 3] = [255, 255, 255];
/// Top-left corner of the pattern panel (bottom-right 96×96 region).
pub const PANEL_ORIGIN: (u32, u32) = (CANVAS - 3 * CELL, CANVAS - 3 * CELL);
/// Background margin inside each panel tile.
const TILE_GAP: u32 = 2;

fn half_extent(size: Size) -> f64 {
    match size {
        Size::Large => 13.0,
        Size::Small => 7.0,
    }
}

/// Renders `scene` to a 128×128 RGB buffer.
pub fn render_scene(scene: &Scene, vocab: &Vocabulary) -> Result<RgbImage> {
    let mut img = RgbImage::from_pixel(CANVAS, CANVAS, image::Rgb(BACKGROUND));

    if let Some(panel) = &scene.panel {
        for (r, row) in panel.grid.iter().enumerate() {
            for (c, color_id) in row.iter().enumerate() {
                let x0 = PANEL_ORIGIN.0 + c as u32 * CELL;
                let y0 = PANEL_ORIGIN.1 + r as u32 * CELL;
                let masked = panel.masked_cell == (r as u8, c as u8);
                let fill = if masked { MASK_TILE } else { lookup_rgb(vocab, color_id)? };
                for y in y0 + TILE_GAP..y0 + CELL - TILE_GAP {
                    for x in x0 + TILE_GAP..x0 + CELL - TILE_GAP {
                        img.put_pixel(x, y, image::Rgb(fill));
                    }
                }
                if masked {
                    draw_question_mark(&mut img, x0, y0);
                }
            }
        }
    }

    for obj in &scene.objects {
        let kind = ShapeKind::from_id(&obj.shape)
            .ok_or_else(|| Error::Invalid(format!("no rasterizer for shape `{}`", obj.shape)))?;
        let rgb = lookup_rgb(vocab, &obj.color)?;
        let cx = f64::from(u32::from(obj.cell.0) * CELL) + f64::from(CELL) / 2.0;
        let cy = f64::from(u32::from(obj.cell.1) * CELL) + f64::from(CELL) / 2.0;
        let r = half_extent(obj.size);
        let x0 = u32::from(obj.cell.0) * CELL;
        let y0 = u32::from(obj.cell.1) * CELL;
        for y in y0..y0 + CELL {
            for x in x0..x0 + CELL {
                let u = (f64::from(x) + 0.5 - cx) / r;
                let v = (f64::from(y) + 0.5 - cy) / r;
                if inside(kind, u, v) {
                    img.put_pixel(x, y, image::Rgb(rgb));
                }
            }
        }
    }
    Ok(img)
}

fn lookup_rgb(vocab: &Vocabulary, id: &str) -> Result<[u8; 3]> {
    vocab
        .color(id)
        .ok_or_else(|| Error::Invalid(format!("unknown color `{id}`")))?
        .rgb()
}

/// Point-in-shape test in normalized coordinates: the shape fits in the
/// square `[-1, 1]²`, `v` grows downward.
pub fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    match kind {
        ShapeKind::Circle => u * u + v * v <= 1.0,
        ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
        ShapeKind::Triangle => in_polygon(&[(0.0, -1.0), (1.0, 0.85), (-1.0, 0.85)], u, v),
        ShapeKind::Ellipse => u * u + (v / 0.6).powi(2) <= 1.0,
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeKind::Star => in_polygon(&star_points(), u, v),
        ShapeKind::Heart => {
            // Implicit heart curve, flipped so the point faces down.
            let x = u * 1.15;
            let y = -v * 1.15 + 0.25;
            (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
        }
        ShapeKind::Arrow => in_polygon(
            &[(-1.0, -0.3), (0.1, -0.3), (0.1, -0.8), (1.0, 0.0), (0.1, 0.8), (0.1, 0.3), (-1.0, 0.3)],
            u,
            v,
        ),
        ShapeKind::Moon => u * u + v * v <= 1.0 && (u - 0.45).powi(2) + (v + 0.15).powi(2) > 0.7 * 0.7,
        ShapeKind::Pentagon => in_polygon(&regular_polygon(5, -std::f64::consts::FRAC_PI_2), u, v),
        ShapeKind::Hexagon => in_polygon(&regular_polygon(6, 0.0), u, v),
        ShapeKind::Cross => {
            (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
        }
        ShapeKind::Ring => {
            let d2 = u * u + v * v;
            (0.55 * 0.55..=1.0).contains(&d2)
        }
        ShapeKind::Semicircle => u * u + (v - 0.45).powi(2) <= 1.0 && v <= 0.45,
        ShapeKind::Trapezoid => in_polygon(&[(-0.5, -0.7), (0.5, -0.7), (1.0, 0.7), (-1.0, 0.7)], u, v),
    }
}

fn regular_polygon(n: usize, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

fn star_points() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / 5.0;
            let r = if i % 2 == 0 { 1.0 } else { 0.42 };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Even–odd rule.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

const QUESTION_GLYPH: [&str; 7] = [".###.", "#...#", "....#", "...#.", "..#..", ".....", "..#.."];

fn draw_question_mark(img: &mut RgbImage, x0: u32, y0: u32) {
    const PX: u32 = 3;
    let gx = x0 + (CELL - 5 * PX) / 2;
    let gy = y0 + (CELL - 7 * PX) / 2;
    for (r, line) in QUESTION_GLYPH.iter().enumerate() {
        for (c, ch) in line.bytes().enumerate() {
            if ch == b'#' {
                for dy in 0..PX {
                    for dx in 0..PX {
                        img.put_pixel(gx + c as u32 * PX + dx, gy + r as u32 * PX + dy, image::Rgb(MASK_GLYPH));
                    }
                }
            }
        }
    }
}

/// PNG-encodes `img` into memory.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svr::scene::SceneObject;

    #[test]
    fn empty_scene_is_background() {
        let img = render_scene(&Scene::empty(0), &Vocabulary::default()).unwrap();
        assert!(img.pixels().all(|p| p.0 == BACKGROUND));
    }

    #[test]
    fn every_shape_fills_reasonably() {
        for kind in ShapeKind::ALL {
            let n = (0..64 * 64)
                .filter(|i| {
                    let u = (f64::from(i % 64) + 0.5) / 32.0 - 1.0;
                    let v = (f64::from(i / 64) + 0.5) / 32.0 - 1.0;
                    inside(kind, u, v)
                })
                .count();
            assert!(n > 400 && n < 4096, "{kind:?} covers {n} px");
        }
    }

    #[test]
    fn shapes_are_distinct() {
        let mask = |k| -> Vec<bool> {
            (0..32 * 32)
                .map(|i| inside(k, (f64::from(i % 32) + 0.5) / 16.0 - 1.0, (f64::from(i / 32) + 0.5) / 16.0 - 1.0))
                .collect()
        };
        let masks: Vec<_> = ShapeKind::ALL.iter().map(|&k| mask(k)).collect();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j], "{:?} vs {:?}", ShapeKind::ALL[i], ShapeKind::ALL[j]);
            }
        }
    }

    #[test]
    fn small_objects_fit_smaller_box() {
        let vocab = Vocabulary::default();
        let scene = Scene {
            objects: vec![SceneObject {
                shape: "square".into(),
                color: "navy".into(),
                size: Size::Small,
                cell: (3, 3),
            }],
            panel: None,
            seed: 0,
        };
        let img = render_scene(&scene, &vocab).unwrap();
        let navy = vocab.color("navy").unwrap().rgb().unwrap();
        let xs: Vec<u32> = img.enumerate_pixels().filter(|(_, _, p)| p.0 == navy).map(|(x, _, _)| x).collect();
        let w = xs.iter().max().unwrap() - xs.iter().min().unwrap() + 1;
        assert!(w <= 14, "small square spans {w} px");
    }
}
