//! Top-down images of BEV maps with box overlays, as binary PPM.
//!
//! Forward (+x) points up and left (+y) points left, so cell `(row, col)`
//! lands on pixel `(cols - 1 - col, rows - 1 - row)`.

use bev_erpn_core::bev::{GridSpec, RgbMap};
use bev_erpn_core::class::ObjectClass;
use bev_erpn_core::geometry::{corners, OrientedBox};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn from_map(map: &RgbMap) -> Self {
        let (rows, cols) = (map.rows(), map.cols());
        let mut c = Self::new(cols, rows);
        for row in 0..rows {
            for col in 0..cols {
                let px = map.cell(row, col).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
                c.pixels[(rows - 1 - row) * cols + (cols - 1 - col)] = px;
            }
        }
        c
    }

    pub fn get(&self, u: usize, v: usize) -> Rgb {
        self.pixels[v * self.width + u]
    }

    /// Sets a pixel; coordinates outside the canvas are ignored.
    pub fn put(&mut self, u: i64, v: i64, color: Rgb) {
        if (0..self.width as i64).contains(&u) && (0..self.height as i64).contains(&v) {
            self.pixels[v as usize * self.width + u as usize] = color;
        }
    }

    /// Bresenham segment between two pixels, both ends included.
    pub fn line(&mut self, (u0, v0): (i64, i64), (u1, v1): (i64, i64), color: Rgb) {
        let (du, dv) = ((u1 - u0).abs(), -(v1 - v0).abs());
        let (su, sv) = (if u0 < u1 { 1 } else { -1 }, if v0 < v1 { 1 } else { -1 });
        let (mut u, mut v, mut err) = (u0, v0, du + dv);
        loop {
            self.put(u, v, color);
            if u == u1 && v == v1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dv {
                err += dv;
                u += su;
            }
            if e2 <= du {
                err += du;
                v += sv;
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

/// Continuous pixel position of a BEV point.
pub fn bev_to_pixel(x: f64, y: f64, grid: &GridSpec) -> (f64, f64) {
    let g = grid.cell_size();
    ((grid.y_range.1 - y) / g, (grid.x_range.1 - x) / g)
}

fn pixel(x: f64, y: f64, grid: &GridSpec) -> (i64, i64) {
    let (u, v) = bev_to_pixel(x, y, grid);
    (u.floor() as i64, v.floor() as i64)
}

pub fn class_color(class: ObjectClass) -> Rgb {
    match class {
        ObjectClass::Car => [255, 255, 0],
        ObjectClass::Van | ObjectClass::Truck | ObjectClass::Tram => [255, 128, 0],
        ObjectClass::Pedestrian | ObjectClass::PersonSitting => [0, 255, 255],
        ObjectClass::Cyclist => [255, 0, 255],
        ObjectClass::Misc => [128, 128, 128],
    }
}

pub const HEADING_COLOR: Rgb = [255, 255, 255];

/// Pixel segments drawn for a box: the four edges, then the heading tick
/// from the center to the middle of the front edge.
pub fn box_segments(b: &OrientedBox, grid: &GridSpec) -> Vec<((i64, i64), (i64, i64))> {
    let poly = corners(b);
    let v = poly.vertices();
    let mut segs: Vec<_> = (0..v.len())
        .map(|i| {
            let (a, c) = (v[i], v[(i + 1) % v.len()]);
            (pixel(a[0], a[1], grid), pixel(c[0], c[1], grid))
        })
        .collect();
    let (s, c) = b.phi.sin_cos();
    let front = (b.cx + c * b.l / 2.0, b.cy + s * b.l / 2.0);
    segs.push((pixel(b.cx, b.cy, grid), pixel(front.0, front.1, grid)));
    segs
}

pub fn draw_box(canvas: &mut Canvas, b: &OrientedBox, class: ObjectClass, grid: &GridSpec) {
    let segs = box_segments(b, grid);
    let (tick, edges) = segs.split_last().expect("a box has edges");
    for &(p, q) in edges {
        canvas.line(p, q, class_color(class));
    }
    canvas.line(tick.0, tick.1, HEADING_COLOR);
}
