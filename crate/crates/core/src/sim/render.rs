//! Orthographic top-down rasterizer.
//!
//! Shapes are drawn with analytic one-pixel anti-aliasing so that sub-pixel
//! displacements still change pixel values. Colors are fixed per body kind;
//! the gripper marker's radius encodes its aperture and its brightness
//! encodes height.

use std::path::Path;

use super::state::{BodyKind, Contact, SceneState};
use super::task::SimParams;

pub const BACKGROUND: [f32; 3] = [0.1, 0.1, 0.1];
const TARGET_COLOR: [f32; 3] = [0.1, 0.8, 0.2];
const RIGID_COLOR: [f32; 3] = [0.9, 0.15, 0.1];
const HANDLE_COLOR: [f32; 3] = [0.95, 0.9, 0.1];
const HINGED_COLOR: [f32; 3] = [0.6, 0.4, 0.2];
const BUTTON_COLOR: [f32; 3] = [1.0, 0.55, 0.0];
const GRIPPER_COLOR: [f32; 3] = [0.25, 0.45, 1.0];

const TARGET_RADIUS: f64 = 0.02;
pub const RIGID_RADIUS: f64 = 0.02;
const HANDLE_RADIUS: f64 = 0.012;
const BUTTON_RADIUS: f64 = 0.02;
const HINGED_HALF: f64 = 0.025;
const GRIPPER_MAX_RADIUS: f64 = 0.05;
const GRIPPER_ALPHA: f32 = 0.6;

/// RGB image, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = self.data[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// 8-bit quantization.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Image {
            width,
            height,
            data: bytes.iter().map(|b| f32::from(*b) / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        save_rgb8_png(path, self.width, self.height, &self.to_rgb8())
    }
}

pub fn save_rgb8_png(
    path: &Path,
    width: usize,
    height: usize,
    bytes: &[u8],
) -> Result<(), image::ImageError> {
    image::save_buffer(
        path,
        bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )
}

/// Loads an 8-bit RGB PNG; returns (width, height, bytes).
pub fn load_rgb8_png(path: &Path) -> Result<(usize, usize, Vec<u8>), image::ImageError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

struct Canvas {
    img: Image,
    half: f64,
    px_per_m: f64,
}

impl Canvas {
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x + self.half) * self.px_per_m,
            (self.half - y) * self.px_per_m,
        )
    }

    /// Draws a shape given its signed distance (in pixels, negative inside).
    fn fill(
        &mut self,
        center: (f64, f64),
        extent_px: f64,
        color: [f32; 3],
        alpha: f32,
        sdf: impl Fn(f64, f64) -> f64,
    ) {
        let (cx, cy) = self.to_pixel(center.0, center.1);
        let w = self.img.width as f64;
        let h = self.img.height as f64;
        let x0 = (cx - extent_px - 1.0).floor().max(0.0);
        let x1 = (cx + extent_px + 1.0).ceil().min(w);
        let y0 = (cy - extent_px - 1.0).floor().max(0.0);
        let y1 = (cy + extent_px + 1.0).ceil().min(h);
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for py in y0 as usize..y1 as usize {
            for px in x0 as usize..x1 as usize {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                let coverage = (0.5 - sdf(dx, dy)).clamp(0.0, 1.0) as f32;
                if coverage > 0.0 {
                    self.img.blend(px, py, color, coverage * alpha);
                }
            }
        }
    }

    fn disc(&mut self, center: (f64, f64), radius_m: f64, color: [f32; 3], alpha: f32) {
        let r = radius_m * self.px_per_m;
        if r <= 0.0 {
            return;
        }
        self.fill(center, r, color, alpha, |dx, dy| (dx * dx + dy * dy).sqrt() - r);
    }

    fn square(&mut self, center: (f64, f64), half_m: f64, color: [f32; 3]) {
        let r = half_m * self.px_per_m;
        self.fill(center, r, color, 1.0, |dx, dy| dx.abs().max(dy.abs()) - r);
    }
}

fn shade(color: [f32; 3], z: f64) -> [f32; 3] {
    let k = (0.75 + 2.5 * z).clamp(0.25, 1.0) as f32;
    [color[0] * k, color[1] * k, color[2] * k]
}

/// Renders the scene at `resolution`×`resolution` pixels.
///
/// Draw order is targets, articulated bodies, handles, rigid objects, then the
/// gripper (translucent) on top.
pub fn render(state: &SceneState, resolution: usize, params: &SimParams) -> Image {
    let half = params.view_half_extent;
    let mut canvas = Canvas {
        img: Image::filled(resolution, resolution, BACKGROUND),
        half,
        px_per_m: resolution as f64 / (2.0 * half),
    };
    let at = |p: crate::geometry::Vec3| (p.x, p.y);

    for body in state.objects.values() {
        if body.kind == BodyKind::Target {
            canvas.disc(at(body.pos), TARGET_RADIUS, TARGET_COLOR, 1.0);
        }
    }
    for (name, art) in &state.articulations {
        let Some(body) = state.objects.get(name) else {
            continue;
        };
        match art.contact {
            Contact::Hook => canvas.square(at(body.pos), HINGED_HALF, HINGED_COLOR),
            Contact::Push => canvas.disc(at(body.pos), BUTTON_RADIUS, BUTTON_COLOR, 1.0),
        }
    }
    for body in state.objects.values() {
        if let BodyKind::Handle { .. } = body.kind {
            canvas.disc(at(body.pos), HANDLE_RADIUS, HANDLE_COLOR, 1.0);
        }
    }
    for body in state.objects.values() {
        if let BodyKind::Rigid { .. } = body.kind {
            canvas.disc(at(body.pos), RIGID_RADIUS, shade(RIGID_COLOR, body.pos.z), 1.0);
        }
    }
    canvas.disc(
        at(state.gripper_pos),
        GRIPPER_MAX_RADIUS * state.gripper_aperture,
        shade(GRIPPER_COLOR, state.gripper_pos.z),
        GRIPPER_ALPHA,
    );
    canvas.img
}
