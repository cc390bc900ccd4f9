//! Procedural patch rasterizer. Cones are drawn directly in patch space
//! as a supersampled triangle whose stripe band edges pass exactly
//! through the projected keypoint lines, over an image-anchored
//! procedural background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BBox, NoiseParams, PatchImage, PATCH_SIZE};
use crate::cone::{ColorClass, ConeGeometry};
use crate::geometry::Point2;

const SUPER: usize = 3;
/// Vertical scale of the background gradient in image pixels.
const GRADIENT_SCALE_PX: f64 = 600.0;

/// 2D affine transform, `q = M p + t`.
#[derive(Debug, Clone, Copy)]
pub(super) struct Affine2 {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine2 {
    pub(super) fn identity() -> Self {
        Self { m: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] }
    }

    /// Rotation by `angle` and uniform `scale` about the patch center,
    /// then translation by `(tx, ty)`.
    pub(super) fn similarity_about_center(angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let c = 0.5 * PATCH_SIZE as f64;
        let (s, co) = angle.sin_cos();
        let m = [[scale * co, -scale * s], [scale * s, scale * co]];
        // t = center + (tx, ty) - M * center
        let t = [
            c + tx - (m[0][0] * c + m[0][1] * c),
            c + ty - (m[1][0] * c + m[1][1] * c),
        ];
        Self { m, t }
    }

    pub(super) fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.t[0],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.t[1],
        )
    }

    fn compose(&self, inner: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &inner.m;
        Affine2 {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * inner.t[0] + a[0][1] * inner.t[1] + self.t[0],
                a[1][0] * inner.t[0] + a[1][1] * inner.t[1] + self.t[1],
            ],
        }
    }

    fn inverse(&self) -> Option<Affine2> {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Some(Affine2 { m: inv, t })
    }

    /// Affine taking the canonical model-plane triangle
    /// (0, h), (-w, 0), (w, 0) onto three patch points.
    fn from_model_triangle(g: &ConeGeometry, apex: Point2, lb: Point2, rb: Point2) -> Option<Affine2> {
        // Model edge basis from the apex: e1 = (-w, -h), e2 = (w, -h).
        let (w, h) = (g.base_halfwidth, g.height);
        let det = (-w) * (-h) - w * (-h); // 2wh
        if det.abs() < 1e-12 {
            return None;
        }
        let e_inv = [[-h / det, -w / det], [h / det, -w / det]];
        let d1 = [lb.x - apex.x, lb.y - apex.y];
        let d2 = [rb.x - apex.x, rb.y - apex.y];
        let m = [
            [
                d1[0] * e_inv[0][0] + d2[0] * e_inv[1][0],
                d1[0] * e_inv[0][1] + d2[0] * e_inv[1][1],
            ],
            [
                d1[1] * e_inv[0][0] + d2[1] * e_inv[1][0],
                d1[1] * e_inv[0][1] + d2[1] * e_inv[1][1],
            ],
        ];
        // Apex is at model (0, h): t = apex - M (0, h).
        let t = [apex.x - m[0][1] * h, apex.y - m[1][1] * h];
        Some(Affine2 { m, t })
    }
}

/// Body and stripe colors per cone class.
fn class_colors(c: ColorClass) -> ([f32; 3], [f32; 3]) {
    match c {
        ColorClass::Blue => ([0.10, 0.15, 0.75], [0.92, 0.92, 0.92]),
        ColorClass::Yellow => ([0.95, 0.80, 0.10], [0.08, 0.08, 0.08]),
        ColorClass::Orange => ([0.95, 0.45, 0.10], [0.92, 0.92, 0.92]),
    }
}

fn lattice_hash(ix: i64, iy: i64, seed: u64) -> f32 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Smooth value noise in [0, 1] over an integer lattice.
fn value_noise(x: f64, y: f64, seed: u64) -> f32 {
    let ix = x.floor();
    let iy = y.floor();
    let fx = (x - ix) as f32;
    let fy = (y - iy) as f32;
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let (i, j) = (ix as i64, iy as i64);
    let v00 = lattice_hash(i, j, seed);
    let v10 = lattice_hash(i + 1, j, seed);
    let v01 = lattice_hash(i, j + 1, seed);
    let v11 = lattice_hash(i + 1, j + 1, seed);
    (v00 * (1.0 - sx) + v10 * sx) * (1.0 - sy) + (v01 * (1.0 - sx) + v11 * sx) * sy
}

struct Background {
    top: [f32; 3],
    bottom: [f32; 3],
    noise_seed: u64,
}

impl Background {
    fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB67A_11CE);
        let base_top: f32 = rng.random_range(0.35..0.75);
        let base_bottom: f32 = rng.random_range(0.20..0.55);
        let tint = |rng: &mut ChaCha8Rng, base: f32| {
            [
                (base + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
                (base + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
                (base + rng.random_range(-0.06..0.06f32)).clamp(0.0, 1.0),
            ]
        };
        let top = tint(&mut rng, base_top);
        let bottom = tint(&mut rng, base_bottom);
        Self { top, bottom, noise_seed: seed ^ 0x51AB_7E03 }
    }

    /// Background color at image-frame coordinates, so the clutter stays
    /// anchored when the crop box moves.
    fn sample(&self, img: Point2) -> [f32; 3] {
        let t = (img.y / GRADIENT_SCALE_PX).clamp(0.0, 1.0) as f32;
        let coarse = value_noise(img.x / 24.0, img.y / 24.0, self.noise_seed) - 0.5;
        let fine = value_noise(img.x / 7.0 + 13.0, img.y / 7.0 + 13.0, self.noise_seed ^ 0xDD) - 0.5;
        let clutter = 0.18 * coarse + 0.08 * fine;
        [
            (self.top[0] * (1.0 - t) + self.bottom[0] * t + clutter).clamp(0.0, 1.0),
            (self.top[1] * (1.0 - t) + self.bottom[1] * t + clutter).clamp(0.0, 1.0),
            (self.top[2] * (1.0 - t) + self.bottom[2] * t + clutter).clamp(0.0, 1.0),
        ]
    }
}

/// Rasterizes one patch. `patch_pts` are the pre-augmentation keypoint
/// positions in the patch frame; `aug` is a patch-to-patch transform
/// applied to the whole underlying image (so stripe edges keep passing
/// through the transformed keypoints). Photometric draws come from a
/// stream seeded only by `seed`: noise sigma, brightness and saturation
/// factors, then per-pixel Gaussian noise in row-major order.
pub(super) fn rasterize_patch(
    patch_pts: &[Point2; 7],
    g: &ConeGeometry,
    aug: &Affine2,
    noise: &NoiseParams,
    bbox: &BBox,
    seed: u64,
) -> PatchImage {
    let model_to_patch = Affine2::from_model_triangle(g, patch_pts[0], patch_pts[3], patch_pts[6]);
    let patch_to_model = model_to_patch
        .and_then(|a| aug.compose(&a).inverse());
    debug_assert!(patch_to_model.is_some(), "degenerate cone triangle in patch frame");
    let aug_inv = aug.inverse().unwrap_or_else(Affine2::identity);

    let (body, stripe) = class_colors(g.color_class);
    let bg = Background::from_seed(seed);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.0..=noise.pixel_sigma_max) as f32;
    let brightness = 1.0 + rng.random_range(-1.0..=1.0) * noise.brightness_jitter;
    let saturation = 1.0 + rng.random_range(-1.0..=1.0) * noise.saturation_jitter;
    let (brightness, saturation) = (brightness as f32, saturation as f32);

    let mut img = PatchImage::new_filled(0.0);
    let inv_super = 1.0 / SUPER as f64;
    for py in 0..PATCH_SIZE {
        for px in 0..PATCH_SIZE {
            let center = Point2::new(px as f64 + 0.5, py as f64 + 0.5);
            // Background is sampled once per pixel at image coordinates
            // of the pre-augmentation point.
            let bg_color = bg.sample(bbox.patch_to_image(aug_inv.apply(center)));

            let mut covered = 0usize;
            let mut cone_acc = [0.0f32; 3];
            if let Some(inv) = &patch_to_model {
                for sy in 0..SUPER {
                    for sx in 0..SUPER {
                        let q = Point2::new(
                            px as f64 + (sx as f64 + 0.5) * inv_super,
                            py as f64 + (sy as f64 + 0.5) * inv_super,
                        );
                        let m = inv.apply(q);
                        if m.y < 0.0 || m.y > g.height {
                            continue;
                        }
                        let t = 1.0 - m.y / g.height;
                        if m.x.abs() > g.base_halfwidth * t {
                            continue;
                        }
                        let c = if t < g.t2 || t >= g.t3 { &body } else { &stripe };
                        covered += 1;
                        cone_acc[0] += c[0];
                        cone_acc[1] += c[1];
                        cone_acc[2] += c[2];
                    }
                }
            }
            let alpha = covered as f32 / (SUPER * SUPER) as f32;
            for c in 0..3 {
                let cone_c = if covered > 0 { cone_acc[c] / covered as f32 } else { 0.0 };
                let v = alpha * cone_c + (1.0 - alpha) * bg_color[c];
                img.set(px, py, c, v);
            }
        }
    }

    // Photometric chain: saturation about per-pixel luminance, global
    // brightness, then additive Gaussian noise, clamped to [0, 1].
    for py in 0..PATCH_SIZE {
        for px in 0..PATCH_SIZE {
            let r = img.get(px, py, 0);
            let gch = img.get(px, py, 1);
            let b = img.get(px, py, 2);
            let lum = 0.299 * r + 0.587 * gch + 0.114 * b;
            for (c, v) in [r, gch, b].into_iter().enumerate() {
                let adjusted = (lum + (v - lum) * saturation) * brightness;
                let n: f32 = rng.sample(StandardNormal);
                img.set(px, py, c, (adjusted + sigma * n).clamp(0.0, 1.0));
            }
        }
    }
    img
}
