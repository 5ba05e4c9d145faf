//! Parametric 2-D face renderer built from anti-aliased ellipses.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::preprocessing::RenderCrop;

/// Per-participant geometry and colours, in units of the crop size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub face_rx: f32,
    pub face_ry: f32,
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub background: [f32; 3],
    pub hair_height: f32,
    pub eye_dx: f32,
    pub eye_y: f32,
    pub eye_r: f32,
    pub mouth_w: f32,
    pub mouth_y: f32,
}

impl Identity {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self::sample_with_spread(rng, 1.0)
    }

    /// Draws every parameter within `spread` times its full range, centred
    /// on the middle of that range.
    pub fn sample_with_spread(rng: &mut impl Rng, spread: f32) -> Self {
        let mut draw = |lo: f32, hi: f32| {
            let u = rng.random_range(lo..hi);
            if spread == 1.0 {
                u
            } else {
                let mid = 0.5 * (lo + hi);
                mid + spread * (u - mid)
            }
        };
        let mut colour = |lo: f32, hi: f32| [draw(lo, hi), draw(lo, hi), draw(lo, hi)];
        let skin = colour(0.45, 0.95);
        let hair = colour(0.05, 0.5);
        let background = colour(0.2, 0.8);
        Self {
            face_rx: draw(0.28, 0.36),
            face_ry: draw(0.36, 0.44),
            skin,
            hair,
            background,
            hair_height: draw(0.08, 0.2),
            eye_dx: draw(0.12, 0.17),
            eye_y: draw(-0.1, -0.03),
            eye_r: draw(0.04, 0.06),
            mouth_w: draw(0.1, 0.17),
            mouth_y: draw(0.15, 0.22),
        }
    }
}

/// Mouth and eye openness in `[0, 1]`, brow raise in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub mouth_open: f32,
    pub eye_open: f32,
    pub brow: f32,
}

/// Head tilt in radians and offset in crop units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub tilt: f32,
    pub dx: f32,
    pub dy: f32,
}

pub const MAX_TILT: f32 = 0.35;
pub const MAX_OFFSET: f32 = 0.08;

impl Expression {
    pub fn clamped(self) -> Self {
        Self { mouth_open: self.mouth_open.clamp(0.0, 1.0), eye_open: self.eye_open.clamp(0.0, 1.0), brow: self.brow.clamp(-1.0, 1.0) }
    }
}

impl Pose {
    pub fn clamped(self) -> Self {
        Self {
            tilt: self.tilt.clamp(-MAX_TILT, MAX_TILT),
            dx: self.dx.clamp(-MAX_OFFSET, MAX_OFFSET),
            dy: self.dy.clamp(-MAX_OFFSET, MAX_OFFSET),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralFace {
    pub identity: Identity,
    pub expression: Expression,
    pub pose: Pose,
    pub width: u32,
    pub height: u32,
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Ellipse {
    /// Approximate signed distance in crop units.
    fn sd(&self, x: f32, y: f32) -> f32 {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        ((u * u + v * v).sqrt() - 1.0) * self.rx.min(self.ry)
    }
}

fn blend(dst: &mut [f32; 3], colour: [f32; 3], alpha: f32) {
    for c in 0..3 {
        dst[c] += (colour[c] - dst[c]) * alpha;
    }
}

impl ProceduralFace {
    pub fn new(identity: Identity, expression: Expression, pose: Pose, width: u32, height: u32) -> Self {
        Self { identity, expression: expression.clamped(), pose: pose.clamped(), width, height }
    }

    /// Colour at crop coordinates `(x, y)` in `[-0.5, 0.5]²`.
    fn shade(&self, x: f32, y: f32, edge: f32) -> [f32; 3] {
        let id = &self.identity;
        let (e, p) = (self.expression, self.pose);
        let (s, c) = p.tilt.sin_cos();
        let (x, y) = (x - p.dx, y - p.dy);
        let (x, y) = (c * x + s * y, -s * x + c * y);
        let cover = |sd: f32| (0.5 - sd / edge).clamp(0.0, 1.0);

        let mut px = id.background;
        let hair = Ellipse { cx: 0.0, cy: -id.face_ry * 0.45, rx: id.face_rx * 1.08, ry: id.face_ry * 0.55 + id.hair_height };
        blend(&mut px, id.hair, cover(hair.sd(x, y)));
        let face = Ellipse { cx: 0.0, cy: 0.03, rx: id.face_rx, ry: id.face_ry };
        blend(&mut px, id.skin, cover(face.sd(x, y)));

        for side in [-1.0f32, 1.0] {
            let ex = side * id.eye_dx;
            let white = Ellipse { cx: ex, cy: id.eye_y, rx: id.eye_r * 1.4, ry: id.eye_r * (0.15 + 0.85 * e.eye_open) };
            blend(&mut px, [0.95, 0.95, 0.93], cover(white.sd(x, y)));
            let pupil = Ellipse { cx: ex, cy: id.eye_y, rx: id.eye_r * 0.6, ry: id.eye_r * (0.1 + 0.5 * e.eye_open) };
            blend(&mut px, [0.08, 0.06, 0.05], cover(pupil.sd(x, y)));
            let brow = Ellipse { cx: ex, cy: id.eye_y - id.eye_r * (1.9 + 0.8 * e.brow), rx: id.eye_r * 1.6, ry: 0.012 };
            blend(&mut px, id.hair, cover(brow.sd(x, y)));
        }

        let mouth = Ellipse { cx: 0.0, cy: id.mouth_y, rx: id.mouth_w, ry: 0.012 + 0.06 * e.mouth_open };
        blend(&mut px, [0.45, 0.1, 0.12], cover(mouth.sd(x, y)));
        px
    }

    pub fn render_image(&self) -> RgbImage {
        let (w, h) = (self.width.max(1), self.height.max(1));
        let edge = 1.5 / w.min(h) as f32;
        RgbImage::from_fn(w, h, |i, j| {
            let x = (i as f32 + 0.5) / w as f32 - 0.5;
            let y = (j as f32 + 0.5) / h as f32 - 0.5;
            let px = self.shade(x, y, edge);
            Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }
}

impl RenderCrop for ProceduralFace {
    fn render(&self) -> RgbImage {
        self.render_image()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn neutral() -> (Expression, Pose) {
        (Expression { mouth_open: 0.3, eye_open: 0.7, brow: 0.0 }, Pose { tilt: 0.0, dx: 0.0, dy: 0.0 })
    }

    fn mean_abs_diff(a: &RgbImage, b: &RgbImage) -> f64 {
        let total: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y) as u64).sum();
        total as f64 / a.as_raw().len() as f64 / 255.0
    }

    #[test]
    fn spread_narrows_identity_range() {
        let full = Identity::sample(&mut seed::rng(3, "id"));
        assert_eq!(Identity::sample_with_spread(&mut seed::rng(3, "id"), 1.0), full);
        for i in 0..50 {
            let id = Identity::sample_with_spread(&mut seed::rng(i, "id"), 0.1);
            assert!(id.skin.iter().all(|c| (c - 0.7).abs() <= 0.025 + 1e-6), "{:?}", id.skin);
            assert!((id.face_rx - 0.32).abs() <= 0.004 + 1e-6);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let id = Identity::sample(&mut seed::rng(1, "id"));
        let (e, p) = neutral();
        let a = ProceduralFace::new(id.clone(), e, p, 96, 96).render_image();
        let b = ProceduralFace::new(id, e, p, 96, 96).render_image();
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), (96, 96));
    }

    #[test]
    fn expression_changes_pixels() {
        let id = Identity::sample(&mut seed::rng(2, "id"));
        let (e, p) = neutral();
        let a = ProceduralFace::new(id.clone(), e, p, 96, 96).render_image();
        let b = ProceduralFace::new(id, Expression { mouth_open: 1.0, ..e }, p, 96, 96).render_image();
        assert!(mean_abs_diff(&a, &b) > 1e-3);
    }

    #[test]
    fn parameters_are_clamped() {
        let id = Identity::sample(&mut seed::rng(3, "id"));
        let f = ProceduralFace::new(id, Expression { mouth_open: 3.0, eye_open: -1.0, brow: 9.0 }, Pose { tilt: 2.0, dx: 1.0, dy: -1.0 }, 8, 8);
        assert_eq!(f.expression, Expression { mouth_open: 1.0, eye_open: 0.0, brow: 1.0 });
        assert_eq!(f.pose, Pose { tilt: MAX_TILT, dx: MAX_OFFSET, dy: -MAX_OFFSET });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        // Soft edges make pixels Lipschitz in every parameter; the 1/255 term
        // absorbs 8-bit rounding.
        #[test]
        fn rendering_is_parameter_continuous(
            s in 0u64..1000, m in 0.0f32..1.0, eo in 0.0f32..1.0, t in -0.3f32..0.3, d in 1e-3f32..1e-2,
        ) {
            let id = Identity::sample(&mut seed::rng(s, "id"));
            let e = Expression { mouth_open: m, eye_open: eo, brow: 0.0 };
            let p = Pose { tilt: t, dx: 0.0, dy: 0.0 };
            let base = ProceduralFace::new(id.clone(), e, p, 96, 96).render_image();
            let moved = ProceduralFace::new(
                id,
                Expression { mouth_open: m + d, eye_open: eo - d, brow: d },
                Pose { tilt: t + d, dx: d, dy: d },
                96,
                96,
            )
            .render_image();
            prop_assert!(mean_abs_diff(&base, &moved) <= 3.0 * d as f64 + 1.0 / 255.0, "{} for step {}", mean_abs_diff(&base, &moved), d);
        }
    }
}
