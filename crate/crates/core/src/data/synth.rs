//! Ray-traced synthetic scenes with exact depth and surface normals.
//!
//! Camera frame: x right, y down, z forward. Depth is the z coordinate of
//! the first hit; normals are expressed in the camera frame and face it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::EvalMask;
use crate::tensor::Tensor;

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

/// Surface reflectance: a base color modulated by a world-space pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Albedo {
    pub color: V3,
    pub frequency: f64,
    pub contrast: f64,
}

impl Albedo {
    pub fn flat(color: V3) -> Self {
        Self { color, frequency: 0.0, contrast: 0.0 }
    }

    fn at(&self, p: V3) -> V3 {
        let f = self.frequency;
        let pattern = (f * p[0]).sin() * (f * p[1]).sin() * (f * p[2]).sin();
        scale(self.color, 1.0 + self.contrast * pattern)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Unbounded plane through `point` with normal `normal`.
    Plane { point: V3, normal: V3 },
    /// Rectangle centered at `center` spanned by orthonormal `u`, `v` with half extents.
    Panel { center: V3, u: V3, v: V3, half: [f64; 2] },
    /// Axis-aligned box.
    Cuboid { min: V3, max: V3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub albedo: Albedo,
}

impl Surface {
    /// Nearest hit `t > 0` along `dir` from the origin and the raw surface normal.
    fn hit(&self, dir: V3) -> Option<(f64, V3, u16)> {
        match &self.shape {
            Shape::Plane { point, normal } => plane_hit(*point, *normal, dir).map(|(t, n)| (t, n, 0)),
            Shape::Panel { center, u, v, half } => {
                let n = cross(*u, *v);
                let (t, n) = plane_hit(*center, n, dir)?;
                let local = sub(scale(dir, t), *center);
                (dot(local, *u).abs() <= half[0] && dot(local, *v).abs() <= half[1]).then_some((t, n, 0))
            }
            Shape::Cuboid { min, max } => {
                let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                for k in 0..3 {
                    if dir[k] == 0.0 {
                        if min[k] > 0.0 || max[k] < 0.0 {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = (min[k] / dir[k], max[k] / dir[k]);
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = 1.0;
                Some((t0, n, axis as u16 + 1))
            }
        }
    }
}

fn plane_hit(point: V3, normal: V3, dir: V3) -> Option<(f64, V3)> {
    let denom = dot(normal, dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = dot(normal, point) / denom;
    (t > 0.0).then_some((t, normal))
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn for_size(height: usize, width: usize) -> Self {
        Self { focal: width as f64, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    /// Ray through the center of pixel `(row, col)`, scaled so its z component is 1.
    pub fn ray(&self, row: usize, col: usize) -> V3 {
        [(col as f64 + 0.5 - self.cx) / self.focal, (row as f64 + 0.5 - self.cy) / self.focal, 1.0]
    }
}

/// Lighting and atmosphere shared by every surface of a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lighting {
    /// Unit vector from surfaces toward the light.
    pub toward_light: V3,
    pub ambient: f64,
    pub haze: V3,
    /// Distance over which haze reaches `1 − 1/e`.
    pub haze_length: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Self { toward_light: unit([-0.3, -0.6, -0.75]), ambient: 0.25, haze: [0.7, 0.75, 0.8], haze_length: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Tensor,
    pub depth: Tensor,
    pub normals: Tensor,
    pub mask: EvalMask,
    /// Planar patch under each pixel: surface index times four plus the box face axis (0 for planes).
    pub patch: Vec<u16>,
}

/// Renders `surfaces`; every ray must hit at least one of them.
pub fn render(surfaces: &[Surface], camera: Camera, lighting: Lighting, height: usize, width: usize) -> Result<SyntheticScene> {
    let hw = height * width;
    let (mut image, mut depth, mut normals) = (vec![0f32; 3 * hw], vec![0f32; hw], vec![0f32; 3 * hw]);
    let mut patch = vec![0u16; hw];
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            let dir = camera.ray(row, col);
            let (t, n, k, face) = surfaces
                .iter()
                .enumerate()
                .filter_map(|(k, s)| s.hit(dir).map(|(t, n, face)| (t, n, k, face)))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .ok_or_else(|| Error::Config(format!("pixel ({row}, {col}) hits no surface")))?;
            let n = unit(n);
            let n = if dot(n, dir) > 0.0 { scale(n, -1.0) } else { n };
            let p = scale(dir, t);
            let albedo = surfaces[k].albedo.at(p);
            let light = lighting.ambient + (1.0 - lighting.ambient) * dot(n, lighting.toward_light).max(0.0);
            let transmit = (-t / lighting.haze_length).exp();
            for c in 0..3 {
                let lit = albedo[c] * light;
                image[c * hw + i] = (lit * transmit + lighting.haze[c] * (1.0 - transmit)) as f32;
                normals[c * hw + i] = n[c] as f32;
            }
            depth[i] = t as f32;
            patch[i] = 4 * k as u16 + face;
        }
    }
    let depth = Tensor::new(vec![1, height, width], depth)?;
    let mask = EvalMask::from_depth(&depth, None, None)?;
    Ok(SyntheticScene {
        image: Tensor::new(vec![3, height, width], image)?,
        depth,
        normals: Tensor::new(vec![3, height, width], normals)?,
        mask,
        patch,
    })
}

fn random_albedo(rng: &mut impl Rng) -> Albedo {
    Albedo {
        color: [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)],
        frequency: rng.gen_range(1.0..4.0),
        contrast: rng.gen_range(0.1..0.3),
    }
}

/// Wall-mounted panels sit at this fraction of the wall depth.
const PANEL_DEPTH_RATIO: (f64, f64) = (0.8, 0.95);
/// Box heights as a fraction of the camera height above the ground.
const BOX_HEIGHT_RATIO: (f64, f64) = (0.1, 0.35);

/// A ground plane, a back wall and 2–6 objects within `range` meters:
/// panels mounted in front of the wall and low boxes resting on the ground.
pub fn random_scene(rng: &mut impl Rng, height: usize, width: usize, range: (f64, f64)) -> Result<SyntheticScene> {
    let (d_min, d_max) = range;
    let camera = Camera::for_size(height, width);
    let below = camera.ray(height - 1, 0)[1];
    let half_w = camera.ray(0, width - 1)[0];
    let ground_y = d_min * below * rng.gen_range(1.1..1.6);
    let wall_z = d_max * rng.gen_range(0.85..1.0);
    let mut surfaces = vec![
        Surface { shape: Shape::Plane { point: [0.0, ground_y, 0.0], normal: [0.0, -1.0, 0.0] }, albedo: random_albedo(rng) },
        Surface { shape: Shape::Plane { point: [0.0, 0.0, wall_z], normal: [0.0, 0.0, -1.0] }, albedo: random_albedo(rng) },
    ];
    let near = d_min * 1.3;
    let horizon = camera.ray(0, 0)[1];
    for _ in 0..rng.gen_range(2..=6) {
        let shape = if rng.gen_bool(0.5) {
            let z = wall_z * rng.gen_range(PANEL_DEPTH_RATIO.0..PANEL_DEPTH_RATIO.1);
            let dir = [rng.gen_range(-0.8..0.8) * half_w, rng.gen_range(0.9 * horizon..0.2 * below), 1.0];
            let size = z * rng.gen_range(0.08..0.2);
            let yaw: f64 = rng.gen_range(-0.3..0.3);
            let pitch: f64 = rng.gen_range(-0.2..0.2);
            let u = [yaw.cos(), 0.0, yaw.sin()];
            let v = unit(cross([-yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos()], u));
            let half = [size, size * rng.gen_range(0.6..1.4)];
            let reach = half[0] * yaw.sin().abs() + half[1] * v[2].abs();
            let z = z.min(wall_z - reach).max(near + reach);
            Shape::Panel { center: scale(dir, z), u, v, half }
        } else {
            let x = rng.gen_range(-0.8..0.8) * half_w;
            let z = rng.gen_range((ground_y / below).max(near)..0.9 * wall_z);
            let size = z * rng.gen_range(0.1..0.25);
            let depth = size * rng.gen_range(0.5..1.5);
            let tall = ground_y * rng.gen_range(BOX_HEIGHT_RATIO.0..BOX_HEIGHT_RATIO.1);
            Shape::Cuboid { min: [x * z - size, ground_y - tall, z], max: [x * z + size, ground_y, z + depth] }
        };
        surfaces.push(Surface { shape, albedo: random_albedo(rng) });
    }
    let lighting = Lighting { haze_length: 1.5 * d_max, ..Lighting::default() };
    render(&surfaces, camera, lighting, height, width)
}

/// `count` scenes; scene `i` is seeded with `seed ^ i`.
pub fn gen_synthetic(seed: u64, count: usize, height: usize, width: usize, range: (f64, f64)) -> Result<Vec<SyntheticScene>> {
    if count == 0 {
        return Err(Error::Config("scene count must be at least 1".into()));
    }
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(Error::Config(format!("scene size {height}×{width} must be positive multiples of 8")));
    }
    let (d_min, d_max) = range;
    if !(d_min > 0.0 && d_max > 2.0 * d_min) {
        return Err(Error::Config(format!("depth range [{d_min}, {d_max}] needs 0 < d_min and d_max > 2·d_min")));
    }
    (0..count)
        .map(|i| random_scene(&mut ChaCha8Rng::seed_from_u64(seed ^ i as u64), height, width, range))
        .collect()
}

/// Normals estimated from depth by unprojecting neighboring pixels; `None`
/// where a neighbor lies on another patch or the stencil leaves the grid.
pub fn normals_from_depth(scene: &SyntheticScene, camera: Camera) -> Vec<Option<V3>> {
    let (_, h, w) = scene.depth.dims3().expect("depth map");
    let d = scene.depth.data();
    let point = |r: usize, c: usize| scale(camera.ray(r, c), d[r * w + c] as f64);
    let mut out = vec![None; h * w];
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let id = scene.patch[r * w + c];
            let around = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)];
            if around.iter().any(|&(rr, cc)| scene.patch[rr * w + cc] != id) {
                continue;
            }
            let du = sub(point(r, c + 1), point(r, c - 1));
            let dv = sub(point(r + 1, c), point(r - 1, c));
            let n = unit(cross(du, dv));
            let n = if dot(n, camera.ray(r, c)) > 0.0 { scale(n, -1.0) } else { n };
            out[r * w + c] = Some(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_plane() {
        let wall = Surface { shape: Shape::Plane { point: [0.0, 0.0, 5.0], normal: [0.0, 0.0, 1.0] }, albedo: Albedo::flat([0.5; 3]) };
        let s = render(&[wall], Camera::for_size(8, 8), Lighting::default(), 8, 8).unwrap();
        assert!(s.depth.data().iter().all(|&d| d == 5.0));
        let hw = 64;
        for i in 0..hw {
            assert_eq!([s.normals.data()[i], s.normals.data()[hw + i], s.normals.data()[2 * hw + i]], [0.0, 0.0, -1.0]);
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(matches!(gen_synthetic(0, 1, 12, 16, (1.0, 10.0)), Err(Error::Config(_))));
        assert!(matches!(gen_synthetic(0, 0, 16, 16, (1.0, 10.0)), Err(Error::Config(_))));
    }

    #[test]
    fn box_hit_picks_front_face() {
        let b = Surface { shape: Shape::Cuboid { min: [-1.0, -1.0, 3.0], max: [1.0, 1.0, 4.0] }, albedo: Albedo::flat([0.5; 3]) };
        let (t, n, face) = b.hit([0.0, 0.0, 1.0]).unwrap();
        assert_eq!((t, n, face), (3.0, [0.0, 0.0, 1.0], 3));
        assert!(b.hit([2.0, 0.0, 1.0]).is_none());
    }
}
