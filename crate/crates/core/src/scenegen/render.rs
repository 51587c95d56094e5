use nalgebra::Vector3;

use super::Scene;
use crate::camgeom::{Camera, CameraView};
use crate::raster::{DepthMap, Plane};

const NEAR: f64 = 1e-3;
const BACKGROUND: f32 = 0.05;
const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

struct CamTriangle {
    v0: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    shade: f64,
    material: usize,
    bbox: (usize, usize, usize, usize),
}

/// Möller–Trumbore against a camera-frame ray `(dx, dy, 1)` from the origin.
/// Because the ray has unit z, the returned parameter is the hit's depth.
#[inline]
fn intersect(t: &CamTriangle, dir: &Vector3<f64>) -> Option<f64> {
    const EPS: f64 = 1e-12;
    let pvec = dir.cross(&t.e2);
    let det = t.e1.dot(&pvec);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = -t.v0;
    let u = tvec.dot(&pvec) * inv;
    if !(-EPS..=1.0 + EPS).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&t.e1);
    let v = dir.dot(&qvec) * inv;
    if v < -EPS || u + v > 1.0 + EPS {
        return None;
    }
    let z = t.e2.dot(&qvec) * inv;
    (z > NEAR).then_some(z)
}

fn prepare(scene: &Scene, camera: &Camera, lighting: usize) -> Vec<CamTriangle> {
    let k = &camera.intrinsics;
    let light = &scene.lightings[lighting.min(scene.lightings.len() - 1)];
    let eye = camera.pose.center();
    scene
        .triangles
        .iter()
        .map(|tri| {
            let vc = tri.vertices.map(|v| camera.pose.to_camera(&v));
            let mut n = tri.normal();
            if n.dot(&(eye - tri.vertices[0])) < 0.0 {
                n = -n;
            }
            let lambert: f64 = light
                .lights
                .iter()
                .map(|l| l.intensity * n.dot(&l.direction).max(0.0))
                .sum();
            let shade = (light.ambient + lambert).clamp(0.0, 1.0);
            let bbox = if vc.iter().all(|v| v.z > NEAR) {
                let us = vc.map(|v| k.fx * v.x / v.z + k.cx);
                let vs = vc.map(|v| k.fy * v.y / v.z + k.cy);
                let lo_u = us.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
                let hi_u = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
                let lo_v = vs.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 1.0;
                let hi_v = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
                let clamp = |x: f64, n: usize| x.clamp(0.0, n as f64) as usize;
                (
                    clamp(lo_u, k.width),
                    clamp(hi_u + 1.0, k.width),
                    clamp(lo_v, k.height),
                    clamp(hi_v + 1.0, k.height),
                )
            } else {
                (0, k.width, 0, k.height)
            };
            CamTriangle {
                v0: vc[0],
                e1: vc[1] - vc[0],
                e2: vc[2] - vc[0],
                shade,
                material: tri.material,
                bbox,
            }
        })
        .collect()
}

fn depth_pass(tris: &[CamTriangle], camera: &Camera) -> DepthMap {
    let k = &camera.intrinsics;
    let mut zbuf = Plane::filled(k.width, k.height, f64::INFINITY);
    for t in tris {
        let (x0, x1, y0, y1) = t.bbox;
        for y in y0..y1 {
            let dy = (y as f64 - k.cy) / k.fy;
            for x in x0..x1 {
                let dir = Vector3::new((x as f64 - k.cx) / k.fx, dy, 1.0);
                if let Some(z) = intersect(t, &dir) {
                    if z < zbuf.get(x, y) {
                        zbuf.set(x, y, z);
                    }
                }
            }
        }
    }
    zbuf.map(|z| if z.is_finite() { z as f32 } else { 0.0 })
}

/// Depth map only; used for coverage checks.
pub fn render_depth(scene: &Scene, camera: &Camera) -> DepthMap {
    depth_pass(&prepare(scene, camera, 0), camera)
}

/// Rasterize `scene` from `camera` under lighting setup `lighting`.
///
/// Depth holds the exact camera-frame z of the nearest triangle hit through
/// each pixel center (0 where nothing is hit). The image is shaded with
/// `clamp(ambient + Σ intensity·max(0, n̂·l̂), 0, 1)·albedo`, averaged over a
/// 2×2 subpixel pattern with its own z-test.
pub fn render(scene: &Scene, camera: &Camera, lighting: usize) -> CameraView {
    let k = &camera.intrinsics;
    let tris = prepare(scene, camera, lighting);
    let depth = depth_pass(&tris, camera);

    let (w, h) = (k.width, k.height);
    let mut zbuf = vec![f64::INFINITY; w * h * 4];
    let mut value = vec![BACKGROUND as f64; w * h * 4];
    for t in &tris {
        let material = &scene.materials[t.material];
        let (x0, x1, y0, y1) = t.bbox;
        for y in y0..y1 {
            for x in x0..x1 {
                for (s, (ox, oy)) in SUBSAMPLES.iter().enumerate() {
                    let dir = Vector3::new(
                        (x as f64 + ox - k.cx) / k.fx,
                        (y as f64 + oy - k.cy) / k.fy,
                        1.0,
                    );
                    let Some(z) = intersect(t, &dir) else { continue };
                    let slot = (y * w + x) * 4 + s;
                    if z < zbuf[slot] {
                        zbuf[slot] = z;
                        let p = camera.pose.to_world(&(dir * z));
                        value[slot] = t.shade * material.albedo_at(&p);
                    }
                }
            }
        }
    }
    let image = Plane::from_fn(w, h, |x, y| {
        let base = (y * w + x) * 4;
        (value[base..base + 4].iter().sum::<f64>() * 0.25) as f32
    });
    CameraView {
        camera: *camera,
        image,
        depth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camgeom::{backproject, Intrinsics, Pose};
    use crate::scenegen::{generate_scene, Complexity, Light, Lighting, Texture};
    use nalgebra::Vector2;

    fn camera(size: usize, pose: Pose) -> Camera {
        Camera {
            intrinsics: Intrinsics::from_fov(size, size, 60f64.to_radians()).unwrap(),
            pose,
        }
    }

    fn lighting(intensity: f64) -> Lighting {
        Lighting {
            lights: vec![Light {
                direction: Vector3::new(0.0, 0.0, -1.0),
                intensity,
            }],
            ambient: 0.2,
        }
    }

    fn fronto_square() -> Scene {
        let mut s = Scene {
            triangles: vec![],
            materials: vec![],
            lightings: vec![lighting(0.3), lighting(0.7)],
        };
        s.push_quad(
            Vector3::new(-2.0, -2.0, 1.0),
            Vector3::new(4.0, 0.0, 0.0),
            Vector3::new(0.0, 4.0, 0.0),
            Texture::Checker {
                square: 0.1,
                dark: 0.2,
                light: 0.9,
            },
        );
        s
    }

    #[test]
    fn fronto_parallel_square_has_unit_depth() {
        let view = render(&fronto_square(), &camera(32, Pose::identity()), 0);
        for &z in &view.depth.data {
            assert!((z - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_scene_has_no_depth() {
        let mut s = fronto_square();
        s.triangles.clear();
        let view = render(&s, &camera(16, Pose::identity()), 0);
        assert!(view.depth.data.iter().all(|&z| z <= 0.0));
    }

    #[test]
    fn lighting_changes_image_not_depth() {
        let s = fronto_square();
        let c = camera(32, Pose::identity());
        let a = render(&s, &c, 0);
        let b = render(&s, &c, 1);
        assert_eq!(a.depth, b.depth);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn depth_points_lie_on_scene_triangles() {
        let scene = generate_scene(3, Complexity::Small);
        let pose = Pose::look_at(
            Vector3::new(0.45, -0.3, 0.35),
            Vector3::new(0.0, 0.0, 0.03),
            Vector3::z(),
        )
        .unwrap();
        let c = camera(64, pose);
        let view = render(&scene, &c, 0);
        let mut hits = 0;
        for y in 0..64 {
            for x in 0..64 {
                let z = view.depth.get(x, y) as f64;
                if z <= 0.0 {
                    continue;
                }
                hits += 1;
                let p = backproject(&Vector2::new(x as f64, y as f64), z, &c).unwrap();
                let best = scene
                    .triangles
                    .iter()
                    .map(|t| point_triangle_distance(&p, &t.vertices))
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "pixel ({x},{y}) is {best} m off the mesh");
            }
        }
        assert!(hits > 500, "{hits}");
        assert_eq!(render(&scene, &c, 0), view);
    }

    fn point_triangle_distance(p: &Vector3<f64>, v: &[Vector3<f64>; 3]) -> f64 {
        let n = (v[1] - v[0]).cross(&(v[2] - v[0])).normalize();
        let dist = (p - v[0]).dot(&n);
        let q = p - n * dist;
        let inside = (0..3).all(|i| {
            let a = v[i];
            let b = v[(i + 1) % 3];
            (b - a).cross(&(q - a)).dot(&n) >= -1e-9
        });
        if inside {
            dist.abs()
        } else {
            (0..3)
                .map(|i| {
                    let a = v[i];
                    let b = v[(i + 1) % 3];
                    let t = ((p - a).dot(&(b - a)) / (b - a).norm_squared()).clamp(0.0, 1.0);
                    (p - (a + (b - a) * t)).norm()
                })
                .fold(f64::INFINITY, f64::min)
        }
    }
}
