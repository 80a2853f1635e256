//! Synthetic scenes: analytic solids seen from a camera ring, and a flat target
//! image for splat fitting.

use erm_core::fields::{AnalyticField, Shape};
use erm_core::volren::{reference_image, Camera, ImageBuffer, WHITE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRESETS: [&str; 4] = ["two-spheres", "tilted-box", "empty", "blobs"];

/// One camera with its ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub preset: String,
    pub field: AnalyticField,
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub background: [f64; 3],
}

/// Solids of a volume preset, each with constant interior density `density`.
pub fn preset_shapes(preset: &str, density: f64) -> Option<Vec<Shape>> {
    match preset {
        "two-spheres" => Some(vec![
            Shape::sphere([0.38, 0.42, 0.5], 0.2, density, [0.9, 0.3, 0.2]),
            Shape::sphere([0.66, 0.6, 0.48], 0.15, density, [0.2, 0.4, 0.9]),
        ]),
        "tilted-box" => Some(vec![
            Shape::tilted_box([0.5, 0.5, 0.5], [0.32, 0.06, 0.22], 2, 0.6, density, [0.3, 0.8, 0.4]),
            Shape::tilted_box([0.45, 0.55, 0.38], [0.05, 0.28, 0.07], 0, 0.7, density, [0.9, 0.7, 0.2]),
        ]),
        "empty" => Some(Vec::new()),
        _ => None,
    }
}

const RING_RADIUS: f64 = 1.8;
const RING_FOV: f64 = 0.9;

fn ring_camera(azimuth: f64, elevation: f64, size: usize) -> Camera {
    let c = [0.5; 3];
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    let eye = [c[0] + RING_RADIUS * ce * ca, c[1] + RING_RADIUS * ce * sa, c[2] + RING_RADIUS * se];
    Camera::look_at(eye, c, [0.0, 0.0, 1.0], RING_FOV, size, size)
}

/// Training cameras evenly spaced in azimuth, alternating between two elevations.
pub fn train_cameras(n: usize, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / n as f64;
            let el = if k % 2 == 0 { 0.15 } else { 0.55 };
            ring_camera(az, el, size)
        })
        .collect()
}

/// Held-out cameras between the training azimuths.
pub fn test_cameras(n: usize, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|k| ring_camera(std::f64::consts::TAU * (k as f64 + 0.3) / n as f64, 0.35, size))
        .collect()
}

/// Renders ground truth with the dense-quadrature oracle. `None` for unknown presets.
pub fn make_scene(preset: &str, density: f64, size: usize, views: usize, test_views: usize, samples: usize) -> Option<Scene> {
    let field = AnalyticField::new(preset_shapes(preset, density)?);
    let render = |cams: Vec<Camera>| -> Vec<View> {
        cams.into_iter()
            .map(|camera| View {
                image: reference_image(&field, &camera, samples, WHITE),
                camera,
            })
            .collect()
    };
    Some(Scene {
        preset: preset.to_string(),
        train: render(train_cameras(views, size)),
        test: render(test_cameras(test_views, size)),
        field,
        background: WHITE,
    })
}

/// Pinhole camera far in front of the plane `z = 0.5`, framing `[0, 1]^2`
/// so that pixel `(x, y)` sees world point `((x + 0.5) / size, (y + 0.5) / size)`.
pub fn plane_camera(size: usize) -> Camera {
    let dist = 10.0;
    let fov = 2.0 * (0.5f64 / dist).atan();
    Camera::look_at([0.5, 0.5, 0.5 - dist], [0.5, 0.5, 0.5], [0.0, -1.0, 0.0], fov, size, size)
}

/// Flat target for splat fitting: soft-edged colored ellipses on white.
pub fn splat_target(preset: &str, size: usize) -> Option<ImageBuffer> {
    if preset != "blobs" {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    struct Ellipse {
        c: [f64; 2],
        axes: [f64; 2],
        angle: f64,
        color: [f64; 3],
    }
    let mut shapes: Vec<Ellipse> = (0..12)
        .map(|_| Ellipse {
            c: [rng.random_range(0.12..0.88), rng.random_range(0.12..0.88)],
            axes: [rng.random_range(0.04..0.22), rng.random_range(0.02..0.08)],
            angle: rng.random_range(0.0..std::f64::consts::PI),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    // a cluster of small dots
    for _ in 0..10 {
        shapes.push(Ellipse {
            c: [rng.random_range(0.55..0.9), rng.random_range(0.1..0.45)],
            axes: [0.02, 0.02],
            angle: 0.0,
            color: [rng.random(), rng.random(), rng.random()],
        });
    }
    let mut img = ImageBuffer::filled(size, size, WHITE);
    let ss = 4;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = [
                        (x as f64 + (sx as f64 + 0.5) / ss as f64) / size as f64,
                        (y as f64 + (sy as f64 + 0.5) / ss as f64) / size as f64,
                    ];
                    // later shapes paint over earlier ones
                    let mut c = WHITE;
                    for e in &shapes {
                        let d = [p[0] - e.c[0], p[1] - e.c[1]];
                        let (s, co) = e.angle.sin_cos();
                        let u = (co * d[0] + s * d[1]) / e.axes[0];
                        let v = (-s * d[0] + co * d[1]) / e.axes[1];
                        if u * u + v * v <= 1.0 {
                            c = e.color;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            img.set(x, y, acc.map(|a| a / (ss * ss) as f64));
        }
    }
    Some(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_spheres_contract() {
        let s = make_scene("two-spheres", 40.0, 16, 20, 4, 256).unwrap();
        assert_eq!(s.field.shapes.len(), 2);
        assert_eq!(s.train.len(), 20);
        assert!(s.train.iter().all(|v| v.image.width == 16 && v.image.height == 16));
        let again = make_scene("two-spheres", 40.0, 16, 20, 4, 256).unwrap();
        assert_eq!(s, again);
        // something other than background is visible from every camera
        assert!(s.train.iter().all(|v| v.image.data.iter().any(|&x| x < 0.9)));
    }

    #[test]
    fn empty_scene_is_background() {
        let s = make_scene("empty", 40.0, 8, 3, 2, 64).unwrap();
        for v in s.train.iter().chain(&s.test) {
            assert_eq!(v.image, ImageBuffer::filled(8, 8, WHITE));
        }
        assert!(make_scene("nope", 40.0, 8, 3, 2, 64).is_none());
    }

    #[test]
    fn plane_camera_maps_pixels_to_the_unit_square() {
        let cam = plane_camera(64);
        for (x, y) in [(0, 0), (10, 50), (63, 63)] {
            let d = cam.pixel_dir(x, y);
            let t = (0.5 - cam.position[2]) / d[2];
            let hit = [cam.position[0] + t * d[0], cam.position[1] + t * d[1]];
            assert!((hit[0] - (x as f64 + 0.5) / 64.0).abs() < 1e-12);
            assert!((hit[1] - (y as f64 + 0.5) / 64.0).abs() < 1e-12);
        }
        let img = splat_target("blobs", 32).unwrap();
        assert!(img.data.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(img, splat_target("blobs", 32).unwrap());
    }
}
