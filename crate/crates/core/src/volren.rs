//! Front-to-back compositing and the ray/pixel pipeline around it.

use rand::Rng;

use crate::diff::{Ctx, ParamStore, Tape, Var};
use crate::fields::{field_eval, AnalyticField, Field};
use crate::gauge::GaugeTransform;
use crate::par;
use crate::sampling::{
    hierarchical_sample, HierarchicalConfig, Ray, SampleKind, SamplerMode, SamplingError, USource,
};

/// Upper clamp on alpha so transmittance never reaches exactly zero.
pub const ALPHA_MAX: f64 = 1.0 - 1e-7;
pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy)]
pub struct Composite<'t> {
    pub color: [Var<'t>; 3],
    pub transmittance: Var<'t>,
}

/// `C = sum_i c_i a_i prod_{j<i} (1 - a_j) + T * background`, samples front to back.
pub fn composite<'t>(tape: &'t Tape, colors: &[[Var<'t>; 3]], alphas: &[Var<'t>], background: [f64; 3]) -> Composite<'t> {
    assert_eq!(colors.len(), alphas.len(), "one alpha per color");
    let mut acc: [Vec<Var<'t>>; 3] = Default::default();
    let mut trans = tape.constant(1.0);
    for (c, &a) in colors.iter().zip(alphas) {
        let a = a.clamp(0.0, ALPHA_MAX);
        let w = trans * a;
        for k in 0..3 {
            acc[k].push(w * c[k]);
        }
        trans = trans * (1.0 - a);
    }
    let color = std::array::from_fn(|k| tape.sum(&acc[k]) + trans * background[k]);
    Composite {
        color,
        transmittance: trans,
    }
}

/// Plain-value compositing, same conventions as [`composite`].
pub fn composite_values(colors: &[[f64; 3]], alphas: &[f64], background: [f64; 3]) -> ([f64; 3], f64) {
    let mut out = [0.0; 3];
    let mut trans = 1.0;
    for (c, &a) in colors.iter().zip(alphas) {
        let a = a.clamp(0.0, ALPHA_MAX);
        for k in 0..3 {
            out[k] += trans * a * c[k];
        }
        trans *= 1.0 - a;
    }
    for k in 0..3 {
        out[k] += trans * background[k];
    }
    (out, trans)
}

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation, columns are the camera axes.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|x| x / n)
}

impl Camera {
    /// Looks from `eye` at `target`; `fov_y` in radians.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y: f64, width: usize, height: usize) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            width,
            height,
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            position: eye,
        }
    }

    /// Camera-space direction through image point `(u, v)` in pixels.
    pub fn local_dir(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    pub fn to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    }

    /// World point into camera coordinates.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position);
        let r = &self.rotation;
        std::array::from_fn(|j| r[0][j] * d[0] + r[1][j] * d[1] + r[2][j] * d[2])
    }

    /// Unit world direction through the center of pixel `(x, y)`.
    pub fn pixel_dir(&self, x: usize, y: usize) -> [f64; 3] {
        normalize(self.to_world(self.local_dir(x as f64 + 0.5, y as f64 + 0.5)))
    }

    /// Ray through pixel `(x, y)` clipped to the unit cube, or `None` if it misses.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Option<Ray> {
        let d = self.pixel_dir(x, y);
        let (t0, t1) = unit_cube_hit(self.position, d)?;
        Ray::new(self.position, d, t0, t1).ok()
    }
}

/// Entry and exit distances of `o + t d` through `[0,1]^3`, `t >= 0`.
pub fn unit_cube_hit(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < 0.0 || o[i] > 1.0 {
                return None;
            }
            continue;
        }
        let (a, b) = ((0.0 - o[i]) / d[i], (1.0 - o[i]) / d[i]);
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    (hi - lo > 1e-9).then_some((lo, hi))
}

/// Row-major RGB image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Boundaries of the coarse pass; ignored without a coarse field.
    pub n_coarse: usize,
    pub n_fine: usize,
    pub mode: SamplerMode,
    pub union: bool,
}

/// Field, optional coarse field and gauge, and how rays are sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePipeline {
    pub field: Field,
    pub coarse: Option<Field>,
    pub gauge: Option<GaugeTransform>,
    pub sampler: SamplerConfig,
    pub background: [f64; 3],
}

/// One rendered ray plus what the coarse-training losses need.
pub struct RayRender<'t> {
    pub color: [Var<'t>; 3],
    pub transmittance: Var<'t>,
    /// Coarse-field composite, present with a coarse field.
    pub coarse_color: Option<[Var<'t>; 3]>,
    /// Coarse bin weights on the tape.
    pub coarse_weights: Vec<Var<'t>>,
    pub coarse_t: Vec<f64>,
    /// Fine sample depths and compositing weights, detached.
    pub fine_t: Vec<f64>,
    pub fine_weights: Vec<f64>,
    pub fallback: bool,
}

fn alpha<'t>(sigma: Var<'t>, delta: Var<'t>) -> Var<'t> {
    // 1 - exp(-sigma delta)
    -(-(sigma * delta)).exp_m1()
}

/// Renders the part of a ray between `t_near` and `t_far`.
pub fn render_ray<'t, R: Rng>(
    ctx: &Ctx<'t>,
    pipe: &VolumePipeline,
    ray: &Ray,
    u: &mut USource<'_, R>,
) -> Result<RayRender<'t>, SamplingError> {
    let tape = ctx.tape;
    let gauge = pipe.gauge.as_ref();
    let s = &pipe.sampler;
    let (t, coarse, coarse_t, fallback) = match &pipe.coarse {
        Some(coarse_field) => {
            let cfg = HierarchicalConfig {
                n_coarse: s.n_coarse,
                n_fine: s.n_fine,
                mode: s.mode,
                union: s.union,
            };
            let h = hierarchical_sample(ctx, coarse_field, gauge, ray, &cfg, u)?;
            let fallback = h.samples.fallback;
            (h.samples.t, Some(h.coarse), h.coarse_t, fallback)
        }
        None => {
            let len = ray.t_far - ray.t_near;
            let t = u
                .strata(s.n_fine)
                .into_iter()
                .map(|x| ctx.cst((ray.t_near + x * len).min(ray.t_far)))
                .collect();
            (t, None, Vec::new(), false)
        }
    };

    let mut colors = Vec::with_capacity(t.len());
    let mut alphas = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        let next = t.get(i + 1).copied().unwrap_or_else(|| ctx.cst(ray.t_far));
        let f = field_eval(ctx, &pipe.field, ray.at_var(ti), gauge);
        colors.push(f.color);
        alphas.push(alpha(f.sigma, next - ti));
    }
    let out = composite(tape, &colors, &alphas, pipe.background);

    let mut fine_weights = Vec::with_capacity(t.len());
    let mut trans = 1.0;
    for a in &alphas {
        let a = a.val().clamp(0.0, ALPHA_MAX);
        fine_weights.push(trans * a);
        trans *= 1.0 - a;
    }

    let (coarse_color, coarse_weights) = match &coarse {
        Some(c) => {
            let n = coarse_t.len();
            let mut cols = Vec::with_capacity(n - 1);
            let mut als = Vec::with_capacity(n - 1);
            for i in 0..n - 1 {
                cols.push(c[i].color);
                als.push(alpha(c[i].sigma, ctx.cst(coarse_t[i + 1] - coarse_t[i])));
            }
            let comp = composite(tape, &cols, &als, pipe.background);
            let mut w = Vec::with_capacity(n - 1);
            let mut tr = ctx.cst(1.0);
            for a in als {
                let a = a.clamp(0.0, ALPHA_MAX);
                w.push(tr * a);
                tr = tr * (1.0 - a);
            }
            (Some(comp.color), w)
        }
        None => (None, Vec::new()),
    };

    Ok(RayRender {
        color: out.color,
        transmittance: out.transmittance,
        coarse_color,
        coarse_weights,
        coarse_t,
        fine_t: t.iter().map(|v| v.val()).collect(),
        fine_weights,
        fallback,
    })
}

/// Deterministic pixel color: strata midpoints, no tape.
pub fn render_pixel(pipe: &VolumePipeline, store: &ParamStore, camera: &Camera, x: usize, y: usize) -> [f64; 3] {
    let Some(ray) = camera.pixel_ray(x, y) else {
        return pipe.background;
    };
    let tape = Tape::detached();
    let ctx = Ctx::new(&tape, store);
    let mut u: USource<'_, rand_chacha::ChaCha8Rng> = USource::Midpoints;
    match render_ray(&ctx, pipe, &ray, &mut u) {
        Ok(r) => r.color.map(|c| c.val()),
        Err(_) => pipe.background,
    }
}

/// Renders every pixel of `camera`, rows in parallel.
pub fn render_image(pipe: &VolumePipeline, store: &ParamStore, camera: &Camera) -> ImageBuffer {
    let rows = par::map_indexed(camera.height, |y| {
        (0..camera.width)
            .flat_map(|x| render_pixel(pipe, store, camera, x, y))
            .collect::<Vec<f64>>()
    });
    ImageBuffer {
        width: camera.width,
        height: camera.height,
        data: rows.concat(),
    }
}

/// Dense midpoint quadrature of an analytic field along one ray.
pub fn reference_ray(field: &AnalyticField, ray: &Ray, samples: usize, background: [f64; 3]) -> [f64; 3] {
    let dt = (ray.t_far - ray.t_near) / samples as f64;
    let mut out = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..samples {
        let (sigma, c) = field.eval(ray.at(ray.t_near + (i as f64 + 0.5) * dt));
        if sigma > 0.0 {
            let a = -(-sigma * dt).exp_m1();
            for k in 0..3 {
                out[k] += trans * a * c[k];
            }
            trans *= 1.0 - a;
        }
    }
    std::array::from_fn(|k| out[k] + trans * background[k])
}

/// Reference render of an analytic field with `samples` quadrature points per ray.
pub fn reference_image(field: &AnalyticField, camera: &Camera, samples: usize, background: [f64; 3]) -> ImageBuffer {
    let rows = par::map_indexed(camera.height, |y| {
        (0..camera.width)
            .flat_map(|x| match camera.pixel_ray(x, y) {
                Some(ray) => reference_ray(field, &ray, samples, background),
                None => background,
            })
            .collect::<Vec<f64>>()
    });
    ImageBuffer {
        width: camera.width,
        height: camera.height,
        data: rows.concat(),
    }
}

impl SampleKind {
    pub fn is_importance(self) -> bool {
        matches!(self, SampleKind::PcCdf | SampleKind::PlCdf)
    }
}
