//! Finite-difference suites behind `erm gradcheck`: reverse-mode gradients of
//! every differentiable rendering step against central differences on random
//! small instances.

use erm_core::diff::{finite_diff_check, finite_diff_check_param, finite_diff_check_with, Ctx, DiffError, FdReport, ParamId, ParamStore, Tape, Var};
use erm_core::fields::{FeatureGrid3D, FeaturePlane, Field};
use erm_core::gauge::{EvolutiveGauge, GaugeTransform, OffsetKind, OffsetTarget, Orthogonal};
use erm_core::primitives::{render_splats, reparam_select, DirectionSet, GaussianInit, GaussianSet, SelectMode};
use erm_core::sampling::{PlCdf, Ray, SamplerMode, USource};
use erm_core::volren::{composite, render_ray, unit_cube_hit, Camera, ImageBuffer, SamplerConfig, VolumePipeline};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub const MIN_INSTANCES: usize = 50;
pub const REL_TOL: f64 = 1e-4;
pub const RASTER_REL_TOL: f64 = 1e-3;

pub const SUITES: [&str; 8] = [
    "composite",
    "render_density",
    "render_gauge",
    "inverse_cdf",
    "bilinear",
    "trilinear",
    "rasterize",
    "reparam_select",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.instances >= MIN_INSTANCES && self.max_rel_err < self.tolerance
    }
}

type Rng8 = ChaCha8Rng;

struct Acc {
    instances: usize,
    report: FdReport,
}

impl Acc {
    fn new() -> Self {
        Self {
            instances: 0,
            report: FdReport::default(),
        }
    }

    fn add(&mut self, r: FdReport) {
        self.instances += 1;
        self.report.merge(r);
    }
}

fn composite_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    for _ in 0..MIN_INSTANCES {
        let n = rng.random_range(1..6);
        let x: Vec<f64> = (0..4 * n)
            .map(|i| if i % 4 == 0 { rng.random_range(0.0..5.0) } else { rng.random_range(0.0..1.0) })
            .collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let w: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let bg = [rng.random(), rng.random(), rng.random()];
        acc.add(finite_diff_check(
            |t, x| {
                let cols: Vec<[Var<'_>; 3]> = (0..n).map(|i| [x[4 * i + 1], x[4 * i + 2], x[4 * i + 3]]).collect();
                let als: Vec<Var<'_>> = (0..n).map(|i| -(-(x[4 * i] * d[i])).exp_m1()).collect();
                let c = composite(t, &cols, &als, bg);
                t.dot_const(&c.color, &w)
            },
            &x,
            1e-6,
        )?);
    }
    Ok(acc)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// A ray from outside the unit cube through its middle region.
fn random_ray(rng: &mut Rng8) -> Ray {
    loop {
        let dir = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let o = dir.map(|x| 0.5 + 2.0 * x);
        let target = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
        let d = normalize([target[0] - o[0], target[1] - o[1], target[2] - o[2]]);
        if let Some((a, b)) = unit_cube_hit(o, d) {
            if b - a > 0.3 {
                return Ray::new(o, d, a, b).expect("valid ray");
            }
        }
    }
}

fn pipeline(field: Field, gauge: Option<GaugeTransform>) -> VolumePipeline {
    VolumePipeline {
        field,
        coarse: None,
        gauge,
        sampler: SamplerConfig {
            n_coarse: 0,
            n_fine: 8,
            mode: SamplerMode::Heuristic,
            union: false,
        },
        background: [1.0; 3],
    }
}

fn weighted_color<'t>(ctx: &Ctx<'t>, pipe: &VolumePipeline, ray: &Ray, w: &[f64; 3]) -> Var<'t> {
    let mut u: USource<'_, Rng8> = USource::Midpoints;
    let c = render_ray(ctx, pipe, ray, &mut u).expect("ray renders").color;
    ctx.tape.dot_const(&c, w)
}

/// Central differences of an O(1) color carry ~1e-10 of round-off, so entries
/// with smaller gradients than this cannot be resolved to the tolerance.
const LIVE_FLOOR: f64 = 1e-5;

/// Checks up to 12 entries of `param` that the weighted ray color clearly depends on.
fn ray_check(store: &mut ParamStore, pipe: &VolumePipeline, param: ParamId, rng: &mut Rng8) -> Result<Option<FdReport>, DiffError> {
    let ray = random_ray(rng);
    let w: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let live: Vec<usize> = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let g = tape.backward(weighted_color(&ctx, pipe, &ray, &w))?.into_sparse();
        let mut total = vec![0.0; store.get(param).len()];
        for &(p, i, v) in &g.entries {
            if p == param {
                total[i as usize] += v;
            }
        }
        (0..total.len()).filter(|&i| total[i].abs() > LIVE_FLOOR).collect()
    };
    if live.is_empty() {
        return Ok(None);
    }
    let pick: Vec<usize> = (0..12.min(live.len())).map(|_| live[rng.random_range(0..live.len())]).collect();
    finite_diff_check_param(store, param, Some(&pick), 1e-6, |ctx| weighted_color(ctx, pipe, &ray, &w)).map(Some)
}

fn render_density_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    while acc.instances < MIN_INSTANCES {
        let mut store = ParamStore::new();
        let field = Field::grid(&mut store, "f", 4, 4, 10.0, rng)?;
        let Field::Grid(g) = &field else { unreachable!() };
        let data = g.grid.data;
        let pipe = pipeline(field, None);
        if let Some(r) = ray_check(&mut store, &pipe, data, rng)? {
            acc.add(r);
        }
    }
    Ok(acc)
}

fn render_gauge_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    while acc.instances < MIN_INSTANCES {
        let mut store = ParamStore::new();
        let field = Field::planes(&mut store, "f", 6, 4, 8.0, rng)?;
        let target = if acc.instances % 2 == 0 { OffsetTarget::Both } else { OffsetTarget::ColorOnly };
        let e = EvolutiveGauge::new(&mut store, "g", Orthogonal::axis_planes(), OffsetKind::Plane { res: 5 }, 0.1, target, rng)?;
        let ids = e.param_ids();
        for &id in &ids {
            for v in store.get_mut(id).values_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let pipe = pipeline(field, Some(GaugeTransform::Evolutive(e)));
        let id = ids[rng.random_range(0..ids.len())];
        if let Some(r) = ray_check(&mut store, &pipe, id, rng)? {
            acc.add(r);
        }
    }
    Ok(acc)
}

fn inverse_cdf_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    while acc.instances < MIN_INSTANCES {
        let n = rng.random_range(2..9);
        let mut t = vec![rng.random_range(0.0..1.0)];
        for i in 1..n {
            let w = rng.random_range(0.05..0.6);
            t.push(t[i - 1] + w);
        }
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let total: f64 = (0..n - 1).map(|i| 0.5 * (sigma[i] + sigma[i + 1]) * (t[i + 1] - t[i])).sum();
        // very thin or very deep rays push the gradients under the round-off of
        // the differences
        if sigma.iter().any(|&s| s < 0.05) || total > 6.0 {
            continue;
        }
        let u = rng.random_range(0.05..0.95);
        acc.add(finite_diff_check(
            |tape, x| PlCdf::new(tape, &t, x).expect("valid segments").sample(u).expect("root in bin"),
            &sigma,
            1e-5,
        )?);
    }
    Ok(acc)
}

/// Coordinate in `[0,1]` kept off cell boundaries of a `res` grid.
fn inside_cell(rng: &mut Rng8, res: usize) -> f64 {
    let cells = (res - 1) as f64;
    (rng.random_range(0..res - 1) as f64 + rng.random_range(0.1..0.9)) / cells
}

fn bilinear_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    for _ in 0..MIN_INSTANCES {
        let mut store = ParamStore::new();
        let res = rng.random_range(2..7);
        let plane = FeaturePlane::random(&mut store, "p", res, 2, -1.0, 1.0, rng)?;
        let uv = [inside_cell(rng, res), inside_cell(rng, res)];
        let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        acc.add(finite_diff_check_with(
            &store,
            |ctx, x| {
                let f = plane.sample(ctx, x[0], x[1]);
                ctx.tape.dot_const(&f, &w)
            },
            &uv,
            1e-6,
        )?);
    }
    Ok(acc)
}

fn trilinear_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    for _ in 0..MIN_INSTANCES {
        let mut store = ParamStore::new();
        let res = rng.random_range(2..6);
        let vals: Vec<f64> = (0..res * res * res * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut it = vals.into_iter();
        let grid = FeatureGrid3D::new(&mut store, "g", res, 3, || it.next().unwrap_or(0.0))?;
        let p = [inside_cell(rng, res), inside_cell(rng, res), inside_cell(rng, res)];
        let w = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        acc.add(finite_diff_check_with(
            &store,
            |ctx, x| {
                let f = grid.sample(ctx, [x[0], x[1], x[2]]);
                ctx.tape.dot_const(&f, &w)
            },
            &p,
            1e-6,
        )?);
    }
    Ok(acc)
}

fn rasterize_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let cam = Camera::look_at([0.5, 0.5, -2.0], [0.5, 0.5, 0.5], [0.0, -1.0, 0.0], 0.5, 8, 8);
    let mut acc = Acc::new();
    for _ in 0..MIN_INSTANCES {
        let inits: Vec<GaussianInit> = (0..3)
            .map(|_| {
                let s = rng.random_range(0.06..0.14);
                GaussianInit {
                    mu: [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65), rng.random_range(0.4..0.6)],
                    scale: [s, s * rng.random_range(0.5..1.0), s * rng.random_range(0.5..1.0)],
                    rot: [1.0, rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
                    opacity: rng.random_range(0.2..0.8),
                    color: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
                }
            })
            .collect();
        let mut target = ImageBuffer::new(8, 8);
        for v in target.data.iter_mut() {
            *v = rng.random();
        }
        let mut store = ParamStore::new();
        let set = GaussianSet::new(&mut store, &inits, DirectionSet::circle(4), None)?;
        let ids = set.ids;
        let mut report = FdReport::default();
        for id in [ids.mu, ids.log_scale, ids.rot, ids.opacity, ids.color] {
            report.merge(finite_diff_check_param(&mut store, id, None, 1e-6, |ctx| {
                render_splats(ctx, &set, &cam, [1.0; 3], Some(&target)).loss.expect("target given")
            })?);
        }
        acc.add(report);
    }
    Ok(acc)
}

/// Backward of the hard selection against differences of the soft forward,
/// whose gradient the backward is defined to be.
fn reparam_suite(rng: &mut Rng8) -> Result<Acc, DiffError> {
    let mut acc = Acc::new();
    for _ in 0..MIN_INSTANCES {
        let n = rng.random_range(2..9);
        let dim = rng.random_range(1..4);
        let table: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        acc.add(finite_diff_check(
            |tape, x| {
                let mode = if tape.is_recording() { SelectMode::Hard } else { SelectMode::Soft };
                tape.dot_const(&reparam_select(tape, x, &table, mode), &w)
            },
            &q,
            1e-6,
        )?);
    }
    Ok(acc)
}

/// Runs one suite by name; `None` for an unknown name.
pub fn run_suite(name: &str, seed: u64) -> Option<Result<SuiteResult, DiffError>> {
    let (name, suite, tol): (&'static str, fn(&mut Rng8) -> Result<Acc, DiffError>, f64) = match name {
        "composite" => ("composite", composite_suite, REL_TOL),
        "render_density" => ("render_density", render_density_suite, REL_TOL),
        "render_gauge" => ("render_gauge", render_gauge_suite, REL_TOL),
        "inverse_cdf" => ("inverse_cdf", inverse_cdf_suite, REL_TOL),
        "bilinear" => ("bilinear", bilinear_suite, REL_TOL),
        "trilinear" => ("trilinear", trilinear_suite, REL_TOL),
        "rasterize" => ("rasterize", rasterize_suite, RASTER_REL_TOL),
        "reparam_select" => ("reparam_select", reparam_suite, REL_TOL),
        _ => return None,
    };
    let start = Instant::now();
    let mut rng = Rng8::seed_from_u64(seed);
    Some(suite(&mut rng).map(|acc| SuiteResult {
        name,
        instances: acc.instances,
        entries: acc.report.entries.len(),
        max_rel_err: acc.report.max_rel_err,
        tolerance: tol,
        seconds: start.elapsed().as_secs_f64(),
    }))
}

/// Suites whose name starts with `filter` (all of them without one).
pub fn select_suites(filter: Option<&str>) -> Vec<&'static str> {
    SUITES.iter().copied().filter(|s| filter.is_none_or(|f| s.starts_with(f))).collect()
}

pub fn table(results: &[Result<SuiteResult, (String, DiffError)>]) -> String {
    let mut out = format!(
        "{:<16} {:>9} {:>8} {:>12} {:>9} {:>8}  result\n",
        "suite", "instances", "entries", "max rel err", "tol", "secs"
    );
    for r in results {
        match r {
            Ok(s) => out.push_str(&format!(
                "{:<16} {:>9} {:>8} {:>12.3e} {:>9.0e} {:>8.2}  {}\n",
                s.name,
                s.instances,
                s.entries,
                s.max_rel_err,
                s.tolerance,
                s.seconds,
                if s.passed() { "pass" } else { "FAIL" }
            )),
            Err((name, e)) => out.push_str(&format!("{name:<16} error: {e}  FAIL\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_and_unknown_names() {
        assert_eq!(select_suites(None).len(), SUITES.len());
        assert_eq!(select_suites(Some("render")), vec!["render_density", "render_gauge"]);
        assert!(select_suites(Some("nope")).is_empty());
        assert!(run_suite("nope", 0).is_none());
    }

    #[test]
    fn reparam_suite_passes() {
        let r = run_suite("reparam_select", 1).unwrap().unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
