//! Scene representations `p -> (density, color)`.

mod analytic;
mod interp;
mod mlp;

pub use analytic::{AnalyticField, Shape, ShapeKind};
pub use interp::{bilinear_weights, trilinear_weights, FeatureGrid3D, FeaturePlane};
pub use mlp::{positional_encode, Dense, MlpField, MlpNet, DEFAULT_MLP_DEGREE, DEFAULT_MLP_HIDDEN};

use rand::Rng;

use crate::diff::{Ctx, DiffError, ParamId, ParamStore, ParamTensor, Var};
use crate::gauge::{GaugeCoords, GaugeTransform, Orthogonal};

/// Density and color at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// [`FieldOutput`] on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FieldSample<'t> {
    pub sigma: Var<'t>,
    pub color: [Var<'t>; 3],
}

impl FieldSample<'_> {
    pub fn value(&self) -> FieldOutput {
        FieldOutput {
            sigma: self.sigma.val(),
            color: self.color.map(|c| c.val()),
        }
    }
}

/// Linear decoder from a feature vector to `(softplus density, sigmoid color)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearHead {
    pub w: ParamId,
    pub b: ParamId,
    pub features: usize,
    pub density_scale: f64,
}

impl LinearHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        features: usize,
        density_scale: f64,
        density_bias: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let bound = 1.0 / (features as f64).sqrt();
        let w = (0..4 * features).map(|_| rng.random_range(-bound..bound)).collect();
        let w = store.add(ParamTensor::new(format!("{name}.w"), &[4, features], w)?);
        let b = store.add(ParamTensor::new(
            format!("{name}.b"),
            &[4],
            vec![density_bias, 0.0, 0.0, 0.0],
        )?);
        Ok(Self {
            w,
            b,
            features,
            density_scale,
        })
    }

    fn raw<'t>(&self, ctx: &Ctx<'t>, feat: &[Var<'t>]) -> [Var<'t>; 4] {
        let w = ctx.params.get(self.w).values();
        let b = ctx.params.get(self.b).values();
        std::array::from_fn(|o| {
            let row = &w[o * self.features..(o + 1) * self.features];
            let val = row
                .iter()
                .zip(feat)
                .fold(b[o], |acc, (wi, f)| acc + wi * f.val());
            let edges = (0..self.features)
                .flat_map(|i| {
                    [
                        (ctx.param(self.w, o * self.features + i), feat[i].val()),
                        (feat[i], row[i]),
                    ]
                })
                .chain(std::iter::once((ctx.param(self.b, o), 1.0)));
            ctx.tape.custom("linear", val, edges)
        })
    }

    pub fn decode<'t>(&self, ctx: &Ctx<'t>, feat: &[Var<'t>]) -> FieldSample<'t> {
        let raw = self.raw(ctx, feat);
        self.activate(raw)
    }

    fn activate<'t>(&self, raw: [Var<'t>; 4]) -> FieldSample<'t> {
        FieldSample {
            sigma: raw[0].softplus() * self.density_scale,
            color: [raw[1].sigmoid(), raw[2].sigmoid(), raw[3].sigmoid()],
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Dense 3D feature grid with a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: FeatureGrid3D,
    pub head: LinearHead,
}

impl GridField {
    pub fn eval<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3]) -> FieldSample<'t> {
        let feat = self.grid.sample(ctx, p);
        self.head.decode(ctx, &feat)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.grid.data];
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Three axis-aligned feature planes multiplied element-wise, then a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneField {
    pub planes: Vec<FeaturePlane>,
    pub head: LinearHead,
}

impl PlaneField {
    /// Product of per-plane features at the given plane coordinates.
    pub fn features<'t>(&self, ctx: &Ctx<'t>, coords: &[[Var<'t>; 2]]) -> Vec<Var<'t>> {
        assert_eq!(coords.len(), self.planes.len(), "one coordinate pair per plane");
        let mut acc: Option<Vec<Var<'t>>> = None;
        for (plane, uv) in self.planes.iter().zip(coords) {
            let f = plane.sample(ctx, uv[0], uv[1]);
            acc = Some(match acc {
                None => f,
                Some(a) => a.into_iter().zip(f).map(|(x, y)| x * y).collect(),
            });
        }
        acc.expect("plane field has at least one plane")
    }

    pub fn eval_coords<'t>(
        &self,
        ctx: &Ctx<'t>,
        density: &[[Var<'t>; 2]],
        color: Option<&[[Var<'t>; 2]]>,
    ) -> FieldSample<'t> {
        let feat = self.features(ctx, density);
        let raw = self.head.raw(ctx, &feat);
        match color {
            None => self.head.activate(raw),
            Some(color) => {
                let cfeat = self.features(ctx, color);
                let craw = self.head.raw(ctx, &cfeat);
                self.head.activate([raw[0], craw[1], craw[2], craw[3]])
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.planes.iter().map(|p| p.data).collect();
        ids.extend(self.head.param_ids());
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Analytic(AnalyticField),
    Grid(GridField),
    Plane(PlaneField),
    Mlp(MlpField),
}

impl Field {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Field::Analytic(_) => Vec::new(),
            Field::Grid(g) => g.param_ids(),
            Field::Plane(p) => p.param_ids(),
            Field::Mlp(m) => m.net.param_ids(),
        }
    }

    /// Whether the field indexes feature planes, and so takes planar gauges.
    pub fn is_planar(&self) -> bool {
        matches!(self, Field::Plane(_))
    }
}

/// Applies `gauge` to the clamped point, then queries `field`.
///
/// Planar fields without a planar gauge use the orthogonal projection. Volumetric
/// fields (grid, MLP, analytic) take the 3D point; planar gauges are rejected when
/// a pipeline is assembled, so here they are ignored.
pub fn field_eval<'t>(
    ctx: &Ctx<'t>,
    field: &Field,
    p: [Var<'t>; 3],
    gauge: Option<&GaugeTransform>,
) -> FieldSample<'t> {
    let p = p.map(|x| x.clamp(0.0, 1.0));
    match field {
        Field::Analytic(a) => {
            let (sigma, color) = a.eval(p.map(|x| x.val()));
            FieldSample {
                sigma: ctx.cst(sigma),
                color: ctx.cst3(color),
            }
        }
        Field::Grid(g) => g.eval(ctx, volumetric_point(ctx, p, gauge)),
        Field::Mlp(m) => {
            let raw = m.raw(ctx, volumetric_point(ctx, p, gauge));
            FieldSample {
                sigma: raw[0].softplus(),
                color: [raw[1].sigmoid(), raw[2].sigmoid(), raw[3].sigmoid()],
            }
        }
        Field::Plane(pf) => {
            let default_gauge;
            let gauge = match gauge {
                Some(g) if g.is_planar() => g,
                _ => {
                    default_gauge = GaugeTransform::Orthogonal(Orthogonal::axis_planes());
                    &default_gauge
                }
            };
            let (density, color) = gauge.apply_split(ctx, p);
            let (GaugeCoords::Planes(d), c) = (density, color) else {
                unreachable!("planar gauge yields plane coordinates")
            };
            match c {
                None => pf.eval_coords(ctx, &d, None),
                Some(GaugeCoords::Planes(c)) => pf.eval_coords(ctx, &d, Some(&c)),
                Some(GaugeCoords::Point(_)) => unreachable!("planar gauge yields plane coordinates"),
            }
        }
    }
}

fn volumetric_point<'t>(ctx: &Ctx<'t>, p: [Var<'t>; 3], gauge: Option<&GaugeTransform>) -> [Var<'t>; 3] {
    match gauge {
        Some(g) if !g.is_planar() => match g.apply(ctx, p) {
            GaugeCoords::Point(q) => q,
            GaugeCoords::Planes(_) => p,
        },
        _ => p,
    }
}

/// Builders with the defaults used across the crate.
impl Field {
    pub fn grid(
        store: &mut ParamStore,
        name: &str,
        res: usize,
        features: usize,
        density_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let grid = FeatureGrid3D::new(store, &format!("{name}.grid"), res, features, || {
            rng.random_range(-0.1..0.1)
        })?;
        let head = LinearHead::new(store, &format!("{name}.head"), features, density_scale, -1.0, rng)?;
        Ok(Field::Grid(GridField { grid, head }))
    }

    /// Three planes (YZ, XZ, XY) of `res x res x features`.
    pub fn planes(
        store: &mut ParamStore,
        name: &str,
        res: usize,
        features: usize,
        density_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let mut planes = Vec::new();
        for k in 0..3 {
            planes.push(FeaturePlane::random(
                store,
                &format!("{name}.plane{k}"),
                res,
                features,
                0.8,
                1.2,
                rng,
            )?);
        }
        let head = LinearHead::new(store, &format!("{name}.head"), features, density_scale, -1.0, rng)?;
        Ok(Field::Plane(PlaneField { planes, head }))
    }

    pub fn mlp(
        store: &mut ParamStore,
        name: &str,
        hidden: &[usize],
        degree: usize,
        zero_output: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        Ok(Field::Mlp(MlpField::new(store, name, hidden, degree, zero_output, rng)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use crate::gauge::{EvolutiveGauge, OffsetKind, OffsetTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt<'t>(tape: &'t Tape, p: [f64; 3]) -> [Var<'t>; 3] {
        p.map(|x| tape.constant(x))
    }

    #[test]
    fn analytic_inside_and_empty() {
        let field = Field::Analytic(AnalyticField::new(vec![Shape::sphere(
            [0.5; 3],
            0.25,
            10.0,
            [0.2, 0.4, 0.6],
        )]));
        let store = ParamStore::new();
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let inside = field_eval(&ctx, &field, pt(&tape, [0.5, 0.5, 0.5]), None).value();
        assert_eq!(inside.sigma, 10.0);
        assert_eq!(inside.color, [0.2, 0.4, 0.6]);
        let outside = field_eval(&ctx, &field, pt(&tape, [0.05, 0.9, 0.1]), None).value();
        assert_eq!(outside.sigma, 0.0);
    }

    #[test]
    fn zero_output_mlp_is_neutral() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let field = Field::mlp(&mut store, "mlp", &DEFAULT_MLP_HIDDEN, DEFAULT_MLP_DEGREE, true, &mut rng).unwrap();
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let out = field_eval(&ctx, &field, pt(&tape, [0.3, 0.7, 0.1]), None).value();
        assert!((out.sigma - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((out.sigma - 0.6931).abs() < 1e-4);
        assert_eq!(out.color, [0.5; 3]);
    }

    #[test]
    fn outputs_respect_ranges() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fields = [
            Field::grid(&mut store, "g", 4, 3, 10.0, &mut rng).unwrap(),
            Field::planes(&mut store, "p", 4, 3, 10.0, &mut rng).unwrap(),
            Field::mlp(&mut store, "m", &[16, 16], 3, false, &mut rng).unwrap(),
        ];
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        for f in &fields {
            for _ in 0..50 {
                let p = [rng.random(), rng.random(), rng.random()];
                let out = field_eval(&ctx, f, pt(&tape, p), None).value();
                assert!(out.sigma >= 0.0);
                assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }

    #[test]
    fn identity_gauge_matches_zero_evolutive_bitwise() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = Field::planes(&mut store, "f", 6, 4, 10.0, &mut rng).unwrap();
        let evo = GaugeTransform::Evolutive(
            EvolutiveGauge::new(&mut store, "gauge", Orthogonal::axis_planes(), OffsetKind::Plane { res: 6 }, 0.1, OffsetTarget::Both, &mut rng)
                .unwrap(),
        );
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        for _ in 0..100 {
            let p = [rng.random(), rng.random(), rng.random()];
            let a = field_eval(&ctx, &field, pt(&tape, p), Some(&GaugeTransform::Identity)).value();
            let b = field_eval(&ctx, &field, pt(&tape, p), Some(&evo)).value();
            assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
            for c in 0..3 {
                assert_eq!(a.color[c].to_bits(), b.color[c].to_bits());
            }
        }
    }

    #[test]
    fn out_of_domain_queries_clamp() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = Field::grid(&mut store, "g", 4, 2, 1.0, &mut rng).unwrap();
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let a = field_eval(&ctx, &field, pt(&tape, [1.4, -0.2, 0.5]), None).value();
        let b = field_eval(&ctx, &field, pt(&tape, [1.0, 0.0, 0.5]), None).value();
        assert_eq!(a, b);
    }
}
