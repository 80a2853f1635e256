//! Maps from 3D query points to the index space of a representation.

use rand::Rng;

use crate::diff::{Ctx, DiffError, ParamId, ParamStore, Tape, Var};
use crate::fields::{field_eval, positional_encode, FeaturePlane, Field, MlpNet};

/// Coordinates a gauge hands to a representation.
#[derive(Debug, Clone)]
pub enum GaugeCoords<'t> {
    Point([Var<'t>; 3]),
    Planes(Vec<[Var<'t>; 2]>),
}

/// Axis-aligned projections, one plane per dropped axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Orthogonal {
    pub dropped: Vec<usize>,
}

impl Orthogonal {
    /// YZ, XZ and XY planes.
    pub fn axis_planes() -> Self {
        Self {
            dropped: vec![0, 1, 2],
        }
    }

    pub fn new(dropped: Vec<usize>) -> Self {
        assert!(!dropped.is_empty() && dropped.iter().all(|&a| a < 3), "dropped axes must be 0, 1 or 2");
        Self { dropped }
    }

    /// Kept coordinates of plane `k`, in increasing axis order.
    pub fn kept(&self, k: usize) -> [usize; 2] {
        match self.dropped[k] {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    pub fn project<'t>(&self, p: [Var<'t>; 3]) -> Vec<[Var<'t>; 2]> {
        (0..self.dropped.len())
            .map(|k| self.kept(k).map(|a| p[a]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetTarget {
    Both,
    ColorOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetKind {
    /// One 2-channel plane per base plane at the given resolution.
    Plane { res: usize },
    /// Encoded point through a small MLP, two outputs per base plane.
    Mlp { hidden: usize, degree: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OffsetField {
    Planes(Vec<FeaturePlane>),
    Mlp { net: MlpNet, degree: usize },
}

/// Residual offset on top of an orthogonal base: `clamp(base + scale * tanh(raw))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutiveGauge {
    pub base: Orthogonal,
    pub offset: OffsetField,
    pub offset_scale: f64,
    pub target: OffsetTarget,
}

impl EvolutiveGauge {
    /// Offset parameters start at zero, so the gauge starts equal to `base`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        base: Orthogonal,
        kind: OffsetKind,
        offset_scale: f64,
        target: OffsetTarget,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let n = base.dropped.len();
        let offset = match kind {
            OffsetKind::Plane { res } => {
                let mut planes = Vec::with_capacity(n);
                for k in 0..n {
                    planes.push(FeaturePlane::new(store, &format!("{name}.offset{k}"), res, 2, || 0.0)?);
                }
                OffsetField::Planes(planes)
            }
            OffsetKind::Mlp { hidden, degree } => {
                let widths = [6 * degree, hidden, hidden, 2 * n];
                let net = MlpNet::new(store, &format!("{name}.mlp"), &widths, true, rng)?;
                OffsetField::Mlp { net, degree }
            }
        };
        Ok(Self {
            base,
            offset,
            offset_scale,
            target,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.offset {
            OffsetField::Planes(planes) => planes.iter().map(|p| p.data).collect(),
            OffsetField::Mlp { net, .. } => net.param_ids(),
        }
    }

    /// Raw (pre-tanh) offsets, one pair per base plane.
    fn raw<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3], base: &[[Var<'t>; 2]]) -> Vec<[Var<'t>; 2]> {
        match &self.offset {
            OffsetField::Planes(planes) => {
                // Plane k is read at the projection of the next plane, which keeps the
                // axis plane k drops; otherwise the offset could not vary along it.
                let n = planes.len();
                (0..n)
                    .map(|k| {
                        let uv = base[(k + 1) % n];
                        let f = planes[k].sample(ctx, uv[0], uv[1]);
                        [f[0], f[1]]
                    })
                    .collect()
            }
            OffsetField::Mlp { net, degree } => {
                let out = net.forward(ctx, &positional_encode(&p, *degree));
                out.chunks(2).map(|c| [c[0], c[1]]).collect()
            }
        }
    }

    fn offset_coords<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3], base: &[[Var<'t>; 2]]) -> Vec<[Var<'t>; 2]> {
        let raw = self.raw(ctx, p, base);
        base.iter()
            .zip(raw)
            .map(|(b, r)| std::array::from_fn(|i| (b[i] + r[i].tanh() * self.offset_scale).clamp(0.0, 1.0)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GaugeTransform {
    Identity,
    Orthogonal(Orthogonal),
    Evolutive(EvolutiveGauge),
}

impl GaugeTransform {
    pub fn is_planar(&self) -> bool {
        !matches!(self, GaugeTransform::Identity)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            GaugeTransform::Evolutive(e) => e.param_ids(),
            _ => Vec::new(),
        }
    }

    /// Coordinates used for density lookups (and color, unless split).
    pub fn apply<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3]) -> GaugeCoords<'t> {
        self.apply_split(ctx, p).0
    }

    /// `(density coords, separate color coords if they differ)`.
    pub fn apply_split<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3]) -> (GaugeCoords<'t>, Option<GaugeCoords<'t>>) {
        match self {
            GaugeTransform::Identity => (GaugeCoords::Point(p), None),
            GaugeTransform::Orthogonal(o) => (GaugeCoords::Planes(o.project(p)), None),
            GaugeTransform::Evolutive(e) => {
                let base = e.base.project(p);
                let shifted = e.offset_coords(ctx, p, &base);
                match e.target {
                    OffsetTarget::Both => (GaugeCoords::Planes(shifted), None),
                    OffsetTarget::ColorOnly => (GaugeCoords::Planes(base), Some(GaugeCoords::Planes(shifted))),
                }
            }
        }
    }
}

/// Plain-value form of [`GaugeTransform::apply`].
pub fn apply_gauge(g: &GaugeTransform, store: &ParamStore, p: [f64; 3]) -> Vec<Vec<f64>> {
    let tape = Tape::detached();
    let ctx = Ctx::new(&tape, store);
    match g.apply(&ctx, p.map(|x| tape.constant(x))) {
        GaugeCoords::Point(q) => vec![q.iter().map(|v| v.val()).collect()],
        GaugeCoords::Planes(planes) => planes.iter().map(|uv| vec![uv[0].val(), uv[1].val()]).collect(),
    }
}

/// Norm of the gradient of `sum(sigma + r + g + b)` over `points` w.r.t. the offset parameters.
pub fn gauge_grad_report(
    g: &GaugeTransform,
    field: &Field,
    store: &ParamStore,
    points: &[[f64; 3]],
) -> Result<f64, DiffError> {
    let ids = g.param_ids();
    if ids.is_empty() {
        return Ok(0.0);
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let mut terms = Vec::with_capacity(points.len() * 4);
    for p in points {
        let s = field_eval(&ctx, field, p.map(|x| tape.constant(x)), Some(g));
        terms.push(s.sigma);
        terms.extend(s.color);
    }
    let root = tape.sum(&terms);
    let grads = tape.backward(root)?.into_sparse();
    let sq: f64 = grads
        .entries
        .iter()
        .filter(|(id, _, _)| ids.contains(id))
        .map(|(_, _, g)| g * g)
        .sum();
    Ok(sq.sqrt())
}

/// Per-step log of offset-gradient norms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaugeGradLog {
    pub steps: Vec<usize>,
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradStats {
    pub mean: f64,
    pub variance: f64,
    pub max: f64,
}

impl GaugeGradLog {
    pub fn record(&mut self, step: usize, norm: f64) {
        self.steps.push(step);
        self.norms.push(norm);
    }

    pub fn stats(&self) -> Option<GradStats> {
        if self.norms.is_empty() {
            return None;
        }
        let n = self.norms.len() as f64;
        let mean = self.norms.iter().sum::<f64>() / n;
        let variance = self.norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let max = self.norms.iter().cloned().fold(0.0, f64::max);
        Some(GradStats { mean, variance, max })
    }
}
