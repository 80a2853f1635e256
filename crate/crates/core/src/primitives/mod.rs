//! Gaussian splats: storage, CPU rasterization, heuristic density control and
//! learned growth/split.
//!
//! Every attribute lives in a row of a `prim.*` tensor of the [`ParamStore`], so
//! primitives are trained, checkpointed and remapped like any other parameter.
//! A grown or split primitive keeps a link code and is rendered from its raw
//! parameters through the growth/split formulas, which is what lets the loss
//! reach `Q`, `s`, `s'` and `v`.

mod raster;
mod select;

pub use raster::{
    project_gaussian, project_vars, quat_to_matrix, rasterize_splats, sort_splats, three_sigma_radius, ProjectedVars,
    RasterOut, Splat2D, SplatGrad, ALPHA_CAP, COV_FLOOR, NEAR, T_STOP,
};
pub use select::{reparam_select, DirectionSet, DistanceBins, SelectMode};

use crate::diff::{sigmoid, AdamState, Ctx, DiffError, ParamId, ParamStore, ParamTensor, Tape, Var};
use crate::volren::{Camera, ImageBuffer};
use rand::Rng;
use rand_distr::StandardNormal;

/// Default number of growth directions.
pub const N_DIRECTIONS: usize = 128;
pub const HEURISTIC_SPLIT_FACTOR: f64 = 1.6;

/// How a row derives its rendered attributes from its raw parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    None,
    /// Grown along a selected direction.
    Spherical,
    /// Grown a selected distance along the stored `grow_dir`.
    Radial,
    SplitPos,
    SplitNeg,
}

impl Link {
    fn code(self) -> f64 {
        match self {
            Link::None => 0.0,
            Link::Spherical => 1.0,
            Link::Radial => 2.0,
            Link::SplitPos => 3.0,
            Link::SplitNeg => 4.0,
        }
    }

    fn from_code(c: f64) -> Self {
        match c as i64 {
            1 => Link::Spherical,
            2 => Link::Radial,
            3 => Link::SplitPos,
            4 => Link::SplitNeg,
            _ => Link::None,
        }
    }

    pub fn is_split(self) -> bool {
        matches!(self, Link::SplitPos | Link::SplitNeg)
    }
}

/// Initial attributes of a plain primitive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianInit {
    pub mu: [f64; 3],
    /// Standard deviations, positive.
    pub scale: [f64; 3],
    /// Quaternion `[w, x, y, z]`, normalized on insert.
    pub rot: [f64; 4],
    /// In `(0, 1)`.
    pub opacity: f64,
    /// In `(0, 1)`.
    pub color: [f64; 3],
}

/// Rendered attributes of one primitive, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EffGaussian<'t> {
    pub mu: [Var<'t>; 3],
    pub scale: [Var<'t>; 3],
    pub quat: [Var<'t>; 4],
    pub opacity: Var<'t>,
    pub color: [Var<'t>; 3],
}

/// Plain-value counterpart of [`EffGaussian`]; `quat` is normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianValues {
    pub mu: [f64; 3],
    pub scale: [f64; 3],
    pub quat: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    pub link: Link,
}

/// Tensor handles of a primitive set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimIds {
    pub mu: ParamId,
    pub log_scale: ParamId,
    pub rot: ParamId,
    /// Logit.
    pub opacity: ParamId,
    /// Logits.
    pub color: ParamId,
    pub grow_logits: ParamId,
    pub grow_len: ParamId,
    pub split_shift: ParamId,
    pub split_scale: ParamId,
    /// Link codes, not trained.
    pub link: ParamId,
    /// Unit direction of radial growth, not trained.
    pub grow_dir: ParamId,
}

impl PrimIds {
    fn all(&self) -> [(ParamId, &'static str); 11] {
        [
            (self.mu, "mu"),
            (self.log_scale, "log_scale"),
            (self.rot, "rot"),
            (self.opacity, "opacity"),
            (self.color, "color"),
            (self.grow_logits, "grow_logits"),
            (self.grow_len, "grow_len"),
            (self.split_shift, "split_shift"),
            (self.split_scale, "split_scale"),
            (self.link, "link"),
            (self.grow_dir, "grow_dir"),
        ]
    }

    /// Tensors touched by the optimizer.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.all()[..9].iter().map(|(id, _)| *id).collect()
    }
}

/// Raw contents of one row across all tensors.
#[derive(Debug, Clone, PartialEq)]
struct Row {
    mu: [f64; 3],
    log_scale: [f64; 3],
    rot: [f64; 4],
    opacity: f64,
    color: [f64; 3],
    q: Vec<f64>,
    grow_len: f64,
    split_shift: f64,
    split_scale: f64,
    link: Link,
    grow_dir: [f64; 3],
}

/// Edit applied to one row by [`GaussianSet::apply_actions`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    Keep,
    Prune,
    /// Keep and append a copy.
    Clone,
    /// Keep and append a child grown along a learned direction.
    Grow,
    /// Keep and append a child grown a learned distance along the given unit direction.
    GrowRadial([f64; 3]),
    /// Replace by two children drawn from the Gaussian, scales divided by 1.6.
    SplitSampled,
    /// Replace by two mirrored children with learned shift and scale factor.
    SplitLearned,
}

/// Which density-control operators run at a cadence tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Organizer {
    /// Clone and sampled split.
    Heuristic,
    /// Growth with the soft (expected) direction, sampled split.
    SoftGrow,
    /// Growth with the hard direction and soft gradient, sampled split.
    ReparamGrow,
    /// Hard-direction growth and learned split.
    Full,
}

impl Organizer {
    pub fn is_evolutive(self) -> bool {
        self != Organizer::Heuristic
    }

    pub fn select_mode(self) -> SelectMode {
        match self {
            Organizer::SoftGrow => SelectMode::Soft,
            _ => SelectMode::Hard,
        }
    }

    fn small_op(self) -> Action {
        match self {
            Organizer::Heuristic => Action::Clone,
            _ => Action::Grow,
        }
    }

    fn large_op(self) -> Action {
        match self {
            Organizer::Full => Action::SplitLearned,
            _ => Action::SplitSampled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganizeConfig {
    pub cadence: usize,
    /// Mean view-space positional gradient (per pixel of the mean) that makes a candidate.
    pub grad_threshold: f64,
    /// Candidates with max scale at or below this are grown/cloned, above it split.
    pub scale_threshold: f64,
    pub prune_opacity: f64,
    /// Densification is skipped when it would exceed this count.
    pub cap: usize,
}

impl Default for OrganizeConfig {
    fn default() -> Self {
        Self {
            cadence: 100,
            grad_threshold: 2e-4,
            scale_threshold: 0.01,
            prune_opacity: 0.005,
            cap: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrganizeReport {
    /// False off-cadence.
    pub ran: bool,
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub grown: usize,
    pub split: usize,
    pub pruned: usize,
    /// Densification was skipped because of the cap.
    pub capped: bool,
}

/// A set of Gaussian primitives stored as `prim.*` tensors.
#[derive(Debug, Clone)]
pub struct GaussianSet {
    pub ids: PrimIds,
    pub dirs: DirectionSet,
    pub bins: Option<DistanceBins>,
    /// Forward rule for growth selection.
    pub select: SelectMode,
    dir_rows: Vec<Vec<f64>>,
    bin_rows: Vec<Vec<f64>>,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
}

fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.map(|x| x / n)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `phi(v) = 1.2 sigmoid(v) + 1`, the learned split scale divisor.
pub fn split_factor(v: f64) -> f64 {
    1.2 * sigmoid(v) + 1.0
}

impl GaussianSet {
    /// Adds the `prim.*` tensors for `inits` to `store`. Radial growth needs `bins`
    /// with as many entries as `dirs`.
    pub fn new(
        store: &mut ParamStore,
        inits: &[GaussianInit],
        dirs: DirectionSet,
        bins: Option<DistanceBins>,
    ) -> Result<Self, DiffError> {
        assert!(!inits.is_empty(), "a primitive set needs at least one primitive");
        if let Some(b) = &bins {
            assert_eq!(b.len(), dirs.len(), "bins and directions share the logits");
        }
        let nq = dirs.len();
        let rows: Vec<Row> = inits
            .iter()
            .map(|g| {
                assert!(g.scale.iter().all(|&s| s > 0.0), "scales must be positive");
                Row {
                    mu: g.mu,
                    log_scale: g.scale.map(f64::ln),
                    rot: normalize_quat(g.rot),
                    opacity: logit(g.opacity),
                    color: g.color.map(logit),
                    q: vec![0.0; nq],
                    grow_len: 0.0,
                    split_shift: 0.0,
                    split_scale: 0.0,
                    link: Link::None,
                    grow_dir: [0.0; 3],
                }
            })
            .collect();
        let n = rows.len();
        let mut add = |name: &str, width: usize| -> Result<ParamId, DiffError> {
            let shape: Vec<usize> = if width == 1 { vec![n] } else { vec![n, width] };
            Ok(store.add(ParamTensor::zeros(format!("prim.{name}"), &shape)?))
        };
        let ids = PrimIds {
            mu: add("mu", 3)?,
            log_scale: add("log_scale", 3)?,
            rot: add("rot", 4)?,
            opacity: add("opacity", 1)?,
            color: add("color", 3)?,
            grow_logits: add("grow_logits", nq)?,
            grow_len: add("grow_len", 1)?,
            split_shift: add("split_shift", 1)?,
            split_scale: add("split_scale", 1)?,
            link: add("link", 1)?,
            grow_dir: add("grow_dir", 3)?,
        };
        store.get_mut(ids.link).set_requires_grad(false);
        store.get_mut(ids.grow_dir).set_requires_grad(false);
        let mut set = Self::with_ids(ids, dirs, bins);
        set.write_rows(store, &rows)?;
        Ok(set)
    }

    /// Re-attaches to `prim.*` tensors already in `store` (after loading a checkpoint).
    pub fn from_store(store: &mut ParamStore, dirs: DirectionSet, bins: Option<DistanceBins>) -> Option<Self> {
        let f = |n: &str| store.find(&format!("prim.{n}"));
        let ids = PrimIds {
            mu: f("mu")?,
            log_scale: f("log_scale")?,
            rot: f("rot")?,
            opacity: f("opacity")?,
            color: f("color")?,
            grow_logits: f("grow_logits")?,
            grow_len: f("grow_len")?,
            split_shift: f("split_shift")?,
            split_scale: f("split_scale")?,
            link: f("link")?,
            grow_dir: f("grow_dir")?,
        };
        if store.get(ids.grow_logits).row_len() != dirs.len() {
            return None;
        }
        store.get_mut(ids.link).set_requires_grad(false);
        store.get_mut(ids.grow_dir).set_requires_grad(false);
        let mut set = Self::with_ids(ids, dirs, bins);
        set.reset_grad_stats(store.get(ids.mu).shape()[0]);
        Some(set)
    }

    fn with_ids(ids: PrimIds, dirs: DirectionSet, bins: Option<DistanceBins>) -> Self {
        Self {
            ids,
            dir_rows: dirs.rows(),
            bin_rows: bins.as_ref().map(|b| b.rows()).unwrap_or_default(),
            dirs,
            bins,
            select: SelectMode::Hard,
            grad_sum: Vec::new(),
            grad_count: Vec::new(),
        }
    }

    pub fn len(&self, store: &ParamStore) -> usize {
        store.get(self.ids.mu).shape()[0]
    }

    pub fn link(&self, store: &ParamStore, i: usize) -> Link {
        Link::from_code(store.get(self.ids.link).values()[i])
    }

    fn row(&self, store: &ParamStore, i: usize) -> Row {
        let v = |id: ParamId, w: usize| store.get(id).values()[i * w..(i + 1) * w].to_vec();
        let nq = self.dirs.len();
        let a3 = |x: Vec<f64>| [x[0], x[1], x[2]];
        let r = v(self.ids.rot, 4);
        Row {
            mu: a3(v(self.ids.mu, 3)),
            log_scale: a3(v(self.ids.log_scale, 3)),
            rot: [r[0], r[1], r[2], r[3]],
            opacity: v(self.ids.opacity, 1)[0],
            color: a3(v(self.ids.color, 3)),
            q: v(self.ids.grow_logits, nq),
            grow_len: v(self.ids.grow_len, 1)[0],
            split_shift: v(self.ids.split_shift, 1)[0],
            split_scale: v(self.ids.split_scale, 1)[0],
            link: self.link(store, i),
            grow_dir: a3(v(self.ids.grow_dir, 3)),
        }
    }

    fn write_rows(&mut self, store: &mut ParamStore, rows: &[Row]) -> Result<(), DiffError> {
        let n = rows.len();
        let cat = |f: &dyn Fn(&Row) -> Vec<f64>| rows.iter().flat_map(f).collect::<Vec<f64>>();
        let cols: [(ParamId, Vec<f64>); 11] = [
            (self.ids.mu, cat(&|r| r.mu.to_vec())),
            (self.ids.log_scale, cat(&|r| r.log_scale.to_vec())),
            (self.ids.rot, cat(&|r| r.rot.to_vec())),
            (self.ids.opacity, cat(&|r| vec![r.opacity])),
            (self.ids.color, cat(&|r| r.color.to_vec())),
            (self.ids.grow_logits, cat(&|r| r.q.clone())),
            (self.ids.grow_len, cat(&|r| vec![r.grow_len])),
            (self.ids.split_shift, cat(&|r| vec![r.split_shift])),
            (self.ids.split_scale, cat(&|r| vec![r.split_scale])),
            (self.ids.link, cat(&|r| vec![r.link.code()])),
            (self.ids.grow_dir, cat(&|r| r.grow_dir.to_vec())),
        ];
        for (id, values) in cols {
            store.get_mut(id).reshape_rows(n, values)?;
        }
        self.reset_grad_stats(n);
        Ok(())
    }

    /// Rendered attributes of row `i`.
    pub fn effective<'t>(&self, ctx: &Ctx<'t>, i: usize) -> EffGaussian<'t> {
        let ids = &self.ids;
        let p3 = |id: ParamId| -> [Var<'t>; 3] { std::array::from_fn(|k| ctx.param(id, 3 * i + k)) };
        let mut mu = p3(ids.mu);
        let mut scale = p3(ids.log_scale).map(|x| x.exp());
        let quat: [Var<'t>; 4] = std::array::from_fn(|k| ctx.param(ids.rot, 4 * i + k));
        let opacity = ctx.param(ids.opacity, i).sigmoid();
        let color = p3(ids.color).map(|x| x.sigmoid());
        let nq = self.dirs.len();
        let logits = || -> Vec<Var<'t>> { (0..nq).map(|k| ctx.param(ids.grow_logits, nq * i + k)).collect() };
        match self.link(ctx.params, i) {
            Link::None => {}
            Link::Spherical => {
                let d = reparam_select(ctx.tape, &logits(), &self.dir_rows, self.select);
                let len = scale[0].max(scale[1]).max(scale[2]) * 2.0 * ctx.param(ids.grow_len, i).sigmoid();
                for k in 0..3 {
                    mu[k] = mu[k] + len * d[k];
                }
            }
            Link::Radial => {
                assert!(!self.bin_rows.is_empty(), "radial growth needs distance bins");
                let t = reparam_select(ctx.tape, &logits(), &self.bin_rows, self.select)[0];
                let dir = &ctx.params.get(ids.grow_dir).values()[3 * i..3 * i + 3];
                for k in 0..3 {
                    mu[k] = mu[k] + t * dir[k];
                }
            }
            link => {
                let r = quat_to_matrix(quat);
                let sh = ctx.param(ids.split_shift, i).sigmoid();
                let sign = if link == Link::SplitPos { 1.0 } else { -1.0 };
                for (row, m) in r.iter().zip(mu.iter_mut()) {
                    let off = (row[0] * scale[0] + row[1] * scale[1] + row[2] * scale[2]) * sh;
                    *m = *m + off * sign;
                }
                let phi = ctx.param(ids.split_scale, i).sigmoid() * 1.2 + 1.0;
                scale = scale.map(|s| s / phi);
            }
        }
        EffGaussian {
            mu,
            scale,
            quat,
            opacity,
            color,
        }
    }

    pub fn values(&self, store: &ParamStore, i: usize) -> GaussianValues {
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, store);
        let e = self.effective(&ctx, i);
        GaussianValues {
            mu: e.mu.map(|v| v.val()),
            scale: e.scale.map(|v| v.val()),
            quat: normalize_quat(e.quat.map(|v| v.val())),
            opacity: e.opacity.val(),
            color: e.color.map(|v| v.val()),
            link: self.link(store, i),
        }
    }

    pub fn all_values(&self, store: &ParamStore) -> Vec<GaussianValues> {
        (0..self.len(store)).map(|i| self.values(store, i)).collect()
    }

    fn reset_grad_stats(&mut self, n: usize) {
        self.grad_sum = vec![0.0; n];
        self.grad_count = vec![0; n];
    }

    /// Adds one view's positional gradient norms (`None` = not visible).
    pub fn record_view_grads(&mut self, grads: &[Option<f64>]) {
        if self.grad_sum.len() != grads.len() {
            self.reset_grad_stats(grads.len());
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                self.grad_sum[i] += g;
                self.grad_count[i] += 1;
            }
        }
    }

    /// Mean recorded positional gradient per row since the last reorganization.
    pub fn grad_stat(&self) -> Vec<f64> {
        self.grad_sum
            .iter()
            .zip(&self.grad_count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    /// Base row of a child: the parent's rendered position and scale, raw
    /// opacity, color and rotation, evolutive parameters at zero.
    fn child_base(&self, store: &ParamStore, i: usize) -> Row {
        let raw = self.row(store, i);
        let mut row = Row {
            q: vec![0.0; raw.q.len()],
            grow_len: 0.0,
            split_shift: 0.0,
            split_scale: 0.0,
            link: Link::None,
            grow_dir: [0.0; 3],
            ..raw.clone()
        };
        if raw.link != Link::None {
            row.mu = self.values(store, i).mu;
        }
        if raw.link.is_split() {
            let ln_phi = split_factor(raw.split_scale).ln();
            row.log_scale = raw.log_scale.map(|s| s - ln_phi);
        }
        row
    }

    /// Rewrites the set row by row. Children are appended after the surviving
    /// rows, in parent order; Adam moments follow surviving rows and start at
    /// zero for children. Returns the new index of every child.
    pub fn apply_actions<R: Rng>(
        &mut self,
        store: &mut ParamStore,
        adam: &mut AdamState,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<Vec<usize>, DiffError> {
        let n = self.len(store);
        assert_eq!(actions.len(), n, "one action per primitive");
        let mut kept = Vec::new();
        let mut mapping = Vec::new();
        let mut children = Vec::new();
        for (i, act) in actions.iter().enumerate() {
            let keep = matches!(act, Action::Keep | Action::Clone | Action::Grow | Action::GrowRadial(_));
            if keep {
                kept.push(self.row(store, i));
                mapping.push(Some(i));
            }
            match *act {
                Action::Keep | Action::Prune => {}
                Action::Clone => children.push(self.child_base(store, i)),
                Action::Grow => children.push(Row {
                    link: Link::Spherical,
                    ..self.child_base(store, i)
                }),
                Action::GrowRadial(d) => {
                    assert!(self.bins.is_some(), "radial growth needs distance bins");
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    children.push(Row {
                        link: Link::Radial,
                        grow_dir: d.map(|x| x / n),
                        ..self.child_base(store, i)
                    });
                }
                Action::SplitSampled => {
                    let base = self.child_base(store, i);
                    let v = self.values(store, i);
                    let r = rot_matrix(v.quat);
                    for _ in 0..2 {
                        let z: [f64; 3] = std::array::from_fn(|k| v.scale[k] * rng.sample::<f64, _>(StandardNormal));
                        let mu = std::array::from_fn(|a| v.mu[a] + r[a][0] * z[0] + r[a][1] * z[1] + r[a][2] * z[2]);
                        let ln_f = HEURISTIC_SPLIT_FACTOR.ln();
                        children.push(Row {
                            mu,
                            log_scale: base.log_scale.map(|s| s - ln_f),
                            ..base.clone()
                        });
                    }
                }
                Action::SplitLearned => {
                    let base = self.child_base(store, i);
                    children.push(Row {
                        link: Link::SplitPos,
                        ..base.clone()
                    });
                    children.push(Row {
                        link: Link::SplitNeg,
                        ..base
                    });
                }
            }
        }
        let first = kept.len();
        let child_ix: Vec<usize> = (first..first + children.len()).collect();
        mapping.extend(children.iter().map(|_| None));
        kept.extend(children);
        self.write_rows(store, &kept)?;
        for (id, _) in self.ids.all() {
            let w = store.get(id).row_len();
            adam.remap_rows(id, w, &mapping);
        }
        Ok(child_ix)
    }

    /// Appends a child grown from `parent` along the learned direction.
    pub fn grow_spherical<R: Rng>(&mut self, store: &mut ParamStore, adam: &mut AdamState, parent: usize, rng: &mut R) -> Result<usize, DiffError> {
        let mut acts = vec![Action::Keep; self.len(store)];
        acts[parent] = Action::Grow;
        Ok(self.apply_actions(store, adam, &acts, rng)?[0])
    }

    /// Appends a child grown from `parent` a learned distance along `dir`.
    pub fn grow_radial<R: Rng>(
        &mut self,
        store: &mut ParamStore,
        adam: &mut AdamState,
        parent: usize,
        dir: [f64; 3],
        rng: &mut R,
    ) -> Result<usize, DiffError> {
        let mut acts = vec![Action::Keep; self.len(store)];
        acts[parent] = Action::GrowRadial(dir);
        Ok(self.apply_actions(store, adam, &acts, rng)?[0])
    }

    /// Replaces `parent` by its two learned-split children; returns their indices.
    pub fn learned_split<R: Rng>(&mut self, store: &mut ParamStore, adam: &mut AdamState, parent: usize, rng: &mut R) -> Result<[usize; 2], DiffError> {
        let mut acts = vec![Action::Keep; self.len(store)];
        acts[parent] = Action::SplitLearned;
        let c = self.apply_actions(store, adam, &acts, rng)?;
        Ok([c[0], c[1]])
    }

    /// Per-row decision of one density-control tick.
    pub fn plan(&self, store: &ParamStore, cfg: &OrganizeConfig, org: Organizer) -> Vec<Action> {
        let stat = self.grad_stat();
        let mut acts: Vec<Action> = (0..self.len(store))
            .map(|i| {
                let v = self.values(store, i);
                if v.opacity < cfg.prune_opacity {
                    Action::Prune
                } else if stat.get(i).is_some_and(|&g| g > 0.0 && g >= cfg.grad_threshold) {
                    if v.scale.iter().cloned().fold(0.0, f64::max) <= cfg.scale_threshold {
                        org.small_op()
                    } else {
                        org.large_op()
                    }
                } else {
                    Action::Keep
                }
            })
            .collect();
        if acts.iter().all(|a| *a == Action::Prune) {
            // an empty set cannot be stored; the most opaque primitive survives
            let best = (0..acts.len())
                .max_by(|&a, &b| self.values(store, a).opacity.total_cmp(&self.values(store, b).opacity))
                .unwrap_or(0);
            acts[best] = Action::Keep;
        }
        acts
    }

    /// One density-control tick at training iteration `iter`. Off-cadence ticks
    /// leave the set untouched.
    pub fn organize_step<R: Rng>(
        &mut self,
        store: &mut ParamStore,
        adam: &mut AdamState,
        cfg: &OrganizeConfig,
        org: Organizer,
        iter: usize,
        rng: &mut R,
    ) -> Result<OrganizeReport, DiffError> {
        let before = self.len(store);
        let mut report = OrganizeReport {
            before,
            after: before,
            ..Default::default()
        };
        if cfg.cadence == 0 || iter == 0 || iter % cfg.cadence != 0 {
            return Ok(report);
        }
        report.ran = true;
        self.select = org.select_mode();
        let mut acts = self.plan(store, cfg, org);
        let added: usize = acts
            .iter()
            .map(|a| match a {
                Action::Clone | Action::Grow | Action::GrowRadial(_) | Action::SplitSampled | Action::SplitLearned => 1,
                _ => 0,
            })
            .sum();
        let pruned = acts.iter().filter(|a| **a == Action::Prune).count();
        if before - pruned + added > cfg.cap {
            report.capped = true;
            for a in acts.iter_mut() {
                if *a != Action::Prune {
                    *a = Action::Keep;
                }
            }
        }
        for a in &acts {
            match a {
                Action::Clone => report.cloned += 1,
                Action::Grow | Action::GrowRadial(_) => report.grown += 1,
                Action::SplitSampled | Action::SplitLearned => report.split += 1,
                Action::Prune => report.pruned += 1,
                Action::Keep => {}
            }
        }
        self.apply_actions(store, adam, &acts, rng)?;
        report.after = self.len(store);
        Ok(report)
    }

    /// ASCII PLY of rendered positions, colors, opacities and scales.
    pub fn to_ply(&self, store: &ParamStore) -> String {
        let vals = self.all_values(store);
        let mut out = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nproperty float opacity\n\
             property float scale_0\nproperty float scale_1\nproperty float scale_2\nend_header\n",
            vals.len()
        );
        for v in vals {
            let c = v.color.map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8);
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                v.mu[0] as f32, v.mu[1] as f32, v.mu[2] as f32, c[0], c[1], c[2], v.opacity as f32, v.scale[0] as f32,
                v.scale[1] as f32, v.scale[2] as f32
            ));
        }
        out
    }
}

fn rot_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let tape = Tape::detached();
    quat_to_matrix(q.map(|x| tape.constant(x))).map(|r| r.map(|v| v.val()))
}

/// Output of [`render_splats`].
pub struct SplatRender<'t> {
    pub image: ImageBuffer,
    /// Mean squared error against the target, on the tape.
    pub loss: Option<Var<'t>>,
    /// Norm of the loss gradient w.r.t. each row's 2D mean; `None` when culled.
    pub view_grad: Vec<Option<f64>>,
}

/// Projects, sorts and blends every primitive of `set`. With a target the
/// squared-error loss is recorded as one fused node over the splat parameters.
pub fn render_splats<'t>(
    ctx: &Ctx<'t>,
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    target: Option<&ImageBuffer>,
) -> SplatRender<'t> {
    let n = set.len(ctx.params);
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut splats = Vec::new();
    let mut vars: Vec<Option<[Var<'t>; 9]>> = vec![None; n];
    for (i, slot) in vars.iter_mut().enumerate() {
        let e = set.effective(ctx, i);
        let Some(p) = project_vars(camera, e.mu, e.scale, e.quat) else {
            continue;
        };
        let cov = p.cov.map(|v| v.val());
        let mean = p.mean.map(|v| v.val());
        let radius = three_sigma_radius(cov);
        if mean[0] + radius < 0.0 || mean[0] - radius > w || mean[1] + radius < 0.0 || mean[1] - radius > h {
            continue;
        }
        splats.push(Splat2D {
            index: i,
            mean,
            cov,
            conic: p.conic.map(|v| v.val()),
            depth: p.depth,
            opacity: e.opacity.val(),
            color: e.color.map(|v| v.val()),
            radius,
        });
        *slot = Some([
            p.mean[0], p.mean[1], p.conic[0], p.conic[1], p.conic[2], e.opacity, e.color[0], e.color[1], e.color[2],
        ]);
    }
    sort_splats(&mut splats);
    let out = rasterize_splats(&splats, camera.width, camera.height, background, target);
    let mut view_grad = vec![None; n];
    let loss = target.map(|_| {
        let mut edges = Vec::with_capacity(splats.len() * 9);
        for (s, g) in splats.iter().zip(&out.grads) {
            let v = vars[s.index].expect("visible splat has vars");
            edges.extend(v.iter().zip(g).map(|(&v, &g)| (v, g)));
            view_grad[s.index] = Some(g[0].hypot(g[1]));
        }
        ctx.tape.custom("raster_l2", out.loss, edges)
    });
    SplatRender {
        image: out.image,
        loss,
        view_grad,
    }
}

/// Plain render of `set` without gradients.
pub fn rasterize(set: &GaussianSet, store: &ParamStore, camera: &Camera, background: [f64; 3]) -> ImageBuffer {
    let tape = Tape::detached();
    render_splats(&Ctx::new(&tape, store), set, camera, background, None).image
}
