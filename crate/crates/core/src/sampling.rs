//! Placement of samples along rays: stratified baselines, the piecewise-constant
//! inverse CDF, and the differentiable piecewise-linear inverse CDF.

use rand::Rng;
use thiserror::Error;

use crate::diff::{Ctx, Tape, Var};
use crate::fields::{field_eval, Field, FieldSample};
use crate::gauge::GaugeTransform;

/// Total optical depth at or below this counts as an empty ray.
pub const EPS_TOTAL: f64 = 1e-8;
/// Relative density change below which a bin is treated as constant.
pub const EPS_LIN: f64 = 1e-12;
const ROOT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("ray carries no optical depth")]
    EmptyRay,
    #[error("invalid ray segments: {0}")]
    BadSegments(&'static str),
    #[error("invalid ray: {0}")]
    BadRay(&'static str),
    #[error("inverse root {x} outside bin {bin} of width {delta}")]
    RootOutOfBin { bin: usize, x: f64, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `dir`.
    pub fn new(origin: [f64; 3], dir: [f64; 3], t_near: f64, t_far: f64) -> Result<Self, SamplingError> {
        let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(SamplingError::BadRay("direction must be nonzero and finite"));
        }
        if !(t_near < t_far) || !t_near.is_finite() || !t_far.is_finite() {
            return Err(SamplingError::BadRay("need finite t_near < t_far"));
        }
        Ok(Self {
            origin,
            dir: dir.map(|d| d / n),
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + t * self.dir[i])
    }

    pub fn at_var<'t>(&self, t: Var<'t>) -> [Var<'t>; 3] {
        std::array::from_fn(|i| t * self.dir[i] + self.origin[i])
    }
}

/// Boundaries `t_1 < ... < t_N` with densities `sigma_i >= 0` at each boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySegments {
    t: Vec<f64>,
    sigma: Vec<f64>,
}

impl RaySegments {
    pub fn new(t: Vec<f64>, sigma: Vec<f64>) -> Result<Self, SamplingError> {
        validate(&t, sigma.iter().copied())?;
        Ok(Self { t, sigma })
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Bin containing `t` (clamped): largest `i < N-1` with `t_i <= t`.
    fn bin_of(&self, t: f64) -> usize {
        let n = self.t.len();
        self.t.partition_point(|&ti| ti <= t).clamp(1, n - 1) - 1
    }

    /// Cumulative optical depth at every boundary.
    pub fn cumulative_depth(&self) -> Vec<f64> {
        let mut tau = Vec::with_capacity(self.t.len());
        tau.push(0.0);
        for i in 0..self.t.len() - 1 {
            let d = self.t[i + 1] - self.t[i];
            tau.push(tau[i] + 0.5 * (self.sigma[i] + self.sigma[i + 1]) * d);
        }
        tau
    }
}

fn validate(t: &[f64], sigma: impl ExactSizeIterator<Item = f64>) -> Result<(), SamplingError> {
    if t.len() < 2 {
        return Err(SamplingError::BadSegments("need at least two boundaries"));
    }
    if sigma.len() != t.len() {
        return Err(SamplingError::BadSegments("one density per boundary"));
    }
    if t.iter().any(|x| !x.is_finite()) || t.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SamplingError::BadSegments("boundaries must be finite and strictly increasing"));
    }
    for s in sigma {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(SamplingError::BadSegments("densities must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// Discrete compositing weights over the `N-1` bins, using the left-boundary density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityWeights {
    pub weights: Vec<f64>,
    pub transmittance: f64,
    /// `weights / sum(weights)`, or uniform when every weight is zero.
    pub normalized: Vec<f64>,
    pub degenerate: bool,
}

pub fn weights_from_density(seg: &RaySegments) -> DensityWeights {
    let bins = seg.len() - 1;
    let mut weights = Vec::with_capacity(bins);
    let mut trans = 1.0;
    for i in 0..bins {
        let alpha = -(-seg.sigma[i] * (seg.t[i + 1] - seg.t[i])).exp_m1();
        weights.push(alpha * trans);
        trans *= 1.0 - alpha;
    }
    let total: f64 = weights.iter().sum();
    let degenerate = !(total > 0.0);
    let normalized = if degenerate {
        vec![1.0 / bins as f64; bins]
    } else {
        weights.iter().map(|w| w / total).collect()
    };
    DensityWeights {
        weights,
        transmittance: trans,
        normalized,
        degenerate,
    }
}

/// Piecewise-linear density; `t` outside the boundaries clamps.
pub fn sigma_linear(seg: &RaySegments, t: f64) -> f64 {
    let n = seg.len();
    if t <= seg.t[0] {
        return seg.sigma[0];
    }
    if t >= seg.t[n - 1] {
        return seg.sigma[n - 1];
    }
    let i = seg.bin_of(t);
    let f = (t - seg.t[i]) / (seg.t[i + 1] - seg.t[i]);
    seg.sigma[i] + f * (seg.sigma[i + 1] - seg.sigma[i])
}

/// `integral of sigma_linear from t_1 to t`, `t` clamped to the boundaries.
pub fn optical_depth(seg: &RaySegments, t: f64) -> f64 {
    optical_depth_with(seg, &seg.cumulative_depth(), t)
}

fn optical_depth_with(seg: &RaySegments, tau: &[f64], t: f64) -> f64 {
    let n = seg.len();
    let t = t.clamp(seg.t[0], seg.t[n - 1]);
    let i = seg.bin_of(t);
    let d = seg.t[i + 1] - seg.t[i];
    let x = t - seg.t[i];
    tau[i] + seg.sigma[i] * x + (seg.sigma[i + 1] - seg.sigma[i]) * x * x / (2.0 * d)
}

/// `(1 - exp(-tau(t))) / (1 - exp(-tau(t_N)))`.
pub fn continuous_cdf(seg: &RaySegments, t: f64) -> Result<f64, SamplingError> {
    let tau = seg.cumulative_depth();
    let total = tau[seg.len() - 1];
    if total <= EPS_TOTAL {
        return Err(SamplingError::EmptyRay);
    }
    let at = optical_depth_with(seg, &tau, t);
    Ok((-at).exp_m1() / (-total).exp_m1())
}

/// Differentiable continuous CDF of one ray, built once and inverted per sample.
pub struct PlCdf<'t> {
    t: Vec<f64>,
    sigma: Vec<Var<'t>>,
    tau: Vec<Var<'t>>,
}

impl<'t> PlCdf<'t> {
    pub fn new(tape: &'t Tape, t: &[f64], sigma: &[Var<'t>]) -> Result<Self, SamplingError> {
        validate(t, sigma.iter().map(|s| s.val()))?;
        let mut tau = Vec::with_capacity(t.len());
        tau.push(tape.constant(0.0));
        for i in 0..t.len() - 1 {
            let d = t[i + 1] - t[i];
            tau.push(tau[i] + (sigma[i] + sigma[i + 1]) * (0.5 * d));
        }
        if tau[t.len() - 1].val() <= EPS_TOTAL {
            return Err(SamplingError::EmptyRay);
        }
        Ok(Self {
            t: t.to_vec(),
            sigma: sigma.to_vec(),
            tau,
        })
    }

    pub fn total_depth(&self) -> Var<'t> {
        self.tau[self.tau.len() - 1]
    }

    /// Solves `F(t) = u` in closed form, recording every step on the tape.
    pub fn sample(&self, u: f64) -> Result<Var<'t>, SamplingError> {
        let total = self.total_depth();
        // tau* = -ln(1 - u (1 - e^{-tau_N}))
        let target = -((-total).exp_m1() * u).ln_1p();
        let tv = target.val();
        let n = self.t.len();
        // first bin whose upper cumulative depth reaches the target
        let i = self.tau[1..].partition_point(|x| x.val() < tv).min(n - 2);
        let delta = self.t[i + 1] - self.t[i];
        let (s0, s1) = (self.sigma[i], self.sigma[i + 1]);
        let c = target - self.tau[i];
        let x = if c.val() <= 0.0 {
            c * 0.0
        } else if (s1.val() - s0.val()).abs() < EPS_LIN * s0.val().abs().max(s1.val().abs()) {
            c / s0
        } else {
            // a x^2 + b x = c with a = (s1 - s0) / (2 delta), b = s0; the root in
            // [0, delta] is 2c / (b + sqrt(b^2 + 4ac)), which never cancels.
            let a = (s1 - s0) * (0.5 / delta);
            let disc = (s0 * s0 + a * c * 4.0).max(c * 0.0);
            c * 2.0 / (s0 + disc.sqrt())
        };
        let xv = x.val();
        let tol = ROOT_TOL * delta.max(1.0);
        if !(xv >= -tol && xv <= delta + tol) {
            return Err(SamplingError::RootOutOfBin { bin: i, x: xv, delta });
        }
        Ok(x.clamp(0.0, delta) + self.t[i])
    }
}

/// Plain-value inverse of [`continuous_cdf`].
pub fn inverse_cdf_sample(seg: &RaySegments, u: f64) -> Result<f64, SamplingError> {
    let tape = Tape::detached();
    let sigma: Vec<Var<'_>> = seg.sigma.iter().map(|&s| tape.constant(s)).collect();
    PlCdf::new(&tape, &seg.t, &sigma)?.sample(u).map(|v| v.val())
}

/// Inverse of the piecewise-constant CDF built from the normalized bin weights.
/// `u` must be sorted ascending; the result is too.
pub fn pc_inverse_cdf(seg: &RaySegments, u: &[f64]) -> Vec<f64> {
    let w = weights_from_density(seg);
    let mut cdf = Vec::with_capacity(seg.len());
    cdf.push(0.0);
    for wi in &w.normalized {
        cdf.push(cdf[cdf.len() - 1] + wi);
    }
    let last = cdf.len() - 1;
    cdf[last] = 1.0;
    u.iter()
        .map(|&u| {
            let i = cdf[1..].partition_point(|&c| c < u).min(last - 1);
            let span = cdf[i + 1] - cdf[i];
            let f = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.0 };
            seg.t[i] + f * (seg.t[i + 1] - seg.t[i])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Uniform,
    Stratified,
    PcCdf,
    PlCdf,
}

/// Sorted sample depths along one ray.
#[derive(Debug, Clone)]
pub struct SampleSet<'t> {
    pub t: Vec<Var<'t>>,
    pub kind: SampleKind,
    pub differentiable: bool,
    /// Set when an empty coarse ray forced the stratified fallback.
    pub fallback: bool,
}

impl SampleSet<'_> {
    pub fn values(&self) -> Vec<f64> {
        self.t.iter().map(|v| v.val()).collect()
    }
}

/// Uniform draws in `(0,1)` for training, or strata midpoints for inference.
pub enum USource<'a, R: Rng> {
    Random(&'a mut R),
    Midpoints,
}

impl<R: Rng> USource<'_, R> {
    /// `m` sorted values in `(0,1)`: one per equal stratum.
    pub fn strata(&mut self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|k| {
                let j = match self {
                    USource::Random(rng) => rng.random::<f64>(),
                    USource::Midpoints => 0.5,
                };
                (k as f64 + j) / m as f64
            })
            .collect()
    }
}

pub fn stratified_sample<R: Rng>(ray: &Ray, m: usize, rng: &mut R) -> Vec<f64> {
    assert!(m >= 1, "need at least one sample");
    let len = ray.t_far - ray.t_near;
    USource::Random(rng)
        .strata(m)
        .into_iter()
        .map(|u| (ray.t_near + u * len).min(ray.t_far))
        .collect()
}

/// `n` evenly spaced boundaries from `t_near` to `t_far` inclusive.
pub fn uniform_boundaries(ray: &Ray, n: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two boundaries");
    let len = ray.t_far - ray.t_near;
    (0..n)
        .map(|i| {
            if i == n - 1 {
                ray.t_far
            } else {
                ray.t_near + len * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Heuristic,
    Evolutive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchicalConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub mode: SamplerMode,
    /// Merge coarse boundaries into the returned set.
    pub union: bool,
}

/// Fine samples plus the coarse evaluation they came from.
pub struct Hierarchical<'t> {
    pub samples: SampleSet<'t>,
    pub coarse_t: Vec<f64>,
    pub coarse: Vec<FieldSample<'t>>,
}

/// Coarse-to-fine placement along `ray`.
///
/// Heuristic mode inverts the piecewise-constant CDF of the coarse weights with the
/// coarse field detached. Evolutive mode inverts the piecewise-linear CDF on the tape,
/// so the returned depths carry gradients back to the coarse field.
pub fn hierarchical_sample<'t, R: Rng>(
    ctx: &Ctx<'t>,
    coarse_field: &Field,
    gauge: Option<&GaugeTransform>,
    ray: &Ray,
    cfg: &HierarchicalConfig,
    u: &mut USource<'_, R>,
) -> Result<Hierarchical<'t>, SamplingError> {
    let coarse_t = uniform_boundaries(ray, cfg.n_coarse);
    let coarse: Vec<FieldSample<'t>> = coarse_t
        .iter()
        .map(|&t| field_eval(ctx, coarse_field, ray.at_var(ctx.cst(t)), gauge))
        .collect();
    let us = u.strata(cfg.n_fine);
    let stratified = |us: &[f64]| -> Vec<f64> {
        us.iter()
            .map(|&u| (ray.t_near + u * (ray.t_far - ray.t_near)).min(ray.t_far))
            .collect()
    };

    let (mut t, kind, differentiable, fallback): (Vec<Var<'t>>, _, _, _) = match cfg.mode {
        SamplerMode::Heuristic => {
            let sigma: Vec<f64> = coarse.iter().map(|s| s.sigma.val()).collect();
            let seg = RaySegments::new(coarse_t.clone(), sigma)?;
            let w = weights_from_density(&seg);
            if w.degenerate {
                (stratified(&us).into_iter().map(|x| ctx.cst(x)).collect(), SampleKind::Stratified, false, true)
            } else {
                let t = pc_inverse_cdf(&seg, &us);
                (t.into_iter().map(|x| ctx.cst(x)).collect(), SampleKind::PcCdf, false, false)
            }
        }
        SamplerMode::Evolutive => {
            let sigma: Vec<Var<'t>> = coarse.iter().map(|s| s.sigma).collect();
            match PlCdf::new(ctx.tape, &coarse_t, &sigma) {
                Ok(cdf) => {
                    let t = us.iter().map(|&u| cdf.sample(u)).collect::<Result<Vec<_>, _>>()?;
                    (t, SampleKind::PlCdf, true, false)
                }
                Err(SamplingError::EmptyRay) => {
                    (stratified(&us).into_iter().map(|x| ctx.cst(x)).collect(), SampleKind::Stratified, false, true)
                }
                Err(e) => return Err(e),
            }
        }
    };
    if cfg.union {
        t.extend(coarse_t.iter().map(|&x| ctx.cst(x)));
    }
    // stable sort keeps coarse boundaries after equal fine samples
    t.sort_by(|a, b| a.val().total_cmp(&b.val()));
    Ok(Hierarchical {
        samples: SampleSet {
            t,
            kind,
            differentiable,
            fallback,
        },
        coarse_t,
        coarse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(t: &[f64], s: &[f64]) -> RaySegments {
        RaySegments::new(t.to_vec(), s.to_vec()).unwrap()
    }

    pub(crate) fn random_segments(rng: &mut impl Rng) -> RaySegments {
        let n = rng.random_range(2..12);
        let mut t = vec![rng.random_range(0.0..1.0)];
        for _ in 1..n {
            let last = t[t.len() - 1];
            t.push(last + rng.random_range(0.05..0.5));
        }
        let s = (0..n)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..8.0) })
            .collect();
        RaySegments::new(t, s).unwrap()
    }

    #[test]
    fn weights_examples() {
        let w = weights_from_density(&seg(&[0.0, 1.0], &[50.0, 0.0]));
        assert!((w.weights[0] - 1.0).abs() < 1e-12 && w.transmittance < 1e-12);

        let w = weights_from_density(&seg(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0]));
        assert_eq!(w.weights, vec![0.0, 0.0]);
        assert_eq!(w.transmittance, 1.0);
        assert!(w.degenerate);
        assert_eq!(w.normalized, vec![0.5, 0.5]);

        let ln2 = std::f64::consts::LN_2;
        let w = weights_from_density(&seg(&[0.0, 1.0, 2.0], &[ln2, ln2, 0.0]));
        assert!((w.weights[0] - 0.5).abs() < 1e-15);
        assert!((w.weights[1] - 0.25).abs() < 1e-15);
        assert!((w.transmittance - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weights_conserve_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s = random_segments(&mut rng);
            let w = weights_from_density(&s);
            let total: f64 = w.weights.iter().sum::<f64>() + w.transmittance;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_density_examples() {
        let s = seg(&[0.0, 1.0, 2.0], &[2.0, 4.0, 4.0]);
        assert_eq!(sigma_linear(&s, 0.0), 2.0);
        assert_eq!(sigma_linear(&s, 1.0), 4.0);
        assert_eq!(sigma_linear(&s, 0.5), 3.0);
        assert_eq!(sigma_linear(&s, 1.7), 4.0);
        assert_eq!(sigma_linear(&s, -3.0), 2.0);
        assert_eq!(sigma_linear(&s, 9.0), 4.0);
    }

    #[test]
    fn depth_examples() {
        assert!((optical_depth(&seg(&[0.0, 1.0], &[3.0, 3.0]), 1.0) - 3.0).abs() < 1e-15);
        assert!((optical_depth(&seg(&[0.0, 1.0], &[0.0, 2.0]), 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn depth_matches_trapezoid_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = random_segments(&mut rng);
            let (a, b) = (s.t[0], s.t[s.len() - 1]);
            // composite trapezoid on a fine grid that contains every boundary
            let mut q = 0.0;
            for i in 0..s.len() - 1 {
                let k = 64;
                let h = (s.t[i + 1] - s.t[i]) / k as f64;
                for j in 0..k {
                    let x0 = s.t[i] + j as f64 * h;
                    q += 0.5 * h * (sigma_linear(&s, x0) + sigma_linear(&s, x0 + h));
                }
            }
            assert!((optical_depth(&s, b) - q).abs() < 1e-10);
            assert_eq!(optical_depth(&s, a), 0.0);
        }
    }

    #[test]
    fn cdf_endpoints_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = random_segments(&mut rng);
            let Ok(f0) = continuous_cdf(&s, s.t[0]) else { continue };
            let (a, b) = (s.t[0], s.t[s.len() - 1]);
            assert_eq!(f0, 0.0);
            assert!((continuous_cdf(&s, b).unwrap() - 1.0).abs() < 1e-15);
            let mut prev = 0.0;
            for k in 0..=1000 {
                let f = continuous_cdf(&s, a + (b - a) * k as f64 / 1000.0).unwrap();
                assert!(f >= prev);
                prev = f;
            }
        }
    }

    #[test]
    fn cdf_low_density_limit_is_uniform() {
        let s = seg(&[1.0, 3.0], &[1e-6, 1e-6]);
        assert!((continuous_cdf(&s, 2.5).unwrap() - 0.75).abs() < 1e-6);
        assert!((inverse_cdf_sample(&s, 0.5).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn empty_ray_is_signalled() {
        let s = seg(&[0.0, 1.0], &[0.0, 0.0]);
        assert_eq!(continuous_cdf(&s, 0.5), Err(SamplingError::EmptyRay));
        assert_eq!(inverse_cdf_sample(&s, 0.5), Err(SamplingError::EmptyRay));
    }

    #[test]
    fn inverse_endpoints() {
        let s = seg(&[0.5, 1.0, 2.0], &[1.0, 3.0, 0.5]);
        assert!((inverse_cdf_sample(&s, 1e-12).unwrap() - 0.5).abs() < 1e-9);
        assert!((inverse_cdf_sample(&s, 1.0 - 1e-12).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = random_segments(&mut rng);
            let u = rng.random_range(1e-6..1.0 - 1e-6);
            let Ok(t) = inverse_cdf_sample(&s, u) else { continue };
            assert!((continuous_cdf(&s, t).unwrap() - u).abs() < 1e-8);
        }
    }

    #[test]
    fn inverse_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 50 {
            let s = random_segments(&mut rng);
            // beyond a few units of depth the tail gradients sink below the
            // round-off floor of central differences
            let total = s.cumulative_depth()[s.len() - 1];
            if s.sigma.iter().any(|&x| x < 0.05) || total > 6.0 {
                continue;
            }
            let u = rng.random_range(0.05..0.95);
            let t = s.t.clone();
            let r = finite_diff_check(
                |tape, x| PlCdf::new(tape, &t, x).unwrap().sample(u).unwrap(),
                &s.sigma,
                1e-5,
            )
            .unwrap();
            assert!(r.passes(1e-4), "{}", r.table());
            checked += 1;
        }
    }

    #[test]
    fn denser_bin_pulls_later_samples_forward() {
        let t = [0.0, 0.5, 1.0, 1.5, 2.0];
        let s = [1.0, 1.0, 1.0, 1.0, 1.0];
        let base = inverse_cdf_sample(&seg(&t, &s), 0.8).unwrap();
        assert!(base > 1.0);
        let mut s2 = s;
        s2[1] += 0.1;
        assert!(inverse_cdf_sample(&seg(&t, &s2), 0.8).unwrap() < base);
    }

    #[test]
    fn pc_inverse_stays_in_weighted_bins() {
        let s = seg(&[0.0, 1.0, 2.0, 3.0], &[0.0, 40.0, 0.0, 0.0]);
        let us: Vec<f64> = (0..20).map(|k| (k as f64 + 0.5) / 20.0).collect();
        for t in pc_inverse_cdf(&s, &us) {
            assert!((1.0..=2.0).contains(&t), "{t}");
        }
    }

    #[test]
    fn stratified_properties() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 2.0], 1.0, 3.0).unwrap();
        assert!((ray.dir[2] - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = stratified_sample(&ray, 1, &mut rng);
        assert!(one.len() == 1 && (1.0..=3.0).contains(&one[0]));
        let s = stratified_sample(&ray, 16, &mut rng);
        for (k, w) in s.windows(2).enumerate() {
            assert!(w[0] <= w[1]);
            let lo = 1.0 + 2.0 * k as f64 / 16.0;
            assert!(w[0] >= lo && w[0] <= lo + 2.0 / 16.0);
        }
        let mut sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            sum += stratified_sample(&ray, 1, &mut rng)[0];
        }
        assert!((sum / n as f64 - 2.0).abs() < 0.02);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(RaySegments::new(vec![0.0], vec![1.0]).is_err());
        assert!(RaySegments::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(RaySegments::new(vec![0.0, 1.0], vec![-1.0, 1.0]).is_err());
        assert!(Ray::new([0.0; 3], [0.0; 3], 0.0, 1.0).is_err());
        assert!(Ray::new([0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0).is_err());
    }
}
