//! Feature planes and grids with multilinear interpolation.
//!
//! Texels sit on the lattice `i / (R - 1)`, so a query at a lattice point returns
//! that texel exactly. Each interpolated feature is one fused tape node whose
//! parents are the corner texels and the query coordinates.

use rand::Rng;

use crate::diff::{Ctx, DiffError, ParamId, ParamStore, ParamTensor, Var};

/// Cell index and fractional offset along one axis.
#[inline]
fn locate(x: f64, res: usize) -> (usize, f64, bool) {
    let inside = (0.0..=1.0).contains(&x);
    let xc = x.clamp(0.0, 1.0) * (res - 1) as f64;
    let i0 = (xc.floor() as usize).min(res - 2);
    (i0, xc - i0 as f64, inside)
}

/// Bilinear corner indices `(i, j)` and weights at `(u, v)` for resolution `res`.
pub fn bilinear_weights(u: f64, v: f64, res: usize) -> ([(usize, usize); 4], [f64; 4]) {
    let (i0, fu, _) = locate(u, res);
    let (j0, fv, _) = locate(v, res);
    (
        [(i0, j0), (i0 + 1, j0), (i0, j0 + 1), (i0 + 1, j0 + 1)],
        [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ],
    )
}

/// Trilinear corner indices and weights at `p`.
pub fn trilinear_weights(p: [f64; 3], res: usize) -> ([[usize; 3]; 8], [f64; 8]) {
    let (i0, fx, _) = locate(p[0], res);
    let (j0, fy, _) = locate(p[1], res);
    let (k0, fz, _) = locate(p[2], res);
    let mut idx = [[0usize; 3]; 8];
    let mut w = [0.0; 8];
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        idx[c] = [i0 + dx, j0 + dy, k0 + dz];
        let wx = if dx == 1 { fx } else { 1.0 - fx };
        let wy = if dy == 1 { fy } else { 1.0 - fy };
        let wz = if dz == 1 { fz } else { 1.0 - fz };
        w[c] = wx * wy * wz;
    }
    (idx, w)
}

/// R x R texels of F features over the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePlane {
    pub res: usize,
    pub dim: usize,
    pub data: ParamId,
}

impl FeaturePlane {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        res: usize,
        dim: usize,
        mut init: impl FnMut() -> f64,
    ) -> Result<Self, DiffError> {
        assert!(res >= 2, "feature plane needs at least 2 texels per axis");
        let values = (0..res * res * dim).map(|_| init()).collect();
        let data = store.add(ParamTensor::new(name, &[res, res, dim], values)?);
        Ok(Self { res, dim, data })
    }

    pub fn random(
        store: &mut ParamStore,
        name: &str,
        res: usize,
        dim: usize,
        lo: f64,
        hi: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        Self::new(store, name, res, dim, || rng.random_range(lo..hi))
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.res + j) * self.dim
    }

    /// Bilinear blend at `(u, v)`; differentiable in the texels and in `u`, `v`.
    /// Out-of-range coordinates clamp to the border with zero coordinate gradient.
    pub fn sample<'t>(&self, ctx: &Ctx<'t>, u: Var<'t>, v: Var<'t>) -> Vec<Var<'t>> {
        let res = self.res;
        let (i0, fu, u_in) = locate(u.val(), res);
        let (j0, fv, v_in) = locate(v.val(), res);
        let scale = (res - 1) as f64;
        let values = ctx.params.get(self.data).values();
        let corners = [
            self.offset(i0, j0),
            self.offset(i0 + 1, j0),
            self.offset(i0, j0 + 1),
            self.offset(i0 + 1, j0 + 1),
        ];
        let w = [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ];
        (0..self.dim)
            .map(|f| {
                let t = corners.map(|c| values[c + f]);
                let val = w[0] * t[0] + w[1] * t[1] + w[2] * t[2] + w[3] * t[3];
                let du = if u_in {
                    scale * ((1.0 - fv) * (t[1] - t[0]) + fv * (t[3] - t[2]))
                } else {
                    0.0
                };
                let dv = if v_in {
                    scale * ((1.0 - fu) * (t[2] - t[0]) + fu * (t[3] - t[1]))
                } else {
                    0.0
                };
                let leaves = corners.map(|c| ctx.param(self.data, c + f));
                ctx.tape.custom(
                    "bilinear",
                    val,
                    [
                        (leaves[0], w[0]),
                        (leaves[1], w[1]),
                        (leaves[2], w[2]),
                        (leaves[3], w[3]),
                        (u, du),
                        (v, dv),
                    ],
                )
            })
            .collect()
    }
}

/// R^3 cells of F features over the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGrid3D {
    pub res: usize,
    pub dim: usize,
    pub data: ParamId,
}

impl FeatureGrid3D {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        res: usize,
        dim: usize,
        mut init: impl FnMut() -> f64,
    ) -> Result<Self, DiffError> {
        assert!(res >= 2, "feature grid needs at least 2 cells per axis");
        let values = (0..res * res * res * dim).map(|_| init()).collect();
        let data = store.add(ParamTensor::new(name, &[res, res, res, dim], values)?);
        Ok(Self { res, dim, data })
    }

    #[inline]
    fn offset(&self, c: [usize; 3]) -> usize {
        ((c[0] * self.res + c[1]) * self.res + c[2]) * self.dim
    }

    /// Trilinear blend at `p`; differentiable in the corner features and in `p`.
    pub fn sample<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3]) -> Vec<Var<'t>> {
        let res = self.res;
        let loc = p.map(|x| locate(x.val(), res));
        let scale = (res - 1) as f64;
        let values = ctx.params.get(self.data).values();
        let mut offs = [0usize; 8];
        let mut w = [0.0; 8];
        // dw[c][axis] = d(weight c)/d(fractional offset on axis)
        let mut dw = [[0.0; 3]; 8];
        for c in 0..8 {
            let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let mut cell = [0usize; 3];
            let mut f = [0.0; 3];
            for a in 0..3 {
                cell[a] = loc[a].0 + bits[a];
                f[a] = if bits[a] == 1 { loc[a].1 } else { 1.0 - loc[a].1 };
            }
            offs[c] = self.offset(cell);
            w[c] = f[0] * f[1] * f[2];
            for a in 0..3 {
                let sign = if bits[a] == 1 { 1.0 } else { -1.0 };
                let others: f64 = (0..3).filter(|&b| b != a).map(|b| f[b]).product();
                dw[c][a] = if loc[a].2 { sign * others * scale } else { 0.0 };
            }
        }
        (0..self.dim)
            .map(|f| {
                let mut val = 0.0;
                let mut dp = [0.0; 3];
                for c in 0..8 {
                    let t = values[offs[c] + f];
                    val += w[c] * t;
                    for a in 0..3 {
                        dp[a] += dw[c][a] * t;
                    }
                }
                let corner_edges = (0..8).map(|c| (ctx.param(self.data, offs[c] + f), w[c]));
                let coord_edges = (0..3).map(|a| (p[a], dp[a]));
                ctx.tape
                    .custom("trilinear", val, corner_edges.chain(coord_edges))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check_with, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane_with(values: Vec<f64>, res: usize, dim: usize) -> (ParamStore, FeaturePlane) {
        let mut store = ParamStore::new();
        let mut it = values.into_iter();
        let plane = FeaturePlane::new(&mut store, "p", res, dim, || it.next().unwrap()).unwrap();
        (store, plane)
    }

    #[test]
    fn texel_center_returns_texel() {
        let (store, plane) = plane_with((0..9).map(|v| v as f64).collect(), 3, 1);
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        // (i=1, j=2) -> offset 5
        let out = plane.sample(&ctx, tape.constant(0.5), tape.constant(1.0));
        assert_eq!(out[0].val(), 5.0);
    }

    #[test]
    fn midpoint_of_four_texels_averages() {
        let (store, plane) = plane_with(vec![0.0, 0.0, 4.0, 4.0], 2, 1);
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let out = plane.sample(&ctx, tape.constant(0.5), tape.constant(0.5));
        assert_eq!(out[0].val(), 2.0);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (u, v) = (rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2));
            let (_, w) = bilinear_weights(u, v, 7);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let p = [rng.random(), rng.random(), rng.random()];
            let (_, w) = trilinear_weights(p, 5);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_coordinate_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (store, plane) = plane_with((0..5 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect(), 5, 2);
        for _ in 0..50 {
            // stay away from cell boundaries where the derivative jumps
            let cell = |r: &mut ChaCha8Rng| (r.random_range(0..4) as f64 + r.random_range(0.1..0.9)) / 4.0;
            let uv = [cell(&mut rng), cell(&mut rng)];
            let r = finite_diff_check_with(
                &store,
                |ctx, x| {
                    let f = plane.sample(ctx, x[0], x[1]);
                    f[0] * 0.7 + f[1] * -1.3
                },
                &uv,
                1e-6,
            )
            .unwrap();
            assert!(r.passes(1e-5), "{}", r.table());
        }
    }

    #[test]
    fn trilinear_corner_and_constant_cell() {
        let mut store = ParamStore::new();
        let mut k = 0.0;
        let grid = FeatureGrid3D::new(&mut store, "g", 2, 1, || {
            k += 1.0;
            k
        })
        .unwrap();
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let at = |p: [f64; 3]| grid.sample(&ctx, p.map(|x| tape.constant(x)))[0].val();
        assert_eq!(at([0.0, 0.0, 0.0]), 1.0);
        assert_eq!(at([1.0, 1.0, 1.0]), 8.0);
        assert_eq!(at([1.0, 0.0, 0.0]), 5.0);

        let mut store = ParamStore::new();
        let grid = FeatureGrid3D::new(&mut store, "g", 3, 1, || 2.5).unwrap();
        let ctx = Ctx::new(&tape, &store);
        let v = grid.sample(&ctx, [0.25, 0.25, 0.75].map(|x| tape.constant(x)))[0].val();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn trilinear_coordinate_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let grid = FeatureGrid3D::new(&mut store, "g", 4, 3, || rng.random_range(-1.0..1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let p: Vec<f64> = (0..3)
                .map(|_| (rng.random_range(0..3) as f64 + rng.random_range(0.1..0.9)) / 3.0)
                .collect();
            let r = finite_diff_check_with(
                &store,
                |ctx, x| {
                    let f = grid.sample(ctx, [x[0], x[1], x[2]]);
                    f[0] + f[1] * 2.0 - f[2]
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(r.passes(1e-5), "{}", r.table());
        }
    }

    #[test]
    fn continuous_across_cell_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, plane) = plane_with((0..16).map(|_| rng.random_range(-1.0..1.0)).collect(), 4, 1);
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, &store);
        let eps = 1e-9;
        let b = 1.0 / 3.0;
        let lo = plane.sample(&ctx, tape.constant(b - eps), tape.constant(0.4))[0].val();
        let hi = plane.sample(&ctx, tape.constant(b + eps), tape.constant(0.4))[0].val();
        assert!((lo - hi).abs() < 1e-7);
    }

    #[test]
    fn texel_gradients_are_the_weights() {
        let (store, plane) = plane_with(vec![1.0; 4], 2, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = plane.sample(&ctx, tape.constant(0.25), tape.constant(0.5));
        let mut store2 = store.clone();
        tape.backward(out[0]).unwrap().accumulate(&mut store2);
        let g = store2.get(plane.data).grad();
        let expected = [0.375, 0.375, 0.125, 0.125];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
