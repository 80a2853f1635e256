use crate::diff::{Tape, Var};
use crate::par;
use crate::volren::{Camera, ImageBuffer};

/// Added to the diagonal of every screen-space covariance, in px^2.
pub const COV_FLOOR: f64 = 0.3;
pub const ALPHA_CAP: f64 = 0.999;
/// Blending stops once transmittance falls below this.
pub const T_STOP: f64 = 1e-4;
pub const NEAR: f64 = 0.05;

/// Screen-space Gaussian ready for blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Primitive row it came from.
    pub index: usize,
    pub mean: [f64; 2],
    /// Covariance `[a, b, c]` of `[[a, b], [b, c]]`, floor included.
    pub cov: [f64; 3],
    /// Inverse covariance, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Half-width of the 3-sigma box.
    pub radius: f64,
}

/// On-tape projection of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedVars<'t> {
    pub mean: [Var<'t>; 2],
    pub cov: [Var<'t>; 3],
    pub conic: [Var<'t>; 3],
    pub depth: f64,
}

/// Rotation matrix of a (not necessarily unit) quaternion `[w, x, y, z]`.
pub fn quat_to_matrix<'t>(q: [Var<'t>; 4]) -> [[Var<'t>; 3]; 3] {
    let n = (q[0].square() + q[1].square() + q[2].square() + q[3].square()).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    [
        [1.0 - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0],
        [(x * y + w * z) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0],
        [(x * z - w * y) * 2.0, (y * z + w * x) * 2.0, 1.0 - (x * x + y * y) * 2.0],
    ]
}

/// EWA projection: mean by the pinhole map, covariance `J W Sigma W^T J^T` plus the floor.
/// `None` when the center is behind the near plane.
pub fn project_vars<'t>(camera: &Camera, mu: [Var<'t>; 3], scale: [Var<'t>; 3], quat: [Var<'t>; 4]) -> Option<ProjectedVars<'t>> {
    let r = &camera.rotation;
    let d: [Var<'t>; 3] = std::array::from_fn(|i| mu[i] - camera.position[i]);
    let t: [Var<'t>; 3] = std::array::from_fn(|j| d[0] * r[0][j] + d[1] * r[1][j] + d[2] * r[2][j]);
    if !(t[2].val() > NEAR) {
        return None;
    }
    let iz = 1.0 / t[2];
    let mean = [t[0] * iz * camera.fx + camera.cx, t[1] * iz * camera.fy + camera.cy];
    // J rows in camera space
    let j = [
        [iz * camera.fx, t[0] * iz * iz * (-camera.fx)],
        [iz * camera.fy, t[1] * iz * iz * (-camera.fy)],
    ];
    // M = J W, with W the world-to-camera rotation (W[j][i] = r[i][j])
    let m: [[Var<'t>; 3]; 2] = std::array::from_fn(|a| {
        std::array::from_fn(|i| j[a][0] * r[i][a] + j[a][1] * r[i][2])
    });
    let rq = quat_to_matrix(quat);
    let b: [[Var<'t>; 3]; 2] = std::array::from_fn(|a| {
        std::array::from_fn(|k| (m[a][0] * rq[0][k] + m[a][1] * rq[1][k] + m[a][2] * rq[2][k]) * scale[k])
    });
    let ca = b[0][0].square() + b[0][1].square() + b[0][2].square() + COV_FLOOR;
    let cb = b[0][0] * b[1][0] + b[0][1] * b[1][1] + b[0][2] * b[1][2];
    let cc = b[1][0].square() + b[1][1].square() + b[1][2].square() + COV_FLOOR;
    let det = ca * cc - cb * cb;
    let conic = [cc / det, -cb / det, ca / det];
    Some(ProjectedVars {
        mean,
        cov: [ca, cb, cc],
        conic,
        depth: t[2].val(),
    })
}

/// Plain-value projection: `(mean, covariance, depth)`.
pub fn project_gaussian(camera: &Camera, mu: [f64; 3], scale: [f64; 3], quat: [f64; 4]) -> Option<([f64; 2], [f64; 3], f64)> {
    let tape = Tape::detached();
    let c = |v: f64| tape.constant(v);
    let p = project_vars(camera, mu.map(c), scale.map(c), quat.map(c))?;
    Some((p.mean.map(|v| v.val()), p.cov.map(|v| v.val()), p.depth))
}

/// 3-sigma half-width from the larger eigenvalue.
pub fn three_sigma_radius(cov: [f64; 3]) -> f64 {
    let mid = 0.5 * (cov[0] + cov[2]);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    3.0 * lambda.sqrt()
}

/// Gradient of the loss w.r.t. one splat: mean (2), conic (3), opacity, color (3).
pub type SplatGrad = [f64; 9];

pub struct RasterOut {
    pub image: ImageBuffer,
    /// Mean squared error over all pixels and channels, when a target was given.
    pub loss: f64,
    /// Per splat, in input order. Empty without a target.
    pub grads: Vec<SplatGrad>,
}

struct Hit {
    splat: usize,
    alpha: f64,
    g: f64,
    trans: f64,
    clamped: bool,
    d: [f64; 2],
}

/// Blends depth-sorted `splats` (front first) into a `width x height` image.
/// With `target`, also returns the mean squared error and its gradients.
pub fn rasterize_splats(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    background: [f64; 3],
    target: Option<&ImageBuffer>,
) -> RasterOut {
    if let Some(t) = target {
        assert!(t.width == width && t.height == height, "target size mismatch");
    }
    // per row, the splats whose box covers it, in blend order
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (k, s) in splats.iter().enumerate() {
        let y0 = (s.mean[1] - s.radius - 0.5).ceil().max(0.0);
        let y1 = (s.mean[1] + s.radius - 0.5).floor().min(height as f64 - 1.0);
        if y1 < y0 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            rows[y].push(k as u32);
        }
    }
    let norm = 1.0 / (width * height * 3) as f64;
    let chunks = par::map_chunks(height, 8, |range| {
        let mut data = Vec::with_capacity(range.len() * width * 3);
        let mut loss = 0.0;
        let mut grads: Vec<(u32, SplatGrad)> = Vec::new();
        let mut hits: Vec<Hit> = Vec::new();
        for y in range {
            let py = y as f64 + 0.5;
            for x in 0..width {
                let px = x as f64 + 0.5;
                hits.clear();
                let mut c = [0.0; 3];
                let mut trans = 1.0;
                for &k in &rows[y] {
                    let s = &splats[k as usize];
                    let d = [px - s.mean[0], py - s.mean[1]];
                    if d[0].abs() > s.radius || d[1].abs() > s.radius {
                        continue;
                    }
                    let q = s.conic[0] * d[0] * d[0] + 2.0 * s.conic[1] * d[0] * d[1] + s.conic[2] * d[1] * d[1];
                    let g = (-0.5 * q).exp();
                    let raw = s.opacity * g;
                    let (alpha, clamped) = if raw > ALPHA_CAP { (ALPHA_CAP, true) } else { (raw, false) };
                    for ch in 0..3 {
                        c[ch] += trans * alpha * s.color[ch];
                    }
                    hits.push(Hit {
                        splat: k as usize,
                        alpha,
                        g,
                        trans,
                        clamped,
                        d,
                    });
                    trans *= 1.0 - alpha;
                    if trans < T_STOP {
                        break;
                    }
                }
                for ch in 0..3 {
                    c[ch] += trans * background[ch];
                }
                data.extend_from_slice(&c);
                let Some(target) = target else { continue };
                let t = target.pixel(x, y);
                let mut dc = [0.0; 3];
                for ch in 0..3 {
                    let r = c[ch] - t[ch];
                    loss += r * r * norm;
                    dc[ch] = 2.0 * r * norm;
                }
                // walk back to front; `after` is everything blended behind the current splat
                let mut after = [0.0; 3];
                for ch in 0..3 {
                    after[ch] = trans * background[ch];
                }
                for h in hits.iter().rev() {
                    let s = &splats[h.splat];
                    let w = h.alpha * h.trans;
                    let mut g = [0.0; 9];
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        g[6 + ch] = dc[ch] * w;
                        d_alpha += dc[ch] * (h.trans * s.color[ch] - after[ch] / (1.0 - h.alpha));
                        after[ch] += w * s.color[ch];
                    }
                    if !h.clamped {
                        g[5] = d_alpha * h.g;
                        // d alpha / d q = -o g / 2
                        let dq = -0.5 * d_alpha * s.opacity * h.g;
                        let [dx, dy] = h.d;
                        g[0] = -dq * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                        g[1] = -dq * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                        g[2] = dq * dx * dx;
                        g[3] = dq * 2.0 * dx * dy;
                        g[4] = dq * dy * dy;
                    }
                    grads.push((h.splat as u32, g));
                }
            }
        }
        (data, loss, grads)
    });

    let mut data = Vec::with_capacity(width * height * 3);
    let mut loss = 0.0;
    let mut grads = if target.is_some() { vec![[0.0; 9]; splats.len()] } else { Vec::new() };
    for (d, l, g) in chunks {
        data.extend(d);
        loss += l;
        for (k, gk) in g {
            let acc = &mut grads[k as usize];
            for i in 0..9 {
                acc[i] += gk[i];
            }
        }
    }
    RasterOut {
        image: ImageBuffer { width, height, data },
        loss,
        grads,
    }
}

/// Orders splats front to back; equal depths keep primitive order.
pub fn sort_splats(splats: &mut [Splat2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}
