/// Solid with constant interior density.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Oriented box. `rotation` maps box-local axes to world axes (columns).
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        rotation: [[f64; 3]; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub sigma: f64,
    pub color: [f64; 3],
}

impl Shape {
    pub fn sphere(center: [f64; 3], radius: f64, sigma: f64, color: [f64; 3]) -> Self {
        Self {
            kind: ShapeKind::Sphere { center, radius },
            sigma,
            color,
        }
    }

    /// Box rotated by `angle` radians about `axis` (0 = x, 1 = y, 2 = z).
    pub fn tilted_box(
        center: [f64; 3],
        half_extents: [f64; 3],
        axis: usize,
        angle: f64,
        sigma: f64,
        color: [f64; 3],
    ) -> Self {
        let (s, c) = angle.sin_cos();
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut rotation = [[0.0; 3]; 3];
        rotation[axis][axis] = 1.0;
        rotation[a][a] = c;
        rotation[a][b] = -s;
        rotation[b][a] = s;
        rotation[b][b] = c;
        Self {
            kind: ShapeKind::Box {
                center,
                half_extents,
                rotation,
            },
            sigma,
            color,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match &self.kind {
            ShapeKind::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
            ShapeKind::Box {
                center,
                half_extents,
                rotation,
            } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                (0..3).all(|axis| {
                    // local coordinate = column `axis` of the rotation dotted with d
                    let local: f64 = (0..3).map(|i| rotation[i][axis] * d[i]).sum();
                    local.abs() <= half_extents[axis]
                })
            }
        }
    }
}

/// Ground-truth scene: the first shape containing a point decides its density and color.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticField {
    pub shapes: Vec<Shape>,
}

impl AnalyticField {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { shapes }
    }

    pub fn eval(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        self.shapes
            .iter()
            .find(|s| s.contains(p))
            .map(|s| (s.sigma, s.color))
            .unwrap_or((0.0, [0.0; 3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_inside_and_outside() {
        let f = AnalyticField::new(vec![Shape::sphere([0.5; 3], 0.2, 10.0, [1.0, 0.0, 0.0])]);
        assert_eq!(f.eval([0.5, 0.5, 0.6]), (10.0, [1.0, 0.0, 0.0]));
        assert_eq!(f.eval([0.05, 0.05, 0.05]).0, 0.0);
    }

    #[test]
    fn tilted_box_respects_rotation() {
        let angle = std::f64::consts::FRAC_PI_4;
        let b = Shape::tilted_box([0.5; 3], [0.3, 0.05, 0.3], 2, angle, 5.0, [0.0, 1.0, 0.0]);
        // the thin local y axis now points along (-sin, cos, 0)
        let along_thin = [0.5 - 0.1 * angle.sin(), 0.5 + 0.1 * angle.cos(), 0.5];
        assert!(!b.contains(along_thin));
        let along_long = [0.5 + 0.2 * angle.cos(), 0.5 + 0.2 * angle.sin(), 0.5];
        assert!(b.contains(along_long));
        assert!(!b.contains([0.5, 0.6, 0.5]));
    }
}
