use crate::diff::{argmax, Tape, Var};

/// Near-uniform unit directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    dirs: Vec<[f64; 3]>,
}

impl DirectionSet {
    /// Spherical Fibonacci lattice with `n` points.
    pub fn fibonacci(n: usize) -> Self {
        assert!(n >= 2, "need at least two directions");
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let dirs = (0..n)
            .map(|i| {
                let z = 1.0 - (2 * i + 1) as f64 / n as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let (s, c) = (golden * i as f64).sin_cos();
                [r * c, r * s, z]
            })
            .collect();
        Self { dirs }
    }

    /// `n` evenly spaced directions in the xy-plane, for planar scenes.
    pub fn circle(n: usize) -> Self {
        assert!(n >= 2, "need at least two directions");
        let dirs = (0..n)
            .map(|i| {
                let (s, c) = (std::f64::consts::TAU * i as f64 / n as f64).sin_cos();
                [c, s, 0.0]
            })
            .collect();
        Self { dirs }
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.dirs[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.dirs.iter().map(|d| d.to_vec()).collect()
    }
}

/// Strictly increasing nonnegative distances along a fixed direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceBins {
    t: Vec<f64>,
}

impl DistanceBins {
    pub fn new(t: Vec<f64>) -> Option<Self> {
        let ok = t.len() >= 2 && t[0] >= 0.0 && t.windows(2).all(|w| w[0] < w[1]) && t.iter().all(|x| x.is_finite());
        ok.then_some(Self { t })
    }

    /// `n` bins evenly spaced on `(0, max]`.
    pub fn uniform(n: usize, max: f64) -> Self {
        Self::new((1..=n).map(|i| max * i as f64 / n as f64).collect()).expect("positive max and n >= 2")
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.t[i]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.t.iter().map(|&t| vec![t]).collect()
    }
}

/// Forward value of a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// `table[argmax q]`, softmax-weighted gradient.
    Hard,
    /// `sum softmax(q)_i table_i` both ways.
    Soft,
}

/// Picks a table row by logits `q`.
///
/// Either way the backward pass is that of `sum_i softmax(q)_i table_i`:
/// `d out_k / d q_j = p_j (table_jk - sum_i p_i table_ik)`.
pub fn reparam_select<'t>(tape: &'t Tape, q: &[Var<'t>], table: &[Vec<f64>], mode: SelectMode) -> Vec<Var<'t>> {
    assert_eq!(q.len(), table.len(), "one logit per table row");
    let p = crate::diff::softmax_values(q.iter().map(|x| x.val()));
    let dim = table[0].len();
    let hard = argmax(q.iter().map(|x| x.val()));
    (0..dim)
        .map(|k| {
            let mean: f64 = p.iter().zip(table).map(|(pi, row)| pi * row[k]).sum();
            let val = match mode {
                SelectMode::Hard => table[hard][k],
                SelectMode::Soft => mean,
            };
            tape.custom(
                "select",
                val,
                q.iter().enumerate().map(|(j, &qj)| (qj, p[j] * (table[j][k] - mean))),
            )
        })
        .collect()
}
