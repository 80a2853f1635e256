use rand::Rng;

use crate::diff::{Ctx, DiffError, ParamId, ParamStore, ParamTensor, Var};

/// `[cos(2^k pi p), sin(2^k pi p)]` for k = 0..degree, per coordinate, cos first.
pub fn positional_encode<'t>(p: &[Var<'t>], degree: usize) -> Vec<Var<'t>> {
    assert!(degree >= 1, "encoding degree must be at least 1");
    let mut out = Vec::with_capacity(2 * degree * p.len());
    for k in 0..degree {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        for &x in p {
            let arg = x * freq;
            out.push(arg.cos());
            out.push(arg.sin());
        }
    }
    out
}

/// Fully connected layer, `w` stored row-major as `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &[Var<'t>]) -> Vec<Var<'t>> {
        debug_assert_eq!(x.len(), self.inputs);
        let w = ctx.params.get(self.w).values();
        let b = ctx.params.get(self.b).values();
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let val = row
                    .iter()
                    .zip(x)
                    .fold(b[o], |acc, (wi, xi)| acc + wi * xi.val());
                let edges = (0..self.inputs)
                    .flat_map(|i| [(ctx.param(self.w, o * self.inputs + i), x[i].val()), (x[i], row[i])])
                    .chain(std::iter::once((ctx.param(self.b, o), 1.0)));
                ctx.tape.custom("linear", val, edges)
            })
            .collect()
    }
}

/// Plain MLP: ReLU between layers, no activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub layers: Vec<Dense>,
}

impl MlpNet {
    /// He-uniform hidden layers. With `zero_last` the output layer starts at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (inputs, outputs) = (pair[0], pair[1]);
            let last = l + 2 == widths.len();
            let bound = (6.0 / inputs as f64).sqrt();
            let w: Vec<f64> = (0..inputs * outputs)
                .map(|_| {
                    if last && zero_last {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
                .collect();
            let w = store.add(ParamTensor::new(format!("{name}.{l}.w"), &[outputs, inputs], w)?);
            let b = store.add(ParamTensor::zeros(format!("{name}.{l}.b"), &[outputs])?);
            layers.push(Dense {
                w,
                b,
                inputs,
                outputs,
            });
        }
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &[Var<'t>]) -> Vec<Var<'t>> {
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, &h);
            if l + 1 < self.layers.len() {
                h = h.into_iter().map(Var::relu).collect();
            }
        }
        h
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Coordinate MLP: encoding, hidden ReLU layers, softplus density and sigmoid color.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    pub net: MlpNet,
    pub degree: usize,
}

pub const DEFAULT_MLP_HIDDEN: [usize; 4] = [64; 4];
pub const DEFAULT_MLP_DEGREE: usize = 6;

impl MlpField {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: &[usize],
        degree: usize,
        zero_output: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        let mut widths = vec![2 * degree * 3];
        widths.extend_from_slice(hidden);
        widths.push(4);
        Ok(Self {
            net: MlpNet::new(store, name, &widths, zero_output, rng)?,
            degree,
        })
    }

    /// Raw head outputs `[density pre-activation, r, g, b]`.
    pub fn raw<'t>(&self, ctx: &Ctx<'t>, p: [Var<'t>; 3]) -> Vec<Var<'t>> {
        let enc = positional_encode(&p, self.degree);
        self.net.forward(ctx, &enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff_check_with, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoding_at_zero_alternates() {
        let tape = Tape::detached();
        let enc = positional_encode(&[tape.constant(0.0)], 4);
        let vals: Vec<f64> = enc.iter().map(|v| v.val()).collect();
        assert_eq!(vals, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encoding_at_one_first_band() {
        let tape = Tape::detached();
        let enc = positional_encode(&[tape.constant(1.0)], 1);
        assert_eq!(enc[0].val(), -1.0);
        assert!(enc[1].val().abs() < 1e-15);
        assert_eq!(enc.len(), 2);
    }

    #[test]
    fn encoding_length_and_order() {
        let tape = Tape::detached();
        let p = [tape.constant(0.1), tape.constant(0.2), tape.constant(0.3)];
        let enc = positional_encode(&p, 3);
        assert_eq!(enc.len(), 18);
        // band 1, coordinate 2: cos then sin of 2*pi*0.3
        let arg = 2.0 * std::f64::consts::PI * 0.3;
        assert_eq!(enc[10].val(), arg.cos());
        assert_eq!(enc[11].val(), arg.sin());
    }

    #[test]
    fn encoding_gradient_doubles_per_band() {
        // ||d gamma_k / dp|| = 2^k pi for any p
        let p = 0.37;
        let mut norms = Vec::new();
        for k in 1..=6 {
            let band = |pick: usize| {
                let tape = Tape::new();
                let x = tape.var(p);
                let enc = positional_encode(&[x], k);
                tape.backward(enc[2 * (k - 1) + pick]).unwrap().wrt(x)
            };
            let (dc, ds) = (band(0), band(1));
            norms.push((dc * dc + ds * ds).sqrt());
        }
        assert!((norms[0] - std::f64::consts::PI).abs() < 1e-12);
        for w in norms.windows(2) {
            assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_input_gradient_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpNet::new(&mut store, "m", &[3, 8, 8, 2], false, &mut rng).unwrap();
        let r = finite_diff_check_with(
            &store,
            |ctx, x| {
                let y = net.forward(ctx, x);
                y[0] - y[1] * 0.5
            },
            &[0.3, -0.2, 0.8],
            1e-6,
        )
        .unwrap();
        assert!(r.passes(1e-6), "{}", r.table());
    }
}
