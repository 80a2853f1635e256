use super::tensor::{ParamId, ParamStore};
use super::DiffError;

/// Adam moments for every tensor of a [`ParamStore`].
///
/// Buffers are created lazily on the first step that sees a tensor, and
/// recreated (fresh, step count zero) whenever a tensor changes length.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Option<Moments>>,
    lr_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Moments {
    fn fresh(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Per-tensor learning-rate multiplier (default 1).
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        if self.lr_scale.len() <= id.index() {
            self.lr_scale.resize(id.index() + 1, 1.0);
        }
        self.lr_scale[id.index()] = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.lr_scale.get(id.index()).copied().unwrap_or(1.0)
    }

    /// Forget the moments of one tensor.
    pub fn reset(&mut self, id: ParamId) {
        if let Some(slot) = self.slots.get_mut(id.index()) {
            *slot = None;
        }
    }

    /// Carries moments over a row permutation of a tensor. `mapping[new_row]`
    /// names the old row to copy from, `None` starts that row at zero.
    pub fn remap_rows(&mut self, id: ParamId, row_len: usize, mapping: &[Option<usize>]) {
        let Some(Some(old)) = self.slots.get(id.index()) else {
            return;
        };
        let mut next = Moments::fresh(mapping.len() * row_len);
        next.step = old.step;
        for (new_row, src) in mapping.iter().enumerate() {
            if let Some(src) = *src {
                let (a, b) = (new_row * row_len, src * row_len);
                next.m[a..a + row_len].copy_from_slice(&old.m[b..b + row_len]);
                next.v[a..a + row_len].copy_from_slice(&old.v[b..b + row_len]);
            }
        }
        self.slots[id.index()] = Some(next);
    }

    /// One bias-corrected Adam update over every tensor that requires grad.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), DiffError> {
        if self.slots.len() < store.len() {
            self.slots.resize_with(store.len(), || None);
        }
        // Validate first so a failing step leaves every tensor untouched.
        let mut staged: Vec<(ParamId, Moments, Vec<f64>)> = Vec::new();
        for id in store.ids() {
            let tensor = store.get(id);
            if !tensor.requires_grad() {
                continue;
            }
            let n = tensor.len();
            let mut mom = match self.slots[id.index()].take() {
                Some(mom) if mom.m.len() == n => mom,
                _ => Moments::fresh(n),
            };
            mom.step += 1;
            let t = mom.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let lr = self.lr * self.lr_scale(id);
            let mut next = tensor.values().to_vec();
            for (i, (&g, p)) in tensor.grad().iter().zip(next.iter_mut()).enumerate() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
                if !p.is_finite() {
                    return Err(DiffError::NonFiniteUpdate {
                        name: tensor.name().to_string(),
                        index: i,
                    });
                }
            }
            staged.push((id, mom, next));
        }
        for (id, mom, next) in staged {
            store.get_mut(id).values_mut().copy_from_slice(&next);
            self.slots[id.index()] = Some(mom);
        }
        self.step += 1;
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`] with an explicit learning rate.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<(), DiffError> {
    state.lr = lr;
    state.step(store)
}
