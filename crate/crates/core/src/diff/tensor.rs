use super::DiffError;

/// Dense trainable array with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

pub const MAX_RANK: usize = 4;

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self, DiffError> {
        let name = name.into();
        if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
            return Err(DiffError::BadShape {
                name,
                shape: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(DiffError::LengthMismatch {
                name,
                expected: n,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteValue { name, index: i });
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; n],
            values,
            requires_grad: true,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Self, DiffError> {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Result<Self, DiffError> {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Replaces contents with a new leading extent (rows of the trailing shape).
    /// Gradient is reset.
    pub fn reshape_rows(&mut self, rows: usize, values: Vec<f64>) -> Result<(), DiffError> {
        let mut shape = self.shape.clone();
        shape[0] = rows;
        let rebuilt = ParamTensor::new(self.name.clone(), &shape, values)?;
        let requires_grad = self.requires_grad;
        *self = rebuilt;
        self.requires_grad = requires_grad;
        Ok(())
    }

    /// Number of scalars per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Owner of every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, t: ParamTensor) -> ParamId {
        self.tensors.push(t);
        ParamId(self.tensors.len() as u32 - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| ParamId(i as u32))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i as u32), t))
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Euclidean norm of the gradients of the given tensors.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|&id| self.get(id).grad().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ParamTensor::zeros("x", &[]).is_err());
        assert!(ParamTensor::zeros("x", &[1, 1, 1, 1, 1]).is_err());
        assert!(ParamTensor::zeros("x", &[2, 0]).is_err());
        assert!(ParamTensor::new("x", &[2], vec![1.0]).is_err());
        assert!(ParamTensor::new("x", &[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_grads_clears_everything() {
        let mut store = ParamStore::new();
        let a = store.add(ParamTensor::zeros("a", &[2, 2]).unwrap());
        store.get_mut(a).grad_mut()[3] = 1.5;
        store.zero_grads();
        assert!(store.get(a).grad().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(a).grad().len(), store.get(a).values().len());
    }

    #[test]
    fn find_by_name() {
        let mut store = ParamStore::new();
        store.add(ParamTensor::zeros("a", &[1]).unwrap());
        let b = store.add(ParamTensor::zeros("b", &[1]).unwrap());
        assert_eq!(store.find("b"), Some(b));
        assert_eq!(store.find("c"), None);
    }
}
