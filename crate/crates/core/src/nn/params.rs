use std::collections::BTreeMap;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Named trainable parameters with matching gradient buffers.
///
/// Iteration is lexicographic by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Gradients keyed by parameter path, detached from a store.
pub type Grads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let path = path.into();
        if shape.iter().product::<usize>() != value.len() {
            return Err(invalid(format!(
                "parameter {path}: shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        let grad = vec![0.0; value.len()];
        self.params.insert(path, Param { shape, value, grad });
        Ok(())
    }

    pub fn get(&self, path: &str) -> &[f64] {
        &self.param(path).value
    }

    pub fn param(&self, path: &str) -> &Param {
        self.params
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
    }

    pub fn param_mut(&mut self, path: &str) -> &mut Param {
        self.params
            .get_mut(path)
            .unwrap_or_else(|| panic!("unknown parameter {path}"))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads, scale: f64) -> Result<()> {
        for (path, g) in grads {
            let p = self
                .params
                .get_mut(path)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {path}")))?;
            if p.grad.len() != g.len() {
                return Err(invalid(format!("gradient for {path} has wrong length")));
            }
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
        Ok(())
    }

    pub fn grads(&self) -> Grads {
        self.params.iter().map(|(k, p)| (k.clone(), p.grad.clone())).collect()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (path, p) in &mut self.params {
            let src = other
                .params
                .get(path)
                .ok_or_else(|| invalid(format!("missing parameter {path}")))?;
            if src.shape != p.shape {
                return Err(invalid(format!("shape mismatch for {path}")));
            }
            p.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_accumulation() {
        let mut store = ParamStore::new();
        store.insert("conv2.weights", vec![2], vec![1.0, 2.0]).unwrap();
        store.insert("conv10.weights", vec![1], vec![3.0]).unwrap();
        store.insert("bn1.gamma", vec![1], vec![1.0]).unwrap();
        let paths: Vec<_> = store.paths().cloned().collect();
        assert_eq!(paths, ["bn1.gamma", "conv10.weights", "conv2.weights"]);
        assert_eq!(store.len(), 4);

        let mut g = Grads::new();
        g.insert("conv2.weights".into(), vec![0.5, 1.0]);
        store.accumulate(&g, 2.0).unwrap();
        assert_eq!(store.param("conv2.weights").grad, vec![1.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.param("conv2.weights").grad, vec![0.0, 0.0]);

        g.insert("nope".into(), vec![1.0]);
        assert!(store.accumulate(&g, 1.0).is_err());
        assert!(store.insert("bad", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
