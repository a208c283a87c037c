//! Named parameter registry shared between the model, optimizer, and
//! checkpoint code.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// One trainable tensor. `decay` marks parameters subject to weight decay;
/// biases, normalization gains, and embedding tables are excluded.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Array2<f64>>,
    pub decay: bool,
}

/// Ordered, name-indexed parameter set. Registry order is construction order
/// and doubles as the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

pub const INIT_STD: f64 = 0.02;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, decay: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: Arc::new(value),
            decay,
        });
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    /// Weight matrix with small normal init, subject to decay.
    pub fn weight(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> usize {
        let value = Array2::from_shape_fn((rows, cols), |_| {
            // Box-Muller keeps us off rand_distr here so draws stay in one place
            normal_sample(rng) * INIT_STD
        });
        self.insert(name, value, true)
    }

    /// Embedding table: normal init, no decay.
    pub fn table(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> usize {
        let value = Array2::from_shape_fn((rows, cols), |_| normal_sample(rng) * INIT_STD);
        self.insert(name, value, false)
    }

    /// Zero-initialized bias row, no decay.
    pub fn bias(&mut self, name: &str, cols: usize) -> usize {
        self.insert(name, Array2::zeros((1, cols)), false)
    }

    /// Normalization gain initialized to one, no decay.
    pub fn gain(&mut self, name: &str, cols: usize) -> usize {
        self.insert(name, Array2::ones((1, cols)), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn value(&self, name: &str) -> &Arc<Array2<f64>> {
        &self.entries[self.index(name)].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Mutable access for the optimizer; clones only if a tape still holds
    /// the array.
    pub fn value_mut(&mut self, idx: usize) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.entries[idx].value)
    }

    pub fn set_value(&mut self, name: &str, value: Array2<f64>) {
        let idx = self.index(name);
        assert_eq!(self.entries[idx].value.dim(), value.dim(), "shape of {name}");
        self.entries[idx].value = Arc::new(value);
    }

    /// Total scalar count across all tensors.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Standard normal draw via Box-Muller on the raw stream.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registry_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let w = ps.weight(&mut rng, "w", 3, 4);
        let b = ps.bias("b", 4);
        assert_eq!(ps.index("w"), w);
        assert_eq!(ps.index("b"), b);
        assert_eq!(ps.n_scalars(), 16);
        assert!(ps.entry(w).decay);
        assert!(!ps.entry(b).decay);
        assert_eq!(ps.value("b").sum(), 0.0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.bias("b", 2);
        ps.bias("b", 2);
    }
}
