use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Index of one parameter matrix inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamKey(pub usize);

/// Flat, named storage for every trainable matrix of a model.
///
/// Layer parameter structs ([`LinearParams`], [`MhaParams`], ...) only hold
/// keys into a store. Keeping the values flat makes the optimizer, the
/// checkpoint format and the finite-difference checker oblivious to the
/// model's structure.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<FeatureMatrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: FeatureMatrix) -> ParamKey {
        self.names.push(name.into());
        self.values.push(value);
        ParamKey(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn get(&self, key: ParamKey) -> &FeatureMatrix {
        &self.values[key.0]
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut FeatureMatrix {
        &mut self.values[key.0]
    }

    pub fn set(&mut self, key: ParamKey, value: FeatureMatrix) -> Result<()> {
        let slot = &mut self.values[key.0];
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "ParamStore::set", left: slot.shape(), right: value.shape() });
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.names[key.0]
    }

    pub fn key_of(&self, name: &str) -> Option<ParamKey> {
        self.names.iter().position(|n| n == name).map(ParamKey)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.values.len()).map(ParamKey)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &str, &FeatureMatrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamKey(i), n.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(FeatureMatrix::is_finite)
    }
}

/// Affine map `x W + b`, with `W` stored `in x out` and `b` as `1 x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub w: ParamKey,
    pub b: ParamKey,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Multi-head attention projections. The per-head query/key/value maps are
/// column blocks of the full `d x d` matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MhaParams {
    pub fn dim(&self) -> usize {
        self.query.fan_in
    }
}

/// Two-layer feedforward network: linear, ReLU, linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

/// Elementwise sigmoid gate `δ(a W_g + b W_c + b_I)` with a per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub w_g: ParamKey,
    pub w_c: ParamKey,
    pub bias: ParamKey,
}

/// Registers freshly initialized parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Runs `f` with `name` appended to the current prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.path(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamKey {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { self.rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        let path = self.path(name);
        self.store.insert(path, FeatureMatrix::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamKey {
        let path = self.path(name);
        self.store.insert(path, FeatureMatrix::zeros(rows, cols))
    }

    /// Weights and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearParams {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.scoped(name, |b| LinearParams {
            w: b.uniform("w", fan_in, fan_out, bound),
            b: b.uniform("b", 1, fan_out, bound),
            fan_in,
            fan_out,
        })
    }

    pub fn mha(&mut self, name: &str, dim: usize, heads: usize) -> Result<MhaParams> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadsNotDivisible { dim, heads });
        }
        Ok(self.scoped(name, |b| MhaParams {
            heads,
            query: b.linear("query", dim, dim),
            key: b.linear("key", dim, dim),
            value: b.linear("value", dim, dim),
            output: b.linear("output", dim, dim),
        }))
    }

    pub fn ffn(&mut self, name: &str, dim: usize, hidden: usize, out: usize) -> FfnParams {
        self.scoped(name, |b| FfnParams { hidden: b.linear("hidden", dim, hidden), out: b.linear("out", hidden, out) })
    }

    pub fn gate(&mut self, name: &str, dim: usize) -> GateParams {
        let bound = 1.0 / (dim as f64).sqrt();
        self.scoped(name, |b| GateParams {
            w_g: b.uniform("w_g", dim, dim, bound),
            w_c: b.uniform("w_c", dim, dim, bound),
            bias: b.uniform("bias", 1, dim, bound),
        })
    }
}

impl LinearParams {
    /// Registers a linear map with explicit values, mainly for tests.
    pub fn from_values(store: &mut ParamStore, name: &str, w: FeatureMatrix, b: FeatureMatrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.cols() {
            return Err(Error::ShapeMismatch { op: "LinearParams::from_values", left: w.shape(), right: b.shape() });
        }
        let (fan_in, fan_out) = w.shape();
        Ok(Self {
            w: store.insert(format!("{name}.w"), w),
            b: store.insert(format!("{name}.b"), b),
            fan_in,
            fan_out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_init_is_bounded_and_named() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let lin = b.scoped("enc", |b| b.linear("proj", 16, 4));
        let bound = 0.25;
        assert!(store.get(lin.w).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.name(lin.w), "enc.proj.w");
        assert_eq!(store.get(lin.b).shape(), (1, 4));
    }

    #[test]
    fn mha_requires_divisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(b.mha("m", 10, 3), Err(Error::HeadsNotDivisible { .. })));
        assert!(b.mha("m", 12, 3).is_ok());
    }
}
