use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Named, ordered parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

pub type Grads<T> = Vec<Vec<T>>;

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name: name.into(), shape: shape.to_vec(), data });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes, naming the first
    /// offending parameter.
    pub fn check_compatible<U>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?}, expected `{}` with shape {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        Ok(())
    }
}

/// Allocates parameters into a store, filling them as it goes.
pub struct Initializer<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut SeededRng>,
}

impl<'a, T: Scalar> Initializer<'a, T> {
    /// Random initialization driven by `rng`.
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut SeededRng) -> Self {
        Self { store, rng: Some(rng) }
    }

    /// Layout only: every weight is zero, norms get unit gain.
    pub fn zeroed(store: &'a mut ParamStore<T>) -> Self {
        Self { store, rng: None }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let len = shape.iter().product();
        let data = match (init, self.rng.as_deref_mut()) {
            (Init::Zeros, _) | (Init::FanIn(_), None) => vec![T::zero(); len],
            (Init::Ones, _) => vec![T::one(); len],
            (Init::FanIn(fan_in), Some(rng)) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
            }
        };
        self.store.push(name, shape, data)
    }
}

/// Two distinct gradient buffers borrowed mutably at once.
pub(crate) fn pair_mut<T>(grads: &mut [Vec<T>], a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
    assert_ne!(a.0, b.0);
    if a.0 < b.0 {
        let (lo, hi) = grads.split_at_mut(b.0);
        (&mut lo[a.0], &mut hi[0])
    } else {
        let (lo, hi) = grads.split_at_mut(a.0);
        (&mut hi[0], &mut lo[b.0])
    }
}
