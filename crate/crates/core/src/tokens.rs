use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// One per-position feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVector(Vec<f32>);

impl TokenVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("token vector needs C >= 1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("token vector"));
        }
        Ok(Self(values))
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    pub fn l2_norm(&self) -> f32 {
        l2_norm(&self.0)
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for TokenVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f32 {
    values
        .iter()
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt() as f32
}

/// `N×C` tokens laid out on an `h×w` grid (`h·w = N`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Element = f32> {
    tokens: Tensor<T>,
    grid: (usize, usize),
}

impl<T: Element> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, grid: (usize, usize)) -> Result<Self> {
        let [n, _] = tokens.shape() else {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: "tokens must be an N×C matrix".into(),
            });
        };
        if grid.0 * grid.1 != *n {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} does not hold {n} tokens",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor<T> {
        self.tokens
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, n: usize) -> &[T] {
        let c = self.channels();
        &self.tokens.data()[n * c..(n + 1) * c]
    }
}
