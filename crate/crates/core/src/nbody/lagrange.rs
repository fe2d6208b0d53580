use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lagrange basis on a fixed node set with the denominators precomputed.
#[derive(Debug, Clone)]
pub struct LagrangeBasis<T> {
    nodes: Vec<T>,
    inv_denominators: Vec<T>,
}

impl<T: Scalar> LagrangeBasis<T> {
    pub fn new(nodes: &[T]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput("interpolation nodes"));
        }
        let mut inv_denominators = Vec::with_capacity(nodes.len());
        for (l, &xl) in nodes.iter().enumerate() {
            let mut denom = T::one();
            for (j, &xj) in nodes.iter().enumerate() {
                if j != l {
                    denom *= xl - xj;
                }
            }
            if denom == T::zero() || !denom.is_finite() {
                return Err(Error::DuplicateNodes);
            }
            inv_denominators.push(denom.recip());
        }
        Ok(Self {
            nodes: nodes.to_vec(),
            inv_denominators,
        })
    }

    /// Basis for `p` nodes at `0.5, 1.5, ..., p - 0.5` (node spacing 1).
    pub fn unit_spaced(p: usize) -> Result<Self> {
        let nodes: Vec<T> = (0..p).map(|j| T::of(j as f64 + 0.5)).collect();
        Self::new(&nodes)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Writes `L_l(x)` for every node `l` into `out`.
    #[inline]
    pub fn weights_into(&self, x: T, out: &mut [T]) {
        let p = self.nodes.len();
        debug_assert_eq!(out.len(), p);
        for l in 0..p {
            let mut num = T::one();
            for j in 0..p {
                if j != l {
                    num *= x - self.nodes[j];
                }
            }
            out[l] = num * self.inv_denominators[l];
        }
    }

    pub fn weights(&self, x: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.nodes.len()];
        self.weights_into(x, &mut out);
        out
    }
}

/// Lagrange polynomial weights `L_l(x)` for the given nodes.
pub fn lagrange_weights<T: Scalar>(nodes: &[T], x: T) -> Result<Vec<T>> {
    Ok(LagrangeBasis::new(nodes)?.weights(x))
}
