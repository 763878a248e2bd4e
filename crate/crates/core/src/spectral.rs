//! Spectral model of the state space.
//!
//! The Hilbert space is truncated to the first `n` eigenmodes of a diagonal
//! generator `A e_k = μ_k e_k`. In this basis the semigroup, its Yosida
//! approximation and the coordinate projections are all diagonal, so every
//! operation here is exact up to floating point rounding.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{domain, Error, Result};

/// Coefficients of an element of the (truncated) state space against the
/// orthonormal eigenbasis.
pub type SpectralVector = DVector<f64>;

/// Diagonal generator data: eigenvalues `μ_k` plus domain metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    eigenvalues: Vec<f64>,
    domain_length: f64,
}

impl OperatorSpec {
    pub fn new(eigenvalues: Vec<f64>, domain_length: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return domain("operator needs at least one mode");
        }
        if let Some(k) = eigenvalues.iter().position(|m| !m.is_finite()) {
            return domain(format!("eigenvalue {k} is not finite"));
        }
        if !(domain_length > 0.0) || !domain_length.is_finite() {
            return domain(format!("domain length must be positive, got {domain_length}"));
        }
        Ok(Self {
            eigenvalues,
            domain_length,
        })
    }

    /// Dirichlet Laplacian on `(0, length)`: `μ_k = −(kπ/length)²`.
    pub fn dirichlet_laplacian(n_modes: usize, length: f64) -> Result<Self> {
        if n_modes == 0 {
            return domain("n_modes must be at least 1");
        }
        if !(length > 0.0) {
            return domain(format!("length must be positive, got {length}"));
        }
        let eig = (1..=n_modes)
            .map(|k| {
                let w = k as f64 * PI / length;
                -w * w
            })
            .collect();
        Self::new(eig, length)
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    /// All eigenvalues strictly negative and strictly decreasing.
    pub fn is_dissipative(&self) -> bool {
        self.eigenvalues.iter().all(|&m| m < 0.0)
            && self.eigenvalues.windows(2).all(|w| w[1] < w[0])
    }

    pub(crate) fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.n_modes() {
            return domain(format!(
                "dimension mismatch: operator has {} modes, vector has {len}",
                self.n_modes()
            ));
        }
        Ok(())
    }

    /// Diagonal of `S(dt)`, i.e. `exp(μ_k dt)`.
    pub fn semigroup_factors(&self, dt: f64) -> Result<Vec<f64>> {
        if !(dt >= 0.0) {
            return domain(format!("time step must be non-negative, got {dt}"));
        }
        Ok(self.eigenvalues.iter().map(|m| (m * dt).exp()).collect())
    }

    /// `S(dt) v`.
    pub fn semigroup_apply(&self, dt: f64, v: &SpectralVector) -> Result<SpectralVector> {
        self.check_dim(v.len())?;
        let f = self.semigroup_factors(dt)?;
        Ok(SpectralVector::from_iterator(
            v.len(),
            v.iter().zip(&f).map(|(x, e)| x * e),
        ))
    }

    /// Yosida approximation `A_λ = λA(λ − A)⁻¹`, eigenvalue `λμ/(λ − μ)`.
    pub fn yosida(&self, lambda: f64) -> Result<OperatorSpec> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return domain(format!("Yosida parameter must be positive, got {lambda}"));
        }
        let mut eig = Vec::with_capacity(self.n_modes());
        for (index, &m) in self.eigenvalues.iter().enumerate() {
            let gap = lambda - m;
            if gap.abs() <= 1e-14 * lambda.abs().max(m.abs()) {
                return Err(Error::SingularResolvent { lambda, index });
            }
            eig.push(lambda * m / gap);
        }
        OperatorSpec::new(eig, self.domain_length)
    }
}

/// `⟨u, v⟩` in the eigenbasis.
pub fn inner(u: &SpectralVector, v: &SpectralVector) -> Result<f64> {
    if u.len() != v.len() {
        return domain(format!("dimension mismatch: {} vs {}", u.len(), v.len()));
    }
    Ok(u.dot(v))
}

pub fn norm(v: &SpectralVector) -> f64 {
    v.dot(v).sqrt()
}

/// Projection onto the first `m` modes.
pub fn project(v: &SpectralVector, m: usize) -> Result<SpectralVector> {
    if m == 0 || m > v.len() {
        return domain(format!("cannot project dimension {} onto {m} modes", v.len()));
    }
    Ok(v.rows(0, m).into_owned())
}

/// Zero-padding embedding of a truncated vector back into `n` modes.
pub fn embed(v: &SpectralVector, n: usize) -> Result<SpectralVector> {
    if n < v.len() {
        return domain(format!("cannot embed dimension {} into {n} modes", v.len()));
    }
    let mut out = SpectralVector::zeros(n);
    out.rows_mut(0, v.len()).copy_from(v);
    Ok(out)
}
