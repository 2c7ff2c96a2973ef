//! Negative error projector.
//!
//! A query `f` is reconstructed as `Kᵀρ` from the stacked prototype matrix `K`
//! (one row per class) with a ridge penalty, `ρ* = (KKᵀ + λI)⁻¹ K f`. Each
//! class is then scored by how well its own term alone explains the query,
//! `R_i = ‖f − ρ*_i K_i‖ / (|ρ*_i| + ε)`, and the smallest residual wins.
//!
//! The solve factors the `C × C` matrix `KKᵀ + λI` once per prototype set and
//! reuses the factor for every query.

use serde::{Deserialize, Serialize};

use crate::embedding_store::ClassId;
use crate::error::{validation, EptError, Result};
use crate::linalg::{dist, dot, norm, Cholesky, Matrix};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NepSettings {
    pub lambda_reg: f64,
    pub epsilon: f64,
}

impl Default for NepSettings {
    fn default() -> Self {
        Self { lambda_reg: 0.3, epsilon: 1e-8 }
    }
}

impl NepSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg > 0.0) || !self.lambda_reg.is_finite() {
            return Err(EptError::Config(format!("lambda_reg must be positive, got {}", self.lambda_reg)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(EptError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn check_finite<T: Real>(what: &str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        validation(format!("{what} has non-finite entries"))
    }
}

/// Ridge coefficients `ρ* = (KKᵀ + λI)⁻¹ K f`.
pub fn solve_ridge<T: Real>(k: &Matrix<T>, f: &[T], lambda: T) -> Result<Vec<T>> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return validation(format!("ridge lambda must be positive, got {lambda}"));
    }
    if f.len() != k.cols() {
        return validation(format!("query has length {}, prototypes have {}", f.len(), k.cols()));
    }
    check_finite("prototype matrix", k.as_slice())?;
    check_finite("query", f)?;
    let chol = Cholesky::factor(&k.gram_shifted(lambda))?;
    Ok(chol.solve(&k.mul_vec(f)))
}

/// Normalized per-class residuals `‖f − ρ_i K_i‖ / (|ρ_i| + ε)`.
///
/// `epsilon = 0` is accepted for analysis; the residual is then infinite for
/// classes whose coefficient is exactly zero.
pub fn residuals<T: Real>(k: &Matrix<T>, f: &[T], rho: &[T], epsilon: T) -> Result<Vec<T>> {
    if !(epsilon >= T::zero()) {
        return validation(format!("epsilon must be non-negative, got {epsilon}"));
    }
    if rho.len() != k.rows() || f.len() != k.cols() {
        return validation("residual inputs have inconsistent sizes");
    }
    Ok(rho
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let row = k.row(i);
            let num = f
                .iter()
                .zip(row)
                .fold(T::zero(), |acc, (&fj, &kj)| {
                    let e = fj - r * kj;
                    acc + e * e
                })
                .sqrt();
            num / (r.abs() + epsilon)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NepDecision<T> {
    pub coefficients: Vec<T>,
    pub residuals: Vec<T>,
    pub predicted: ClassId,
}

/// Prototype matrix plus its cached factorization.
#[derive(Debug, Clone)]
pub struct NepModel<T> {
    k: Matrix<T>,
    class_ids: Vec<ClassId>,
    lambda: T,
    epsilon: T,
    chol: Cholesky<T>,
}

impl<T: Real> NepModel<T> {
    pub fn new(k: Matrix<T>, class_ids: Vec<ClassId>, lambda: T, epsilon: T) -> Result<Self> {
        if k.rows() == 0 {
            return validation("prototype matrix needs at least one row");
        }
        if class_ids.len() != k.rows() {
            return validation(format!("{} class ids for {} prototype rows", class_ids.len(), k.rows()));
        }
        if !(lambda > T::zero()) || !(epsilon > T::zero()) {
            return validation("lambda and epsilon must be positive");
        }
        check_finite("prototype matrix", k.as_slice())?;
        let chol = Cholesky::factor(&k.gram_shifted(lambda))?;
        Ok(Self { k, class_ids, lambda, epsilon, chol })
    }

    pub fn prototypes(&self) -> &Matrix<T> {
        &self.k
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub(crate) fn factor(&self) -> &Cholesky<T> {
        &self.chol
    }

    pub fn coefficients(&self, f: &[T]) -> Result<Vec<T>> {
        if f.len() != self.k.cols() {
            return validation(format!("query has length {}, prototypes have {}", f.len(), self.k.cols()));
        }
        check_finite("query", f)?;
        Ok(self.chol.solve(&self.k.mul_vec(f)))
    }

    pub fn residuals(&self, f: &[T]) -> Result<Vec<T>> {
        let rho = self.coefficients(f)?;
        residuals(&self.k, f, &rho, self.epsilon)
    }

    pub fn classify(&self, f: &[T]) -> Result<NepDecision<T>> {
        let coefficients = self.coefficients(f)?;
        let residuals = residuals(&self.k, f, &coefficients, self.epsilon)?;
        let predicted = self.class_ids[argmin(&residuals)];
        Ok(NepDecision { coefficients, residuals, predicted })
    }

    /// Classifies many queries with one factorization; `Kf` for the whole
    /// batch is a single matrix product.
    pub fn classify_batch(&self, queries: &Matrix<T>) -> Result<Vec<ClassId>> {
        if queries.cols() != self.k.cols() {
            return validation("query batch dimension mismatch");
        }
        check_finite("query batch", queries.as_slice())?;
        let mut kt = Matrix::zeros(self.k.cols(), self.k.rows());
        for i in 0..self.k.rows() {
            for j in 0..self.k.cols() {
                kt.set(j, i, self.k.get(i, j));
            }
        }
        let kf = queries.matmul(&kt);
        (0..queries.rows())
            .map(|q| {
                let rho = self.chol.solve(kf.row(q));
                let r = residuals(&self.k, queries.row(q), &rho, self.epsilon)?;
                Ok(self.class_ids[argmin(&r)])
            })
            .collect()
    }
}

pub fn classify_nep<T: Real>(model: &NepModel<T>, f: &[T]) -> Result<NepDecision<T>> {
    model.classify(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::SquaredEuclidean, Metric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::SquaredEuclidean => "squared_euclidean",
            Metric::Cosine => "cosine",
        }
    }

    /// Distance to minimize; cosine uses `1 − cos`.
    pub fn distance<T: Real>(self, p: &[T], f: &[T]) -> Result<T> {
        match self {
            Metric::Euclidean => Ok(dist(p, f)),
            Metric::SquaredEuclidean => {
                let d = dist(p, f);
                Ok(d * d)
            }
            Metric::Cosine => {
                let (np, nf) = (norm(p), norm(f));
                if np == T::zero() || nf == T::zero() {
                    return validation("cosine similarity undefined for a zero-norm vector");
                }
                Ok(T::one() - dot(p, f) / (np * nf))
            }
        }
    }
}

/// Row index of the nearest prototype under `metric`; ties go to the lowest index.
pub fn classify_metric<T: Real>(prototypes: &Matrix<T>, f: &[T], metric: Metric) -> Result<usize> {
    if prototypes.rows() == 0 {
        return validation("no prototypes");
    }
    if f.len() != prototypes.cols() {
        return validation("query dimension mismatch");
    }
    let d = (0..prototypes.rows()).map(|i| metric.distance(prototypes.row(i), f)).collect::<Result<Vec<T>>>()?;
    Ok(argmin(&d))
}

/// Test-time decision rule over a frozen prototype set.
#[derive(Debug, Clone)]
pub enum Classifier<T> {
    Nep(NepModel<T>),
    Metric { prototypes: Matrix<T>, class_ids: Vec<ClassId>, metric: Metric },
}

impl<T: Real> Classifier<T> {
    pub fn predict(&self, f: &[T]) -> Result<ClassId> {
        match self {
            Classifier::Nep(m) => Ok(m.classify(f)?.predicted),
            Classifier::Metric { prototypes, class_ids, metric } => {
                Ok(class_ids[classify_metric(prototypes, f, *metric)?])
            }
        }
    }
}
