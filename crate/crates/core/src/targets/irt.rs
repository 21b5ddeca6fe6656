//! One-parameter-logistic item response model.

use ndarray::{Array1, ArrayView1};

use super::{sigmoid, softplus, TargetDensity};
use crate::error::{Error, Result};

const DELTA_PRIOR_MEAN: f64 = 0.75;

/// 1PL item-response posterior: δ ~ N(0.75, 1), α_i ~ N(0,1), β_j ~ N(0,1),
/// y_ij ~ Bern(σ(α_i − β_j + δ)) over the observed (student, question) pairs.
///
/// Parameter layout: `[α_0..α_{S-1}, β_0..β_{J-1}, δ]`, dimension S + J + 1.
/// Gaussian normalization constants are dropped, so U attains 0 at
/// (α, β, δ) = (0, 0, 0.75) when no responses are observed.
#[derive(Debug, Clone)]
pub struct ItemResponse {
    responses: Vec<(usize, usize, f64)>,
    students: usize,
    questions: usize,
}

impl ItemResponse {
    pub fn new(
        responses: Vec<(usize, usize, bool)>,
        students: usize,
        questions: usize,
    ) -> Result<Self> {
        for &(i, j, _) in &responses {
            if i >= students || j >= questions {
                return Err(Error::Schema(format!(
                    "response index ({i}, {j}) outside ({students}, {questions})"
                )));
            }
        }
        Ok(ItemResponse {
            responses: responses
                .into_iter()
                .map(|(i, j, y)| (i, j, if y { 1.0 } else { 0.0 }))
                .collect(),
            students,
            questions,
        })
    }

    pub fn students(&self) -> usize {
        self.students
    }

    pub fn questions(&self) -> usize {
        self.questions
    }

    pub fn response_count(&self) -> usize {
        self.responses.len()
    }

    fn delta_index(&self) -> usize {
        self.students + self.questions
    }
}

impl TargetDensity for ItemResponse {
    fn dim(&self) -> usize {
        self.students + self.questions + 1
    }

    fn potential(&self, x: ArrayView1<f64>) -> f64 {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in potential");
        let delta = x[self.delta_index()];
        let mut u = 0.5 * (delta - DELTA_PRIOR_MEAN).powi(2);
        for k in 0..self.students + self.questions {
            u += 0.5 * x[k] * x[k];
        }
        for &(i, j, y) in &self.responses {
            let z = x[i] - x[self.students + j] + delta;
            u += softplus(z) - y * z;
        }
        u
    }

    fn grad_potential(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in grad_potential");
        let delta_idx = self.delta_index();
        let delta = x[delta_idx];
        let mut grad = Array1::<f64>::zeros(self.dim());
        for k in 0..self.students + self.questions {
            grad[k] = x[k];
        }
        grad[delta_idx] = delta - DELTA_PRIOR_MEAN;
        for &(i, j, y) in &self.responses {
            let z = x[i] - x[self.students + j] + delta;
            let r = sigmoid(z) - y;
            grad[i] += r;
            grad[self.students + j] -= r;
            grad[delta_idx] += r;
        }
        grad
    }
}
