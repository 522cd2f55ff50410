//! Logistic policies over binary actions.

use serde::{Deserialize, Serialize};

use crate::error::{OplError, Result};

/// How a state is mapped to the logit features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `(1, s_1, ..., s_d)`
    #[default]
    Intercept,
    /// `(s_1, ..., s_d)`
    Linear,
}

impl FeatureMap {
    pub fn dim(self, state_dim: usize) -> usize {
        match self {
            FeatureMap::Intercept => state_dim + 1,
            FeatureMap::Linear => state_dim,
        }
    }

    pub fn apply(self, state: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Intercept => std::iter::once(1.0).chain(state.iter().copied()).collect(),
            FeatureMap::Linear => state.to_vec(),
        }
    }

    fn logit(self, theta: &[f64], state: &[f64]) -> f64 {
        match self {
            FeatureMap::Intercept => theta[0] + theta[1..].iter().zip(state).map(|(t, s)| t * s).sum::<f64>(),
            FeatureMap::Linear => theta.iter().zip(state).map(|(t, s)| t * s).sum(),
        }
    }
}

/// Numerically stable logistic function.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `pi(1 | s) = expit(phi(s)^T theta)` with `|theta_j| <= c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    #[serde(rename = "box")]
    pub box_bound: f64,
    pub features: FeatureMap,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>, box_bound: f64, features: FeatureMap) -> Result<Self> {
        if !(box_bound > 0.0) {
            return Err(OplError::Value(format!("box bound must be positive, got {box_bound}")));
        }
        if let Some(t) = theta.iter().find(|t| !t.is_finite() || t.abs() > box_bound) {
            return Err(OplError::Value(format!("theta entry {t} outside the box [-{box_bound}, {box_bound}]")));
        }
        Ok(Self { theta, box_bound, features })
    }

    pub fn zeros(state_dim: usize, box_bound: f64, features: FeatureMap) -> Self {
        Self { theta: vec![0.0; features.dim(state_dim)], box_bound, features }
    }

    /// Same feature map and box, different parameters (clamped into the box).
    pub fn with_theta(&self, theta: &[f64]) -> Self {
        Self { theta: project_box(theta, self.box_bound), box_bound: self.box_bound, features: self.features }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, state: &[f64]) -> f64 {
        self.features.logit(&self.theta, state)
    }

    pub fn prob_one(&self, state: &[f64]) -> f64 {
        expit(self.logit(state))
    }

    pub fn prob(&self, state: &[f64], action: u8) -> f64 {
        let p = self.prob_one(state);
        if action == 1 { p } else { 1.0 - p }
    }

    /// `d pi(1|s) / d theta = pi(1-pi) phi(s)`.
    pub fn grad_prob_one(&self, state: &[f64]) -> Vec<f64> {
        let p = self.prob_one(state);
        let w = p * (1.0 - p);
        self.features.apply(state).into_iter().map(|f| w * f).collect()
    }

    /// Draws an action from a uniform variate `u` in `[0, 1)`.
    pub fn act(&self, state: &[f64], u: f64) -> u8 {
        u8::from(u < self.prob_one(state))
    }
}

/// Clamps every coordinate into `[-c, c]`.
pub fn project_box(theta: &[f64], c: f64) -> Vec<f64> {
    theta.iter().map(|t| t.clamp(-c, c)).collect()
}

/// `policy_prob` for call sites that only hold parameters.
pub fn policy_prob(params: &PolicyParams, state: &[f64]) -> f64 {
    params.prob_one(state)
}
