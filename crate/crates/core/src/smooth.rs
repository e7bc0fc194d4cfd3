//! Log-sum-exp smoothing of the truncated maximum `max(0, max_k s_k)`.
//!
//! Both the geometric distance field and the velocity-space distance field
//! are built from the same nested composition
//! `(1/σ) lse{0, lse{σ s_k}}`, which collapses to `(1/σ) log(1 + Σ exp(σ s_k))`.
//! Everything here works on plain score slices so callers in any dimension
//! can combine the weights with their own normals.

/// `log Σ exp(z_i)` with the running-max shift. Returns `-inf` for an empty slice.
pub fn lse(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Non-smooth reference `max(0, max_k s_k)`.
pub fn truncated_max(scores: &[f64]) -> f64 {
    scores.iter().copied().fold(0.0, f64::max)
}

/// Smoothed truncated maximum of a score vector and its softmax weights.
#[derive(Debug, Clone)]
pub struct SmoothMax {
    pub value: f64,
    /// `∂value/∂s_k`; sums to `1 - zero_weight`.
    pub weights: Vec<f64>,
    /// Weight carried by the implicit zero slot.
    pub zero_weight: f64,
    pub sigma: f64,
}

impl SmoothMax {
    pub fn new(scores: &[f64], sigma: f64) -> Self {
        debug_assert!(sigma > 0.0);
        // shift by the largest exponent, the zero slot included
        let m = scores.iter().map(|s| sigma * s).fold(0.0, f64::max);
        let zero = (-m).exp();
        let mut weights: Vec<f64> = scores.iter().map(|s| (sigma * s - m).exp()).collect();
        let total = zero + weights.iter().sum::<f64>();
        // the largest slot is exactly 1; ln_1p keeps tiny remainders positive
        let argmax = weights.iter().position(|&w| w == 1.0);
        let rest = match argmax {
            Some(k) => {
                zero + weights
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != k)
                    .map(|(_, w)| w)
                    .sum::<f64>()
            }
            None => weights.iter().sum::<f64>(),
        };
        for w in &mut weights {
            *w /= total;
        }
        SmoothMax {
            value: (m + rest.ln_1p()) / sigma,
            weights,
            zero_weight: zero / total,
            sigma,
        }
    }

    /// `Σ w_k s_k`, the weighted mean score (zero slot contributes 0).
    pub fn mean_score(&self, scores: &[f64]) -> f64 {
        self.weights.iter().zip(scores).map(|(w, s)| w * s).sum()
    }

    /// Derivative of `value` with respect to σ at fixed scores.
    pub fn dvalue_dsigma(&self, scores: &[f64]) -> f64 {
        (self.mean_score(scores) - self.value) / self.sigma
    }

    /// Directional derivative of the weights given score perturbations `ds`
    /// and a σ perturbation `dsigma`.
    pub fn weight_tangent(&self, scores: &[f64], ds: &[f64], dsigma: f64) -> Vec<f64> {
        let dt: Vec<f64> = scores
            .iter()
            .zip(ds)
            .map(|(s, d)| dsigma * s + self.sigma * d)
            .collect();
        let mean: f64 = self.weights.iter().zip(&dt).map(|(w, d)| w * d).sum();
        self.weights
            .iter()
            .zip(&dt)
            .map(|(w, d)| w * (d - mean))
            .collect()
    }

    /// Directional derivative of `value` given `ds` and `dsigma`.
    pub fn value_tangent(&self, scores: &[f64], ds: &[f64], dsigma: f64) -> f64 {
        let dl: f64 = self
            .weights
            .iter()
            .zip(scores.iter().zip(ds))
            .map(|(w, (s, d))| w * (dsigma * s + self.sigma * d))
            .sum();
        let l = self.value * self.sigma;
        dl / self.sigma - l * dsigma / (self.sigma * self.sigma)
    }
}
