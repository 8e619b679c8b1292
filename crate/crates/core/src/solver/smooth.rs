//! Logistic surrogate of the indicator `𝕀(z ≤ 1)`.

const EXP_CLAMP: f64 = 500.0;

/// `1 / (1 + exp((z − 1)/ε))`, with the exponent clamped to ±500.
pub fn smooth_indicator(z: f64, epsilon: f64) -> f64 {
    let t = ((z - 1.0) / epsilon).clamp(-EXP_CLAMP, EXP_CLAMP);
    1.0 / (1.0 + t.exp())
}

/// Value and derivative with respect to `z`.
pub(crate) fn smooth_indicator_with_slope(z: f64, epsilon: f64) -> (f64, f64) {
    let s = smooth_indicator(z, epsilon);
    (s, -s * (1.0 - s) / epsilon)
}
