/// Lower/upper clamp applied to `p_t` before taking the log.
pub const PROB_EPSILON: f64 = 1e-7;

/// Binary focal loss for a single token and its derivative with respect to
/// the predicted probability.
///
/// `p_t` is the probability assigned to the true class and `alpha_t` the
/// class weight (`alpha` for positives, `1 - alpha` for negatives). The loss
/// is `-alpha_t * (1 - p_t)^gamma * ln(p_t)`, with `p_t` clamped to
/// `[PROB_EPSILON, 1 - PROB_EPSILON]`.
pub fn focal_loss(prob: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p_raw, alpha_t, sign) = if target {
        (prob, alpha, 1.0)
    } else {
        (1.0 - prob, 1.0 - alpha, -1.0)
    };
    let p = p_raw.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    let q = 1.0 - p;
    let ln_p = p.ln();
    let modulator = q.powf(gamma);
    let loss = -alpha_t * modulator * ln_p;

    // d/dp [-a q^g ln p] = a (g q^(g-1) ln p - q^g / p)
    let d_modulator = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0)
    };
    let dloss_dp = alpha_t * (d_modulator * ln_p - modulator / p);
    (loss, sign * dloss_dp)
}
