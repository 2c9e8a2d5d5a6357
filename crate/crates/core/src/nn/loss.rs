/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Clamped probability and whether the clamp was inactive (so the
/// derivative of the clamp is 1 rather than 0).
pub fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

/// Binary cross entropy `−r·ln p − (1−r)·ln(1−p)` and its derivative
/// with respect to `p`.
pub fn bce_loss(p: f64, r: f64) -> (f64, f64) {
    let (c, live) = clamp_prob(p);
    let loss = -r * c.ln() - (1.0 - r) * (1.0 - c).ln();
    let grad = if live {
        -r / c + (1.0 - r) / (1.0 - c)
    } else {
        0.0
    };
    (loss, grad)
}

/// Negative log likelihood `−ln dist[label]` and its derivative with
/// respect to `dist[label]` (all other entries have zero derivative).
pub fn nll_loss(dist: &[f64], label: usize) -> (f64, f64) {
    let (c, live) = clamp_prob(dist[label]);
    (-c.ln(), if live { -1.0 / c } else { 0.0 })
}
