//! Exhaustive threshold sweep for TDR at a fixed FDR.

/// Tries every observed score and +∞ as the threshold, keeps the smallest
/// one that flags at most a fraction `f` of bonafide scores, and returns the
/// fraction of attack scores at or above it.
pub fn tdr(bonafide: &[f64], pa: &[f64], f: f64) -> f64 {
    let mut candidates: Vec<f64> = bonafide.iter().chain(pa).copied().collect();
    candidates.push(f64::INFINITY);
    let mut best = f64::INFINITY;
    for &tau in &candidates {
        let flagged = bonafide.iter().filter(|&&b| b >= tau).count();
        if flagged as f64 / bonafide.len() as f64 <= f && tau < best {
            best = tau;
        }
    }
    pa.iter().filter(|&&p| p >= best).count() as f64 / pa.len() as f64
}
