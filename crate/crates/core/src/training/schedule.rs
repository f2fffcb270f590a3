/// Number of warmup steps: `round(warmup_fraction * steps)`.
pub fn warmup_steps(steps: u64, warmup_fraction: f64) -> u64 {
    (warmup_fraction * steps as f64).round() as u64
}

/// Linear ramp `0 -> lr` over the warmup, then linear decay to 0 at `steps`.
///
/// The decay is anchored at `max(warmup, 1)` so the peak is exactly `lr`
/// even without warmup.
pub fn lr_at(step: u64, steps: u64, warmup_fraction: f64, lr: f64) -> f64 {
    let warmup = warmup_steps(steps, warmup_fraction);
    if step <= warmup {
        return lr * step as f64 / warmup as f64;
    }
    let anchor = warmup.max(1);
    if steps <= anchor {
        return lr;
    }
    let remaining = steps.saturating_sub(step);
    lr * remaining as f64 / (steps - anchor) as f64
}
