use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpikeError {
    #[error("spike window must be at least 8, got {0}")]
    Window(usize),
    #[error("series of {len} losses is shorter than the window {window}")]
    TooShort { len: usize, window: usize },
}

/// Quantile with linear interpolation between order statistics of a sorted
/// slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Indices `t ≥ window` whose loss exceeds `median + k·IQR` of the
/// `window` losses immediately before it.
pub fn detect_spikes(losses: &[f64], window: usize, k: f64) -> Result<Vec<usize>, SpikeError> {
    if window < 8 {
        return Err(SpikeError::Window(window));
    }
    if losses.len() < window {
        return Err(SpikeError::TooShort {
            len: losses.len(),
            window,
        });
    }
    let mut out = Vec::new();
    let mut buf = Vec::with_capacity(window);
    for t in window..losses.len() {
        buf.clear();
        buf.extend_from_slice(&losses[t - window..t]);
        buf.sort_by(f64::total_cmp);
        let med = quantile(&buf, 0.5);
        let iqr = quantile(&buf, 0.75) - quantile(&buf, 0.25);
        if losses[t] > med + k * iqr {
            out.push(t);
        }
    }
    Ok(out)
}
