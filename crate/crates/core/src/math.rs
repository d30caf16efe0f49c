//! Scalar numerics shared by every module. All weights live in log space.

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// `log(mean(exp(v)))`.
pub fn logmeanexp(v: &[f64]) -> f64 {
    logsumexp(v) - (v.len() as f64).ln()
}

/// Self-normalises log-weights in place so that `logsumexp(v) == 0`.
pub fn log_normalise(v: &mut [f64]) -> f64 {
    let lse = logsumexp(v);
    if lse.is_finite() {
        for x in v.iter_mut() {
            *x -= lse;
        }
    }
    lse
}

/// Normalised linear-space weights from log-weights.
pub fn normalised_weights(log_w: &[f64]) -> Vec<f64> {
    let lse = logsumexp(log_w);
    log_w.iter().map(|&x| (x - lse).exp()).collect()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-density of an isotropic Gaussian `N(x; mean, var * I)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / var - 0.5 * x.len() as f64 * (LN_2PI + var.ln())
}

/// One draw from `N(0, 1)`.
pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (divides by `n - 1`).
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn standard_error(v: &[f64]) -> f64 {
    (sample_variance(v) / v.len() as f64).sqrt()
}
