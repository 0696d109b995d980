//! KL penalty of Gaussian variational dropout, as a function of the noise
//! variance `alpha` (parameterized by `log alpha`).

use log::warn;

pub const K1: f64 = 0.63576;
pub const K2: f64 = 1.87320;
pub const K3: f64 = 1.48695;

pub const LOG_ALPHA_MIN: f64 = -18.420680743952367; // ln 1e-8
pub const LOG_ALPHA_MAX: f64 = 0.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-u))` without overflow.
fn softplus_neg(u: f64) -> f64 {
    if u > 0.0 {
        (-u).exp().ln_1p()
    } else {
        -u + u.exp().ln_1p()
    }
}

pub fn clip_log_alpha(u: f64) -> f64 {
    u.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX)
}

/// Penalty for one noise variance: `-(k1 sigmoid(k2 + k3 u) - log(1 + 1/alpha) / 2 - k1)`
/// with `u = log alpha`. Decreases towards 0 as alpha grows.
pub fn kl_scalar(log_alpha: f64) -> f64 {
    -(K1 * sigmoid(K2 + K3 * log_alpha) - 0.5 * softplus_neg(log_alpha) - K1)
}

/// Derivative of [`kl_scalar`] with respect to `log alpha`.
pub fn kl_grad_log_alpha(log_alpha: f64) -> f64 {
    let s = sigmoid(K2 + K3 * log_alpha);
    -(K1 * K3 * s * (1.0 - s) + 0.5 * sigmoid(-log_alpha))
}

/// Sum of per-study penalties. Variances outside `[1e-8, 1]` are clipped.
pub fn kl_penalty(alphas: &[f64]) -> f64 {
    alphas
        .iter()
        .map(|&a| {
            let u = a.ln();
            let c = clip_log_alpha(u);
            if c != u || a.is_nan() {
                warn!("dropout variance {a} clipped to [1e-8, 1]");
            }
            kl_scalar(if a.is_nan() { LOG_ALPHA_MAX } else { c })
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        // independent evaluation of the approximation at alpha = 1 and 1e-8
        let naive = |a: f64| {
            let s = 1.0 / (1.0 + (-(K2 + K3 * a.ln())).exp());
            -(K1 * s - 0.5 * (1.0 + 1.0 / a).ln() - K1)
        };
        for a in [1.0, 0.3, 1e-3, 1e-8] {
            assert!((kl_scalar(f64::ln(a)) - naive(a)).abs() < 1e-12);
        }
        assert!((kl_scalar(LOG_ALPHA_MIN) - 9.8462).abs() < 1e-3);
        assert!(kl_scalar(40.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_decreasing_in_alpha() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let u = -20.0 + 0.2 * i as f64;
            let v = kl_scalar(u);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &u in &[-18.0, -5.0, -1.0, -0.3, 0.0] {
            let h = 1e-5;
            let fd = (kl_scalar(u + h) - kl_scalar(u - h)) / (2.0 * h);
            let an = kl_grad_log_alpha(u);
            assert!(((fd - an) / an).abs() < 1e-6, "{u}: {fd} vs {an}");
        }
    }

    #[test]
    fn additive_over_studies() {
        let alphas = [1.0, 0.2, 1e-4];
        let sum: f64 = alphas.iter().map(|a| kl_penalty(&[*a])).sum();
        assert!((kl_penalty(&alphas) - sum).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_clipped() {
        assert_eq!(kl_penalty(&[5.0]), kl_penalty(&[1.0]));
        assert_eq!(kl_penalty(&[1e-12]), kl_penalty(&[1e-8]));
    }
}
