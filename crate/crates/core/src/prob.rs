//! Discretized densities used both as training likelihoods and to build
//! entropy-coding tables.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Mass of the unit bin centred on `y` under `N(0, sigma^2)`.
///
/// Evaluated on the lower tail (`-|y|`) so large `|y|` keeps precision.
pub fn gaussian_bin_mass(y: f64, sigma: f64) -> f64 {
    let a = y.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// `(d mass / d y, d mass / d sigma)` for [`gaussian_bin_mass`].
pub fn gaussian_bin_mass_grad(y: f64, sigma: f64) -> (f64, f64) {
    let a = y.abs();
    let (u, l) = (0.5 - a, -0.5 - a);
    let (pu, pl) = (normal_pdf(u / sigma), normal_pdf(l / sigma));
    let d_abs = (pl - pu) / sigma;
    let d_sigma = (l * pl - u * pu) / (sigma * sigma);
    (d_abs * y.signum() * if y == 0.0 { 0.0 } else { 1.0 }, d_sigma)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mass of the unit bin centred on `z` under a logistic with location `loc`
/// and scale `scale`.
pub fn logistic_bin_mass(z: f64, loc: f64, scale: f64) -> f64 {
    let d = -(z - loc).abs();
    sigmoid((d + 0.5) / scale) - sigmoid((d - 0.5) / scale)
}

/// `(d mass / d z, d mass / d log_scale)` for [`logistic_bin_mass`];
/// the location gradient is the negated `z` gradient.
pub fn logistic_bin_mass_grad(z: f64, loc: f64, scale: f64) -> (f64, f64) {
    let t = z - loc;
    let d = -t.abs();
    let (a, b) = ((d + 0.5) / scale, (d - 0.5) / scale);
    let (sa, sb) = (sigmoid(a), sigmoid(b));
    let (da, db) = (sa * (1.0 - sa), sb * (1.0 - sb));
    // d mass / d d, then chain through d = -|t|
    let d_d = (da - db) / scale;
    let d_z = if t > 0.0 {
        -d_d
    } else if t < 0.0 {
        d_d
    } else {
        0.0
    };
    let d_log_scale = -(a * da - b * db);
    (d_z, d_log_scale)
}

pub fn bits(p: f64) -> f64 {
    -p.ln() / LN_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_masses_sum_to_one() {
        for sigma in [0.11, 0.7, 3.0, 20.0] {
            let total: f64 = (-400..=400).map(|k| gaussian_bin_mass(k as f64, sigma)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{sigma}: {total}");
        }
    }

    #[test]
    fn logistic_masses_sum_to_one() {
        let total: f64 = (-600..=600).map(|k| logistic_bin_mass(k as f64, 1.3, 2.0)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let h = 1e-6;
        for &(y, s) in &[(0.3, 0.8), (-1.7, 1.4), (2.2, 0.5)] {
            let (gy, gs) = gaussian_bin_mass_grad(y, s);
            let fy = (gaussian_bin_mass(y + h, s) - gaussian_bin_mass(y - h, s)) / (2.0 * h);
            let fs = (gaussian_bin_mass(y, s + h) - gaussian_bin_mass(y, s - h)) / (2.0 * h);
            assert!((gy - fy).abs() < 1e-6 && (gs - fs).abs() < 1e-6);

            let (lz, ls) = logistic_bin_mass_grad(y, 0.2, s);
            let fz = (logistic_bin_mass(y + h, 0.2, s) - logistic_bin_mass(y - h, 0.2, s)) / (2.0 * h);
            let fl = (logistic_bin_mass(y, 0.2, s * h.exp()) - logistic_bin_mass(y, 0.2, s * (-h).exp()))
                / (2.0 * h);
            assert!((lz - fz).abs() < 1e-6 && (ls - fl).abs() < 1e-6);
        }
    }
}
