//! Reference laws for the asymptotic tests.

use statrs::function::gamma::{gamma_ur, ln_gamma};

/// Upper tail `P(chi2_df >= x)`.
pub fn chisq_sf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "degrees of freedom must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

fn chisq1_sf(x: f64) -> f64 {
    chisq_sf(x, 1)
}

/// Upper tail of `a * chi2_{df_a} + b * chi2_1` with independent components.
///
/// `df_a = 0` drops the first term. The tail is computed as
/// `P(X >= x/a) + int_0^{x/a} f_X(s) P(b chi2_1 >= x - a s) ds`
/// with `X ~ chi2_{df_a}`; the integral is split in half and each half is
/// mapped through a square-root substitution that removes the endpoint
/// singularities before adaptive Simpson quadrature.
pub fn weighted_chisq_mix_sf(x: f64, a: f64, df_a: usize, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "weights must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if df_a == 0 {
        return chisq1_sf(x / b);
    }
    let upper = x / a;
    let k = df_a as f64 / 2.0;
    let norm = (-(k * std::f64::consts::LN_2 + ln_gamma(k))).exp();
    let mid = upper / 2.0;

    // s = t^2 on [0, mid]: f_X(t^2) 2t dt = 2 c t^(df_a - 1) exp(-t^2/2) dt
    let lower_half = |t: f64| {
        let s = t * t;
        2.0 * norm * t.powi(df_a as i32 - 1) * (-s / 2.0).exp() * chisq1_sf((x - a * s) / b)
    };
    // s = upper - u^2 on [mid, upper]: ds = -2u du
    let upper_half = |u: f64| {
        let s = upper - u * u;
        let dens = norm * s.powf(k - 1.0) * (-s / 2.0).exp();
        2.0 * u * dens * chisq1_sf(a * u * u / b)
    };

    let tol = 1e-12;
    let i1 = adaptive_simpson(&lower_half, 0.0, mid.sqrt(), tol);
    let i2 = adaptive_simpson(&upper_half, 0.0, (upper - mid).sqrt(), tol);
    (chisq_sf(upper, df_a) + i1 + i2).clamp(0.0, 1.0)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    // Start from a fixed partition so narrow features are not skipped.
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (flo, fhi, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fm + fhi);
            simpson_step(f, lo, hi, flo, fm, fhi, whole, tol / pieces as f64, 40)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}
