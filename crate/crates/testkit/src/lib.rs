//! Reference oracles for the test suites.
//!
//! Nothing in here depends on `ddc-core`: every routine recomputes its
//! quantity by a different route (quadrature, enumeration, exact rational
//! arithmetic, from-scratch recomputation) so the suites can check the
//! production code against something it does not share code with.

pub mod quadrature {
    // Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
    const XGK: [f64; 8] = [
        0.991_455_371_120_812_6,
        0.949_107_912_342_758_5,
        0.864_864_423_359_769_1,
        0.741_531_185_599_394_4,
        0.586_087_235_467_691_1,
        0.405_845_151_377_397_2,
        0.207_784_955_007_898_5,
        0.0,
    ];
    const WGK: [f64; 8] = [
        0.022_935_322_010_529_22,
        0.063_092_092_629_978_55,
        0.104_790_010_322_250_2,
        0.140_653_259_715_525_9,
        0.169_004_726_639_267_9,
        0.190_350_578_064_785_4,
        0.204_432_940_075_298_9,
        0.209_482_141_084_727_8,
    ];
    const WG: [f64; 4] = [
        0.129_484_966_168_869_7,
        0.279_705_391_489_276_7,
        0.381_830_050_505_118_9,
        0.417_959_183_673_469_4,
    ];

    fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut kronrod = WGK[7] * fc;
        let mut gauss = WG[3] * fc;
        for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
            let dx = h * x;
            let sum = f(c - dx) + f(c + dx);
            kronrod += w * sum;
            if j % 2 == 1 {
                gauss += WG[j / 2] * sum;
            }
        }
        (kronrod * h, ((kronrod - gauss) * h).abs())
    }

    /// Globally adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
    pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
        let mut segments = vec![{
            let (v, e) = gk15(&f, a, b);
            (a, b, v, e)
        }];
        for _ in 0..20_000 {
            let total: f64 = segments.iter().map(|s| s.2).sum();
            let err: f64 = segments.iter().map(|s| s.3).sum();
            if err <= abs_tol.max(rel_tol * total.abs()) {
                break;
            }
            let (worst, _) = segments
                .iter()
                .enumerate()
                .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
                .unwrap();
            let (lo, hi, _, _) = segments.swap_remove(worst);
            let mid = 0.5 * (lo + hi);
            let (v1, e1) = gk15(&f, lo, mid);
            let (v2, e2) = gk15(&f, mid, hi);
            segments.push((lo, mid, v1, e1));
            segments.push((mid, hi, v2, e2));
        }
        segments.iter().map(|s| s.2).sum()
    }

    /// Beta(a, b) CDF at `x`, as the ratio of two quadratures of the density.
    ///
    /// Endpoint singularities are removed with t = u^(1/a) near 0 and
    /// 1 - t = u^(1/b) near 1; the integrand is rescaled by its log-maximum
    /// so large shape parameters do not underflow.
    pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let mode = if a > 1.0 && b > 1.0 {
            (a - 1.0) / (a + b - 2.0)
        } else {
            0.5
        };
        let log_scale = (a - 1.0) * mode.ln() + (b - 1.0) * (1.0 - mode).ln();
        // Left piece: integral over [0, s] of t^(a-1) (1-t)^(b-1) dt with t = u^(1/a).
        let left = |s: f64| -> f64 {
            let upper = s.powf(a);
            integrate(
                |u: f64| {
                    if u <= 0.0 {
                        return (-log_scale).exp() / a;
                    }
                    let t = u.powf(1.0 / a);
                    ((b - 1.0) * (1.0 - t).ln() - log_scale).exp() / a
                },
                0.0,
                upper,
                0.0,
                1e-14,
            )
        };
        // Right piece: integral over [s, 1], mirrored.
        let right = |s: f64| -> f64 {
            let upper = (1.0 - s).powf(b);
            integrate(
                |u: f64| {
                    if u <= 0.0 {
                        return (-log_scale).exp() / b;
                    }
                    let r = u.powf(1.0 / b);
                    ((a - 1.0) * (1.0 - r).ln() - log_scale).exp() / b
                },
                0.0,
                upper,
                0.0,
                1e-14,
            )
        };
        let split = 0.5;
        let total = left(split) + right(split);
        let partial = if x <= split {
            left(x)
        } else {
            left(split) + (right(split) - right(x))
        };
        (partial / total).clamp(0.0, 1.0)
    }

    /// Beta CDF for integer shapes via the binomial-tail identity.
    pub fn beta_cdf_integer(x: f64, a: u32, b: u32) -> f64 {
        let n = a + b - 1;
        let mut total = 0.0;
        for j in a..=n {
            total += binomial(n, j) * x.powi(j as i32) * (1.0 - x).powi((n - j) as i32);
        }
        total
    }

    fn binomial(n: u32, k: u32) -> f64 {
        let k = k.min(n - k);
        let mut acc = 1.0;
        for i in 0..k {
            acc = acc * f64::from(n - i) / f64::from(i + 1);
        }
        acc
    }
}

pub mod quantile {
    /// Tukey upper fence computed in exact rational arithmetic (units of
    /// 1/8) for integer samples, returned as an `f64`.
    pub fn tukey_fence_exact(values: &[i64]) -> f64 {
        let mut v = values.to_vec();
        v.sort_unstable();
        let q1 = quantile_quarters(&v, 1);
        let q3 = quantile_quarters(&v, 3);
        // q values are in quarter units; fence = q3 + 3/2 (q3 - q1) in eighths.
        let eighths = 2 * q3 + 3 * (q3 - q1);
        eighths as f64 / 8.0
    }

    /// The `num`/4 quantile with linear interpolation at index p (n - 1),
    /// in quarter units.
    fn quantile_quarters(sorted: &[i64], num: i64) -> i64 {
        let n = sorted.len() as i64;
        let idx4 = num * (n - 1); // index scaled by 4
        let lo = (idx4 / 4) as usize;
        let frac4 = idx4 % 4;
        let hi = (lo + 1).min(sorted.len() - 1);
        4 * sorted[lo] + frac4 * (sorted[hi] - sorted[lo])
    }

    /// Linear-interpolation percentile (index p (n - 1)), computed directly.
    pub fn percentile(values: &[f64], pct: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = pct / 100.0 * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        v[lo] + (idx - lo as f64) * (v[hi] - v[lo])
    }
}

pub mod linalg {
    /// Eigenvalues of [[a, b], [b, c]] as roots of det(S - lambda I) = 0,
    /// larger first.
    pub fn charpoly_roots(a: f64, b: f64, c: f64) -> (f64, f64) {
        let tr = a + c;
        let det = a * c - b * b;
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        let hi = 0.5 * (tr + disc);
        let lo = 0.5 * (tr - disc);
        (hi, lo)
    }
}

pub mod windows {
    /// Minimum over all full windows of length `len`, each mean recomputed
    /// from scratch; falls back to the whole-stream mean when shorter.
    pub fn min_window_mean(values: &[f64], len: usize) -> f64 {
        if values.len() < len {
            return values.iter().sum::<f64>() / values.len() as f64;
        }
        values
            .windows(len)
            .map(|w| w.iter().sum::<f64>() / len as f64)
            .fold(f64::INFINITY, f64::min)
    }

    /// Mean of the last `len` values, recomputed from scratch.
    pub fn tail_mean(values: &[f64], len: usize) -> f64 {
        let tail = &values[values.len() - len..];
        tail.iter().sum::<f64>() / len as f64
    }
}

pub mod series {
    /// exp(x) by Taylor series with argument halving; independent of libm.
    pub fn exp(x: f64) -> f64 {
        let mut halvings = 0;
        let mut y = x;
        while y.abs() > 0.125 {
            y *= 0.5;
            halvings += 1;
        }
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..40 {
            term *= y / n as f64;
            sum += term;
        }
        for _ in 0..halvings {
            sum *= sum;
        }
        sum
    }
}

pub mod theorem {
    /// Both sides of the CoW-vs-FrQ sufficient condition, evaluated term by
    /// term.
    pub fn sides(p: f64, mu_c: f64, mu_i: f64, m2_c: f64, m2_i: f64) -> (f64, f64) {
        let q = 1.0 - p;
        let lhs = (p * mu_c - q * mu_i) / (p * m2_c + q * m2_i).sqrt();
        let rhs = (p - q) / (4.0 * p * q).sqrt();
        (lhs, rhs)
    }

    /// Exact verdict `lhs > rhs` with every input given in millionths, so
    /// `0.64` is `640_000`. Cross-multiplies squared sides in i128.
    pub fn holds_exact(p: i64, mu_c: i64, mu_i: i64, m2_c: i64, m2_i: i64) -> bool {
        const ONE: i128 = 1_000_000;
        let (p, q) = (p as i128, ONE - p as i128);
        let num_l = p * mu_c as i128 - q * mu_i as i128;
        let den_l = p * m2_c as i128 + q * m2_i as i128;
        let num_r = p - q;
        let den_r = 4 * p * q;
        match (num_l >= 0, num_r >= 0) {
            (true, false) => true,
            (false, true) => false,
            // lhs = num_l / sqrt(den_l * ONE^2), rhs = num_r / sqrt(den_r)
            (true, true) => num_l * num_l * den_r > num_r * num_r * den_l * ONE * ONE,
            (false, false) => num_l * num_l * den_r < num_r * num_r * den_l * ONE * ONE,
        }
    }
}
