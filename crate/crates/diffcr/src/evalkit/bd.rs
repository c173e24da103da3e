//! Rate-difference summary between two rate-distortion curves.
//!
//! Both variants integrate log10(rate) as a function of quality over the
//! quality range the curves share and report the average rate ratio as a
//! percentage (positive means the test curve spends more bits at equal
//! quality). The default fits one cubic polynomial per curve by least
//! squares in a normalized quality coordinate and integrates it exactly;
//! the alternative interpolates with a monotone cubic Hermite spline
//! (Fritsch-Carlson slopes), better behaved on short or irregular curves.

use crate::error::{DiffcrError, Result};

#[derive(Clone, Copy, Debug)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// Average rate overhead of `test` relative to `reference` in percent,
/// cubic-fit variant. Needs at least four points per curve.
pub fn bd_rate(reference: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let rp = prepare(reference, 4)?;
    let tp = prepare(test, 4)?;
    let (lo, hi) = overlap(&rp, &tp)?;

    // one shared affine map to [-1, 1] keeps the Vandermonde system tame
    let q_min = rp[0].0.min(tp[0].0);
    let q_max = rp.last().unwrap().0.max(tp.last().unwrap().0);
    let mid = 0.5 * (q_min + q_max);
    let half = 0.5 * (q_max - q_min);
    let map = |q: f64| (q - mid) / half;

    let fit = |pts: &[(f64, f64)]| -> Result<[f64; 4]> {
        let upts: Vec<(f64, f64)> = pts.iter().map(|&(q, r)| (map(q), r)).collect();
        fit_cubic(&upts)
    };
    let cr = fit(&rp)?;
    let ct = fit(&tp)?;
    let (u0, u1) = (map(lo), map(hi));
    let avg = (cubic_integral(&ct, u0, u1) - cubic_integral(&cr, u0, u1)) / (u1 - u0);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Monotone-spline variant of [`bd_rate`]. Needs at least two points.
pub fn bd_rate_pchip(reference: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let rp = prepare(reference, 2)?;
    let tp = prepare(test, 2)?;
    let (lo, hi) = overlap(&rp, &tp)?;
    let ir = pchip_integral(&rp, lo, hi);
    let it = pchip_integral(&tp, lo, hi);
    let avg = (it - ir) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Sorted (quality, log10 rate) pairs with validity checks.
fn prepare(points: &[RdPoint], min_points: usize) -> Result<Vec<(f64, f64)>> {
    if points.len() < min_points {
        return Err(DiffcrError::invalid(format!(
            "rd curve needs at least {min_points} points, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len());
    for p in points {
        if !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite()) {
            return Err(DiffcrError::invalid(format!(
                "bad rd point: bpp {} quality {}",
                p.bpp, p.quality
            )));
        }
        pts.push((p.quality, p.bpp.log10()));
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(DiffcrError::invalid(format!(
                "duplicate quality value {} on rd curve",
                w[0].0
            )));
        }
    }
    Ok(pts)
}

fn overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<(f64, f64)> {
    let lo = a[0].0.max(b[0].0);
    let hi = a.last().unwrap().0.min(b.last().unwrap().0);
    if hi <= lo {
        return Err(DiffcrError::invalid("rd curves share no quality range"));
    }
    Ok((lo, hi))
}

/// Least-squares cubic through (u, y) via the 4x4 normal equations.
fn fit_cubic(pts: &[(f64, f64)]) -> Result<[f64; 4]> {
    let mut pow_sums = [0.0f64; 7];
    let mut rhs = [0.0f64; 4];
    for &(u, y) in pts {
        let mut up = 1.0;
        for (k, ps) in pow_sums.iter_mut().enumerate() {
            *ps += up;
            if k < 4 {
                rhs[k] += y * up;
            }
            up *= u;
        }
    }
    let mut a = [[0.0f64; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = pow_sums[i + j];
        }
    }
    solve4(a, rhs)
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return Err(DiffcrError::invalid("degenerate rd curve fit"));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for i in (0..4).rev() {
        let mut acc = b[i];
        for j in i + 1..4 {
            acc -= a[i][j] * x[j];
        }
        x[i] = acc / a[i][i];
    }
    Ok(x)
}

fn cubic_integral(c: &[f64; 4], u0: f64, u1: f64) -> f64 {
    let anti = |u: f64| {
        let u2 = u * u;
        c[0] * u + c[1] * u2 / 2.0 + c[2] * u2 * u / 3.0 + c[3] * u2 * u2 / 4.0
    };
    anti(u1) - anti(u0)
}

/// Fritsch-Carlson tangents for a monotonicity-preserving cubic Hermite
/// interpolant.
fn pchip_slopes(pts: &[(f64, f64)]) -> Vec<f64> {
    let n = pts.len();
    if n == 2 {
        let d = (pts[1].1 - pts[0].1) / (pts[1].0 - pts[0].0);
        return vec![d, d];
    }
    let h: Vec<f64> = pts.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let delta: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect();
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] <= 0.0 {
            m[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    m[0] = endpoint_slope(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = endpoint_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let mut m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        m = 0.0;
    } else if d0 * d1 < 0.0 && m.abs() > 3.0 * d0.abs() {
        m = 3.0 * d0;
    }
    m
}

/// Exact integral of the pchip interpolant over `[lo, hi]`, which must lie
/// inside the curve's quality range.
fn pchip_integral(pts: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let m = pchip_slopes(pts);
    let mut total = 0.0;
    for k in 0..pts.len() - 1 {
        let (x0, y0) = pts[k];
        let (x1, y1) = pts[k + 1];
        let a = lo.max(x0);
        let b = hi.min(x1);
        if b <= a {
            continue;
        }
        let h = x1 - x0;
        let s0 = (a - x0) / h;
        let s1 = (b - x0) / h;
        total += h * (hermite_anti(y0, m[k], y1, m[k + 1], h, s1)
            - hermite_anti(y0, m[k], y1, m[k + 1], h, s0));
    }
    total
}

/// Antiderivative in s of the cubic Hermite basis combination on [0, 1].
fn hermite_anti(y0: f64, m0: f64, y1: f64, m1: f64, h: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let i00 = s4 / 2.0 - s3 + s;
    let i10 = s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0;
    let i01 = -s4 / 2.0 + s3;
    let i11 = s4 / 4.0 - s3 / 3.0;
    y0 * i00 + h * m0 * i10 + y1 * i01 + h * m1 * i11
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scale: f64) -> Vec<RdPoint> {
        [(0.1, 30.0), (0.2, 33.5), (0.4, 36.2), (0.8, 38.4)]
            .iter()
            .map(|&(b, q)| RdPoint { bpp: b * scale, quality: q })
            .collect()
    }

    #[test]
    fn identical_curves_score_zero() {
        assert!(bd_rate(&curve(1.0), &curve(1.0)).unwrap().abs() < 1e-9);
        assert!(bd_rate_pchip(&curve(1.0), &curve(1.0)).unwrap().abs() < 1e-9);
    }

    #[test]
    fn doubled_rate_is_plus_hundred_percent() {
        let bd = bd_rate(&curve(1.0), &curve(2.0)).unwrap();
        assert!((bd - 100.0).abs() < 1e-9, "got {bd}");
        let bdp = bd_rate_pchip(&curve(1.0), &curve(2.0)).unwrap();
        assert!((bdp - 100.0).abs() < 1e-9, "got {bdp}");
    }

    #[test]
    fn halved_rate_is_minus_fifty_percent() {
        let bd = bd_rate(&curve(1.0), &curve(0.5)).unwrap();
        assert!((bd + 50.0).abs() < 1e-9, "got {bd}");
    }

    #[test]
    fn order_of_input_points_is_irrelevant() {
        let mut shuffled = curve(2.0);
        shuffled.reverse();
        let bd = bd_rate(&curve(1.0), &shuffled).unwrap();
        assert!((bd - 100.0).abs() < 1e-9);
    }

    #[test]
    fn methods_agree_on_linear_log_rate() {
        // log10(bpp) linear in quality: both the cubic fit and the spline
        // reproduce it exactly, shifted curves give an exact rate ratio
        let mk = |shift: f64| -> Vec<RdPoint> {
            (0..5)
                .map(|i| {
                    let q = 30.0 + 2.0 * i as f64;
                    RdPoint { bpp: 10f64.powf(-2.0 + 0.05 * q + shift), quality: q }
                })
                .collect()
        };
        let bd = bd_rate(&mk(0.0), &mk(0.176_091_259_055_68)).unwrap(); // log10(1.5)
        let bdp = bd_rate_pchip(&mk(0.0), &mk(0.176_091_259_055_68)).unwrap();
        assert!((bd - 50.0).abs() < 1e-6, "cubic {bd}");
        assert!((bdp - 50.0).abs() < 1e-6, "pchip {bdp}");
    }

    #[test]
    fn disjoint_quality_ranges_error() {
        let a = curve(1.0);
        let b: Vec<RdPoint> = curve(1.0)
            .into_iter()
            .map(|p| RdPoint { bpp: p.bpp, quality: p.quality + 50.0 })
            .collect();
        assert!(bd_rate(&a, &b).is_err());
    }

    #[test]
    fn degenerate_curves_error() {
        let mut dup = curve(1.0);
        dup[1].quality = dup[0].quality;
        assert!(bd_rate(&curve(1.0), &dup).is_err());
        assert!(bd_rate(&curve(1.0), &curve(1.0)[..3]).is_err());
        let neg = vec![
            RdPoint { bpp: -0.1, quality: 30.0 },
            RdPoint { bpp: 0.2, quality: 31.0 },
            RdPoint { bpp: 0.3, quality: 32.0 },
            RdPoint { bpp: 0.4, quality: 33.0 },
        ];
        assert!(bd_rate(&curve(1.0), &neg).is_err());
    }

    #[test]
    fn pchip_works_from_two_points() {
        let short = |s: f64| {
            vec![
                RdPoint { bpp: 0.2 * s, quality: 32.0 },
                RdPoint { bpp: 0.5 * s, quality: 36.0 },
            ]
        };
        let bd = bd_rate_pchip(&short(1.0), &short(2.0)).unwrap();
        assert!((bd - 100.0).abs() < 1e-9);
    }
}
