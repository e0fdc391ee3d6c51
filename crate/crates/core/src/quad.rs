//! Composite Gauss-Legendre rules with power-law endpoint substitutions.
//!
//! Algebraic endpoint singularities `(x - a)^(-alpha)` with `alpha < 1` become
//! smooth under `x = a + (b - a) u^m` for `m` large enough, after which plain
//! Gauss-Legendre converges quickly. Keep `m` moderate (4 or so) when the
//! singular endpoint is far from zero, or `u^m` underflows against `a`.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

#[derive(Debug, Clone)]
pub struct Rule {
    pairs: Vec<(f64, f64)>,
}

impl Rule {
    pub fn new(degree: usize) -> Self {
        let gl = GaussLegendre::new(NonZeroUsize::new(degree.max(1)).expect("degree >= 1"));
        Self { pairs: gl.as_node_weight_pairs().to_vec() }
    }

    pub fn degree(&self) -> usize {
        self.pairs.len()
    }

    /// Nodes and weights mapped to `[0, 1]`.
    pub fn unit_nodes(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect()
    }

    /// Plain rule on `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let (h, c) = (0.5 * (b - a), 0.5 * (b + a));
        h * self.pairs.iter().map(|&(x, w)| w * f(c + h * x)).sum::<f64>()
    }

    /// `panels` equal panels on `[a, b]`.
    pub fn composite(&self, a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels).map(|i| self.integrate(a + i as f64 * h, a + (i + 1) as f64 * h, &mut f)).sum()
    }

    /// Integral on `[a, b]` tolerating an integrable power singularity at `a`.
    pub fn singular_left(&self, a: f64, b: f64, m: i32, mut f: impl FnMut(f64) -> f64) -> f64 {
        let len = b - a;
        let mf = m as f64;
        self.integrate(0.0, 1.0, |u| {
            let um1 = u.powi(m - 1);
            f(a + len * um1 * u) * mf * um1 * len
        })
    }

    /// Integral on `[a, b]` tolerating integrable power singularities at both ends.
    pub fn singular_both(&self, a: f64, b: f64, m: i32, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mid = 0.5 * (a + b);
        let left = self.singular_left(a, mid, m, &mut f);
        let right = self.singular_left(b, mid, m, &mut f);
        left - right
    }

    /// Integral on `[c, inf)` for algebraically decaying integrands, via `x = c / u`.
    pub fn tail(&self, c: f64, m: i32, mut f: impl FnMut(f64) -> f64) -> f64 {
        assert!(c > 0.0, "tail start must be positive");
        self.singular_left(0.0, 1.0, m, |u| if u == 0.0 { 0.0 } else { f(c / u) * c / (u * u) })
    }

    /// Sum over consecutive breakpoints, each segment allowed endpoint singularities.
    pub fn segments(&self, points: &[f64], m: i32, mut f: impl FnMut(f64) -> f64) -> f64 {
        points.windows(2).map(|w| self.singular_both(w[0], w[1], m, &mut f)).sum()
    }
}

/// Geometric breakpoints `lo = p_0 < ... < p_k = hi` with ratio at most `ratio`.
pub fn geometric_points(lo: f64, hi: f64, ratio: f64) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && ratio > 1.0);
    let k = ((hi / lo).ln() / ratio.ln()).ceil().max(1.0) as usize;
    (0..=k).map(|i| lo * (hi / lo).powf(i as f64 / k as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_exactness() {
        let r = Rule::new(5);
        assert_relative_eq!(r.integrate(-1.0, 2.0, |x| x.powi(9) - x), 102.3 - 1.5, max_relative = 1e-13);
    }

    #[test]
    fn endpoint_singularities() {
        let r = Rule::new(40);
        // integral of x^-0.75 on (0, 1) is 4
        assert_relative_eq!(r.singular_left(0.0, 1.0, 4, |x| x.powf(-0.75)), 4.0, max_relative = 1e-10);
        // |1-x|^-0.75 on (0, 2) is 8
        let v = r.segments(&[0.0, 1.0, 2.0], 4, |x| (1.0 - x).abs().powf(-0.75));
        // away from zero the endpoint ulp limits accuracy
        assert_relative_eq!(v, 8.0, max_relative = 1e-6);
    }

    #[test]
    fn algebraic_tail() {
        let r = Rule::new(40);
        // integral of x^-1.5 on (1, inf) is 2
        assert_relative_eq!(r.tail(1.0, 6, |x| x.powf(-1.5)), 2.0, max_relative = 1e-10);
    }
}
