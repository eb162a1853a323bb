//! Robust kernels evaluated on squared residuals.
//!
//! `weight` is the IRLS multiplier: a residual `r` contributes
//! `weight · JᵀJ` and `weight · Jᵀr` to the normal equations, so
//! `weight · r = ½ ∂cost/∂r` wherever the kernel is differentiable.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEval {
    pub cost: f64,
    pub weight: f64,
}

/// Huber kernel: quadratic up to `delta`, linear beyond.
#[inline]
pub fn huber(r_sq: f64, delta: f64) -> KernelEval {
    let r = r_sq.sqrt();
    if r <= delta {
        KernelEval {
            cost: r_sq,
            weight: 1.0,
        }
    } else {
        KernelEval {
            cost: 2.0 * delta * r - delta * delta,
            weight: delta / r,
        }
    }
}

/// Truncated least squares: quadratic up to `tau`, constant `τ²` beyond.
#[inline]
pub fn tls(r_sq: f64, tau: f64) -> KernelEval {
    if r_sq.sqrt() <= tau {
        KernelEval {
            cost: r_sq,
            weight: 1.0,
        }
    } else {
        KernelEval {
            cost: tau * tau,
            weight: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(9.0, 9.0), KernelEval { cost: 9.0, weight: 1.0 });
        assert_eq!(huber(81.0, 9.0), KernelEval { cost: 81.0, weight: 1.0 });
        assert_eq!(huber(324.0, 9.0), KernelEval { cost: 243.0, weight: 0.5 });
    }

    #[test]
    fn tls_examples() {
        let inside = tls(0.005f64.powi(2), 0.01);
        assert!((inside.cost - 2.5e-5).abs() < 1e-18);
        assert_eq!(inside.weight, 1.0);
        let outside = tls(0.02f64.powi(2), 0.01);
        assert!((outside.cost - 1e-4).abs() < 1e-18);
        assert_eq!(outside.weight, 0.0);
    }

    #[test]
    fn tls_sweep_monotone_and_bounded() {
        let tau = 0.01;
        let mut prev = 0.0;
        for i in 0..=3000 {
            let r = 3.0 * tau * i as f64 / 3000.0;
            let k = tls(r * r, tau);
            assert!(k.cost >= prev);
            assert!(k.cost <= tau * tau + 1e-18);
            prev = k.cost;
        }
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let d = 9.0;
        let below = huber((d - 1e-9f64).powi(2), d);
        let above = huber((d + 1e-9f64).powi(2), d);
        assert!((below.cost - above.cost).abs() < 1e-6);
        assert!((below.weight - above.weight).abs() < 1e-9);
    }

    #[test]
    fn tls_weight_jumps_exactly_at_tau() {
        let tau = 0.01;
        assert_eq!(tls(tau * tau, tau).weight, 1.0);
        let just_above = tau * (1.0 + 1e-12);
        assert_eq!(tls(just_above * just_above, tau).weight, 0.0);
        let c0 = tls(tau * tau, tau).cost;
        let c1 = tls(just_above * just_above, tau).cost;
        assert!((c0 - c1).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn weight_is_half_gradient(r in 0.01f64..40.0, delta in 0.5f64..20.0) {
            prop_assume!((r - delta).abs() > 1e-3);
            let h = 1e-6;
            let c = |x: f64| huber(x * x, delta).cost;
            let fd = (c(r + h) - c(r - h)) / (2.0 * h);
            let k = huber(r * r, delta);
            prop_assert!((k.weight * r - 0.5 * fd).abs() < 1e-6 * (1.0 + fd.abs()));
            prop_assert!(k.cost >= 0.0 && (0.0..=1.0).contains(&k.weight));

            let tau = delta * 1e-3;
            let rt = r * 1e-3;
            prop_assume!((rt - tau).abs() > 1e-6);
            let ht = 1e-9;
            let ct = |x: f64| tls(x * x, tau).cost;
            let fdt = (ct(rt + ht) - ct(rt - ht)) / (2.0 * ht);
            let kt = tls(rt * rt, tau);
            prop_assert!((kt.weight * rt - 0.5 * fdt).abs() < 1e-6);
        }
    }
}
