//! Vector-level numerics: softmax, KL divergence, layer norm, GELU.

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the encoders.
pub const LN_EPS: f64 = 1e-6;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("{what}: empty vector")));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{what} input ({x})")));
    }
    Ok(())
}

/// Softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "softmax")?;
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v, "log_softmax")?;
    let mut out = vec![0.0; v.len()];
    log_softmax_into(v, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn log_softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

/// `KL(p ‖ q) = Σ p_j ln(p_j / q_j)` for two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence: lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_finite(p, "kl_divergence p")?;
    check_finite(q, "kl_divergence q")?;
    for (name, v) in [("p", p), ("q", q)] {
        if let Some(x) = v.iter().find(|&&x| x <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence: {name} has non-positive entry {x}"
            )));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "kl_divergence: {name} sums to {s}"
            )));
        }
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| a * (a / b).ln()).sum())
}

/// `KL(softmax(s) ‖ softmax(t))` evaluated through log-softmax. Writes
/// `softmax(s)` into `p` and `log softmax(s) − log softmax(t)` into `ratio`
/// so the caller can reuse them for the adjoint.
pub(crate) fn kl_logits_into(s: &[f64], t: &[f64], p: &mut [f64], ratio: &mut [f64]) -> f64 {
    let mut lt = vec![0.0; t.len()];
    log_softmax_into(s, ratio);
    log_softmax_into(t, &mut lt);
    let mut kl = 0.0;
    for j in 0..s.len() {
        p[j] = ratio[j].exp();
        ratio[j] -= lt[j];
        kl += p[j] * ratio[j];
    }
    kl
}

/// `gamma ⊙ (x − mean) / sqrt(var + eps) + beta` with the population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer_norm needs at least 2 features, got {}",
            x.len()
        )));
    }
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm: x {} gamma {} beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("layer_norm eps {eps}")));
    }
    check_finite(x, "layer_norm")?;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    layer_norm_into(x, gamma, beta, eps, &mut out, &mut xhat);
    Ok(out)
}

/// Returns `1/sqrt(var + eps)`. When the variance and eps are both zero the
/// normalized values are defined as zero.
pub(crate) fn layer_norm_into(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var + eps;
    let inv_std = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    for j in 0..x.len() {
        xhat[j] = (x[j] - mean) * inv_std;
        out[j] = gamma[j] * xhat[j] + beta[j];
    }
    inv_std
}

/// Exact GELU: `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn softmax_uniform_and_closed_form() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[1.0, 0.0]).unwrap();
        assert!((p[0] - E / (E + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (E + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            softmax(&[0.0, f64::NEG_INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(softmax(&[f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kl_examples() {
        let p = [0.3, 0.2, 0.5];
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);

        let a = E / (E + 1.0);
        let b = 1.0 / (E + 1.0);
        let kl = kl_divergence(&[a, b], &[b, a]).unwrap();
        assert!((kl - (E - 1.0) / (E + 1.0)).abs() < 1e-14);
        assert!((kl - 0.46212).abs() < 1e-5);

        let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - hand).abs() < 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_errors() {
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.5, 0.6], &[0.5, 0.5]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        assert_eq!(layer_norm(&ones, &ones, &zeros, LN_EPS).unwrap(), vec![0.0; 3]);
        let out = layer_norm(&[0.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
        let out = layer_norm(&[0.0, 2.0], &[2.0, 2.0], &[3.0, 3.0], 0.0).unwrap();
        assert_eq!(out, vec![1.0, 5.0]);
        assert!(matches!(
            layer_norm(&[1.0], &[1.0], &[0.0], LN_EPS),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        assert!((gelu(-1.0) + 0.158_655_253_931_457).abs() < 1e-14);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..64),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
