use crate::error::{Error, Result};

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DistVec(Vec<f64>);

impl DistVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Argument("empty distribution".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Numeric("distribution has negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("distribution sums to {total}")));
        }
        Ok(DistVec(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        DistVec(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().map(|&p| xlogx(p)).sum::<f64>()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Temperature softmax `softmax(v / tau)`.
pub fn softmax_t(v: &[f64], tau: f64) -> Result<DistVec> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let m = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= s);
    Ok(DistVec(e))
}

/// `KL(p || q) = sum p (ln p - ln q)`.
pub fn kl_divergence(p: &DistVec, q: &DistVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL between distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.0
        .iter()
        .zip(&q.0)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3)
        let e: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let p = softmax_t(&[1.0, 2.0, 3.0], 1.0).unwrap();
        for (a, b) in p.probs().iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-15);
        }
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in p.probs().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cold_limit_is_one_hot() {
        let p = softmax_t(&[0.3, -1.0, 0.31, 0.0], 1e-6).unwrap();
        assert_eq!(p.argmax(), 2);
        assert!(p.probs()[2] >= 1.0 - 1e-6);
    }

    #[test]
    fn constant_is_uniform() {
        let p = softmax_t(&[4.2; 5], 0.7).unwrap();
        assert!(p.probs().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(softmax_t(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_t(&[1.0], -1.0), Err(Error::Domain(_))));
        assert!(DistVec::new(vec![0.5, 0.6]).is_err());
        assert!(DistVec::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn entropy_values() {
        assert!((DistVec::uniform(8).entropy() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(DistVec::new(vec![0.0, 1.0, 0.0]).unwrap().entropy(), 0.0);
        let h = DistVec::new(vec![0.75, 0.25]).unwrap().entropy();
        assert!((h - 0.5623).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn shift_invariance(v in proptest::collection::vec(-5.0f64..5.0, 1..12),
                            c in -50.0f64..50.0, tau in 0.05f64..2.0) {
            let p = softmax_t(&v, tau).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax_t(&shifted, tau).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let total: f64 = p.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn entropy_bounds(v in proptest::collection::vec(-8.0f64..8.0, 2..16)) {
            let p = softmax_t(&v, 1.0).unwrap();
            let h = p.entropy();
            prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
        }
    }
}
