//! Discrete distributions and the divergences between them, in bits.

use std::cell::OnceCell;

use super::MetricsError;

#[derive(Debug, Clone)]
pub struct Distribution {
    p: Vec<f64>,
    entropy: OnceCell<f64>,
}

impl PartialEq for Distribution {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p
    }
}

impl Distribution {
    /// Checks nonnegativity and that the mass is 1 within 1e-9.
    pub fn new(p: Vec<f64>) -> Result<Self, MetricsError> {
        if p.is_empty() {
            return Err(MetricsError::InvalidDistribution("empty support".into()));
        }
        if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MetricsError::InvalidDistribution(format!("entry {v} is not a probability")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidDistribution(format!("mass {total} is not 1")));
        }
        Ok(Self::new_unchecked(p))
    }

    pub(crate) fn new_unchecked(p: Vec<f64>) -> Self {
        Self { p, entropy: OnceCell::new() }
    }

    pub fn uniform(v: usize) -> Self {
        Self::new_unchecked(vec![1.0 / v as f64; v])
    }

    pub fn one_hot(v: usize, i: usize) -> Self {
        let mut p = vec![0.0; v];
        p[i] = 1.0;
        Self::new_unchecked(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Shannon entropy in bits, 0 log 0 = 0.
    pub fn entropy(&self) -> f64 {
        *self.entropy.get_or_init(|| entropy_bits(&self.p))
    }
}

pub(crate) fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

/// D_KL(P || U) = log2 V - H(P).
pub fn kl_to_uniform(p: &Distribution) -> f64 {
    (p.len() as f64).log2() - p.entropy()
}

/// `(1+x) ln(1+x) + (1-x) ln(1-x)` for x in [-1, 1]. Nonnegative; the
/// series branch avoids cancellation near 0.
fn js_kernel(x: f64) -> f64 {
    let x2 = x * x;
    if x2 < 0.01 {
        // sum over n >= 1 of x^(2n) / (n (2n - 1))
        let mut term = x2;
        let mut sum = 0.0;
        for n in 1..=12 {
            let n = n as f64;
            sum += term / (n * (2.0 * n - 1.0));
            term *= x2;
        }
        sum
    } else {
        let xlx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
        xlx(1.0 + x) + xlx(1.0 - x)
    }
}

/// Jensen-Shannon distance with base-2 logs, so the result lies in [0, 1].
///
/// The divergence is summed as `1/2 sum m f((a-b)/(a+b))` with `m` the
/// midpoint mass, which equals `H(M) - (H(P)+H(Q))/2` but has no negative
/// terms, so close distributions keep full relative precision.
pub fn js_distance(p: &Distribution, q: &Distribution) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different supports");
    let mut jsd = 0.0;
    for (a, b) in p.p.iter().zip(&q.p) {
        let s = a + b;
        if s > 0.0 {
            jsd += 0.5 * s * js_kernel((a - b) / s);
        }
    }
    (0.5 * jsd / std::f64::consts::LN_2).sqrt().min(1.0)
}

/// Ids sorted by descending probability, ties by ascending id.
pub(crate) fn nucleus_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    order
}

/// Truncation with a precomputed [`nucleus_order`].
pub(crate) fn truncate_with_order(p: &Distribution, order: &[usize], mass: f64) -> Distribution {
    if mass >= 1.0 {
        return p.clone();
    }
    let mut kept = 0.0;
    let mut n = 0;
    for &i in order {
        kept += p.p[i];
        n += 1;
        if kept >= mass {
            break;
        }
    }
    let mut out = vec![0.0; p.len()];
    for &i in &order[..n] {
        out[i] = p.p[i] / kept;
    }
    Distribution::new_unchecked(out)
}

/// Keeps the smallest highest-probability prefix with mass >= `mass`
/// (ties by ascending id) and renormalizes. `mass = 1` is the identity.
pub fn nucleus_truncate(p: &Distribution, mass: f64) -> Distribution {
    assert!(mass > 0.0 && mass <= 1.0, "nucleus mass {mass} outside (0, 1]");
    truncate_with_order(p, &nucleus_order(&p.p), mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert!(kl_to_uniform(&Distribution::uniform(17)).abs() < 1e-12);
        assert_eq!(kl_to_uniform(&Distribution::one_hot(4096, 7)), 12.0);
        assert!((kl_to_uniform(&d(&[0.5, 0.25, 0.25, 0.0])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn js_examples() {
        let p = d(&[0.2, 0.3, 0.5]);
        assert_eq!(js_distance(&p, &p), 0.0);
        assert_eq!(js_distance(&Distribution::one_hot(3, 0), &Distribution::one_hot(3, 2)), 1.0);
        let h = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        assert!((h - 0.811278).abs() < 1e-6);
        let v = js_distance(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]));
        assert!((v - (h - 0.5).sqrt()).abs() < 1e-12);
        assert!((v - 0.557923).abs() < 1e-6);
    }

    #[test]
    fn nucleus_examples() {
        let p = d(&[0.5, 0.3, 0.2]);
        assert_eq!(nucleus_truncate(&p, 1.0), p);
        let t = nucleus_truncate(&p, 0.6);
        assert!((t.probs()[0] - 0.625).abs() < 1e-15 && (t.probs()[1] - 0.375).abs() < 1e-15);
        assert_eq!(t.probs()[2], 0.0);
        assert_eq!(nucleus_truncate(&Distribution::uniform(4), 0.5).probs(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn rejects_invalid() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![]).is_err());
    }

    fn dist(n: usize) -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 0.0).then(|| Distribution::new_unchecked(w.iter().map(|x| x / s).collect()))
        })
    }

    proptest! {
        #[test]
        fn js_symmetric_bounded(p in dist(12), q in dist(12)) {
            let a = js_distance(&p, &q);
            prop_assert_eq!(a.to_bits(), js_distance(&q, &p).to_bits());
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn nucleus_keeps_ratios(p in dist(9), mass in 0.01f64..1.0) {
            let t = nucleus_truncate(&p, mass);
            prop_assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let kept: Vec<usize> = (0..9).filter(|&i| t.probs()[i] > 0.0).collect();
            let k0 = kept[0];
            for &i in &kept {
                let r = t.probs()[i] / t.probs()[k0];
                prop_assert!((r - p.probs()[i] / p.probs()[k0]).abs() < 1e-12 * r.max(1.0));
            }
            let kept_mass: f64 = kept.iter().map(|&i| p.probs()[i]).sum();
            prop_assert!(kept_mass >= mass - 1e-12);
        }
    }
}
