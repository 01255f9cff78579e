//! Rank statistics.

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean of (i+1 ..= j)
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation. `None` when either side has zero rank variance.
///
/// Panics if the lengths differ or are below 2.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len(), "spearman needs equal lengths");
    assert!(xs.len() >= 2, "spearman needs at least two points");
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(spearman(&[1., 2., 3., 4.], &[10., 20., 30., 40.]), Some(1.0));
        assert_eq!(spearman(&[1., 2., 3., 4.], &[4., 3., 2., 1.]), Some(-1.0));
        let r = spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_side_has_no_value() {
        assert_eq!(spearman(&[1., 1., 1.], &[1., 2., 3.]), None);
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone_invariant(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..40)
        ) {
            let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let a = spearman(&xs, &ys);
            let b = spearman(&ys, &xs);
            prop_assert_eq!(a, b);
            // strictly increasing transform of xs
            let tx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            prop_assert_eq!(spearman(&tx, &ys), a);
            if let Some(r) = a {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
