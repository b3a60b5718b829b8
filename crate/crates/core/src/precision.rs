//! Precision curves from scattered (resource, loss) points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    #[serde(rename = "Resources")]
    pub resources: f64,
    #[serde(rename = "Loss")]
    pub loss: f64,
}

/// Barycenter of the points in one bin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedPoint {
    #[serde(rename = "Resources")]
    pub resources: f64,
    #[serde(rename = "Loss")]
    pub loss: f64,
    #[serde(rename = "Count")]
    pub count: usize,
}

/// Average the points falling in each [kδ, (k+1)δ); empty bins are omitted.
pub fn bin_precision(points: &[PrecisionPoint], delta: f64) -> Result<Vec<BinnedPoint>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::config("delta", "bin width must be positive"));
    }
    let mut bins: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for p in points {
        if !(p.resources >= 0.0 && p.loss >= 0.0) {
            return Err(Error::invalid(format!(
                "precision point ({}, {}) has a negative or undefined entry",
                p.resources, p.loss
            )));
        }
        let k = (p.resources / delta).floor() as i64;
        let e = bins.entry(k).or_insert((0.0, 0.0, 0));
        e.0 += p.resources;
        e.1 += p.loss;
        e.2 += 1;
    }
    Ok(bins
        .into_values()
        .map(|(r, l, n)| BinnedPoint {
            resources: r / n as f64,
            loss: l / n as f64,
            count: n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(resources: f64, loss: f64) -> PrecisionPoint {
        PrecisionPoint { resources, loss }
    }

    #[test]
    fn single_bin_is_the_mean() {
        let b = bin_precision(&[pt(1.0, 2.0), pt(3.0, 4.0)], 10.0).unwrap();
        assert_eq!(b, vec![BinnedPoint { resources: 2.0, loss: 3.0, count: 2 }]);
    }

    #[test]
    fn fine_bins_sort_the_input() {
        let pts = [pt(5.0, 1.0), pt(1.0, 3.0), pt(3.0, 2.0)];
        let b = bin_precision(&pts, 0.5).unwrap();
        let r: Vec<f64> = b.iter().map(|p| p.resources).collect();
        assert_eq!(r, vec![1.0, 3.0, 5.0]);
        assert_eq!(b[0].loss, 3.0);
    }

    #[test]
    fn rejects_bad_width() {
        assert!(bin_precision(&[pt(1.0, 1.0)], 0.0).is_err());
        assert!(bin_precision(&[pt(1.0, 1.0)], -1.0).is_err());
    }

    proptest! {
        #[test]
        fn counts_and_mass_are_preserved(
            pts in proptest::collection::vec((0.0f64..100.0, 0.0f64..5.0), 0..60),
            delta in 0.1f64..30.0,
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(r, l)| pt(r, l)).collect();
            let b = bin_precision(&pts, delta).unwrap();
            prop_assert_eq!(b.iter().map(|p| p.count).sum::<usize>(), pts.len());
            let total: f64 = pts.iter().map(|p| p.loss).sum();
            let binned: f64 = b.iter().map(|p| p.loss * p.count as f64).sum();
            prop_assert!((total - binned).abs() < 1e-9 * (1.0 + total));
            for w in b.windows(2) {
                prop_assert!(w[0].resources < w[1].resources);
            }
        }
    }
}
