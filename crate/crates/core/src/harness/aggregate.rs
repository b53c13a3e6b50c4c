//! Mean and standard error across folds and repetitions.

use serde::{Deserialize, Serialize};

/// Mean with its standard error; undefined values are excluded and counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    /// Number of defined values that entered the mean.
    pub n: usize,
    /// Number of undefined values left out.
    pub excluded: usize,
}

/// Streaming mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }
}

/// Sample standard deviation over √n; zero for a single value.
pub fn aggregate(values: &[Option<f64>]) -> Aggregate {
    let mut w = Welford::default();
    for v in values.iter().flatten() {
        w.push(*v);
    }
    let excluded = values.len() - w.n;
    if w.n == 0 {
        return Aggregate {
            mean: None,
            se: None,
            n: 0,
            excluded,
        };
    }
    let se = if w.n == 1 {
        0.0
    } else {
        let var = w.m2 / (w.n - 1) as f64;
        (var / w.n as f64).sqrt()
    };
    Aggregate {
        mean: Some(w.mean),
        se: Some(se),
        n: w.n,
        excluded,
    }
}

/// Averages repetitions within each fold, then aggregates the fold means.
pub fn aggregate_nested(per_fold: &[Vec<Option<f64>>]) -> Aggregate {
    let fold_means: Vec<Option<f64>> = per_fold.iter().map(|reps| aggregate(reps).mean).collect();
    aggregate(&fold_means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        let a = aggregate(&[Some(1.0); 3]);
        assert_eq!((a.mean, a.se), (Some(1.0), Some(0.0)));
        let a = aggregate(&[Some(0.0), Some(1.0)]);
        assert_eq!((a.mean, a.se), (Some(0.5), Some(0.5)));
        let a = aggregate(&[Some(0.8)]);
        assert_eq!((a.mean, a.se), (Some(0.8), Some(0.0)));
    }

    #[test]
    fn undefined_values_are_excluded() {
        let a = aggregate(&[None, Some(0.4), None]);
        assert_eq!((a.mean, a.n, a.excluded), (Some(0.4), 1, 2));
        let a = aggregate(&[None]);
        assert_eq!((a.mean, a.se, a.excluded), (None, None, 1));
    }

    #[test]
    fn nested_mean_weights_folds_equally() {
        let a = aggregate_nested(&[vec![Some(0.0), Some(1.0)], vec![Some(1.0)]]);
        assert_eq!(a.mean, Some(0.75));
        assert_eq!(a.n, 2);
    }

    proptest! {
        #[test]
        fn identical_values_have_zero_error(v in -1.0f64..1.0, n in 1usize..40) {
            let a = aggregate(&vec![Some(v); n]);
            prop_assert_eq!(a.mean, Some(v));
            prop_assert_eq!(a.se, Some(0.0));
        }

        #[test]
        fn matches_two_pass_formula(xs in proptest::collection::vec(-1.0f64..1.0, 2..30)) {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let a = aggregate(&xs.iter().copied().map(Some).collect::<Vec<_>>());
            prop_assert!((a.mean.unwrap() - mean).abs() < 1e-12);
            prop_assert!((a.se.unwrap() - (var / n).sqrt()).abs() < 1e-12);
        }
    }
}
