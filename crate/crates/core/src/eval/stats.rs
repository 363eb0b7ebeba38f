use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestStatus {
    Ok,
    /// Every difference is zero.
    ExactTie,
    /// Differences are constant and nonzero.
    ZeroVariance,
}

/// Two-sided paired t-test on `a - b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub status: TTestStatus,
    /// `None` unless `status` is `Ok`.
    pub t: Option<f64>,
    pub p_value: Option<f64>,
}

impl PairedTTest {
    /// The p-value sentinel used in CSV output for an undefined p.
    pub const SENTINEL: &'static str = "NA";

    pub fn p_display(&self) -> String {
        match self.p_value {
            Some(p) => format!("{p:.6e}"),
            None => Self::SENTINEL.to_string(),
        }
    }
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
    let undefined = |status| PairedTTest {
        n,
        mean_diff: mean,
        status,
        t: None,
        p_value: None,
    };
    if d.iter().all(|&v| v == 0.0) {
        return Ok(undefined(TTestStatus::ExactTie));
    }
    if d.iter().all(|&v| v == d[0]) {
        return Ok(undefined(TTestStatus::ZeroVariance));
    }
    let se = (ss / (n - 1) as f64 / n as f64).sqrt();
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        status: TTestStatus::Ok,
        t: Some(t),
        p_value: Some(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_samples_are_an_exact_tie() {
        let a = [0.3, 0.5, 0.9];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.status, TTestStatus::ExactTie);
        assert_eq!(r.p_value, None);
        assert_eq!(r.p_display(), "NA");
    }

    #[test]
    fn constant_shift_has_no_p() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(r.status, TTestStatus::ZeroVariance);
        assert_eq!(r.mean_diff, 1.0);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    /// Student's sleep data (two soporifics, ten patients). Reference
    /// values from R: t = -4.0621, df = 9, p = 0.002833.
    #[test]
    fn sleep_data() {
        let a = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0];
        let b = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4];
        let r = paired_t_test(&a, &b).unwrap();
        assert_abs_diff_eq!(r.t.unwrap(), -4.0621, epsilon = 5e-5);
        assert_abs_diff_eq!(r.p_value.unwrap(), 0.002833, epsilon = 5e-7);
        let s = paired_t_test(&b, &a).unwrap();
        assert_eq!(s.p_value, r.p_value);
    }
}
