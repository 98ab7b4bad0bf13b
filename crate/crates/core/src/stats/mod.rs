//! Survival curves, group comparisons and discrimination metrics.

mod compare;
mod concordance;
mod survival;

use serde::{Deserialize, Serialize};

pub use compare::{logistic_separability, mann_whitney_u, students_t, LogisticTest, SEPARATION_P_CAP};
pub use concordance::{concordance_index, concordance_index_raw};
pub use survival::{administrative_censor, kaplan_meier, log_rank, KmCurve};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_name: String,
    pub statistic: f64,
    pub p_value: f64,
}

impl TestResult {
    pub(crate) fn new(test_name: &str, statistic: f64, p_value: f64) -> Self {
        TestResult {
            test_name: test_name.to_string(),
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
        }
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    if statistic <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).expect("positive df").sf(statistic)
}

/// Two-sided p-value of a Student-t statistic.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    (2.0 * StudentsT::new(0.0, 1.0, df).expect("positive df").sf(t.abs())).min(1.0)
}

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    (2.0 * Normal::standard().sf(z.abs())).min(1.0)
}
