use serde::{Deserialize, Serialize};

/// Named loss terms of one step. Inactive terms are `None`; `total` is the
/// plain sum of the active ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub s_ce: Option<f64>,
    pub a_ce: Option<f64>,
    pub tf: Option<f64>,
    pub s_mse: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn new(s_ce: Option<f64>, a_ce: Option<f64>, tf: Option<f64>, s_mse: Option<f64>) -> Self {
        let total = [s_ce, a_ce, tf, s_mse].iter().flatten().sum();
        Self {
            s_ce,
            a_ce,
            tf,
            s_mse,
            total,
        }
    }

    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        [("L_s_ce", self.s_ce), ("L_a_ce", self.a_ce), ("L_TF", self.tf), ("L_s_mse", self.s_mse)]
            .into_iter()
            .filter_map(|(n, v)| v.map(|v| (n, v)))
            .collect()
    }

    /// Running mean helper for logging.
    pub fn accumulate(&mut self, other: &LossReport, weight: f64) {
        fn add(a: &mut Option<f64>, b: Option<f64>, w: f64) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b * w);
            }
        }
        add(&mut self.s_ce, other.s_ce, weight);
        add(&mut self.a_ce, other.a_ce, weight);
        add(&mut self.tf, other.tf, weight);
        add(&mut self.s_mse, other.s_mse, weight);
        self.total += other.total * weight;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_active_terms() {
        let r = LossReport::new(Some(0.5), Some(1.25), None, Some(0.125));
        assert_eq!(r.total, 1.875);
        assert_eq!(r.terms().len(), 3);
    }
}
