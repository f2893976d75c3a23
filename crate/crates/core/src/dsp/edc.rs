use serde::{Deserialize, Serialize};

/// Floor applied before taking logs of decay curves, in dB.
pub const EDC_FLOOR_DB: f64 = -200.0;

pub(crate) const EDC_FLOOR_LINEAR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdcScale {
    Linear,
    Db,
}

/// Schroeder backward integration `ε(t) = Σ_{τ ≥ t} x²(τ)`.
pub fn schroeder_edc(x: &[f64], scale: EdcScale) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(x).rev() {
        acc += v * v;
        *o = acc;
    }
    if scale == EdcScale::Db {
        for v in &mut out {
            *v = to_db(*v);
        }
    }
    out
}

pub(crate) fn to_db(v: f64) -> f64 {
    10.0 * v.max(EDC_FLOOR_LINEAR).log10()
}

/// Energy decay curves of a signal for each band of a filter bank.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyDecayCurve {
    pub bands_hz: Vec<f64>,
    pub scale: EdcScale,
    /// `[band][sample]`
    pub values: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        assert_eq!(schroeder_edc(&[1.0, 0.0, 0.0], EdcScale::Linear), vec![1.0, 0.0, 0.0]);
        assert_eq!(schroeder_edc(&[1.0, 1.0], EdcScale::Linear), vec![2.0, 1.0]);
        let db = schroeder_edc(&[1.0, 0.0], EdcScale::Db);
        assert_eq!(db, vec![0.0, EDC_FLOOR_DB]);
    }

    #[test]
    fn matches_naive_double_loop() {
        let x: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1009) as f64 / 504.5 - 1.0).collect();
        let fast = schroeder_edc(&x, EdcScale::Linear);
        for t in 0..x.len() {
            let mut naive = 0.0;
            for tau in (t..x.len()).rev() {
                naive += x[tau] * x[tau];
            }
            assert_eq!(fast[t], naive);
        }
    }

    proptest! {
        #[test]
        fn non_increasing_and_total_energy(x in proptest::collection::vec(-10.0f64..10.0, 1..300)) {
            let e = schroeder_edc(&x, EdcScale::Linear);
            for w in e.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            let total: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((e[0] - total).abs() <= 1e-12 * total.max(1e-300));
            let d = schroeder_edc(&x, EdcScale::Db);
            for w in d.windows(2) {
                prop_assert!(w[1] <= w[0] || w[1] == EDC_FLOOR_DB);
            }
        }
    }
}
