//! Parameter-space extrapolation away from a memorization model, momentum
//! ensembling of successive forget models, task-vector negation and the
//! normalized-direction analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, ParamStore};

pub const DEFAULT_ALPHA: f64 = 4.0;
pub const DEFAULT_ETA: f64 = 0.675;
pub const ALPHA_GRID: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
pub const ETA_GRID: [f64; 5] = [0.5, 0.6, 0.675, 0.8, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationConfig {
    pub alpha: f64,
    pub eta: f64,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, eta: DEFAULT_ETA }
    }
}

impl ExtrapolationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// `θ_ref + α·(θ_ref − θ_mem)`, i.e. `(1+α)θ_ref − αθ_mem`.
pub fn mox_extrapolate(theta_ref: &ParamStore, theta_mem: &ParamStore, alpha: f64) -> Result<ParamStore> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::arg(format!("alpha must be non-negative, got {alpha}")));
    }
    theta_ref.zip_map(theta_mem, |r, m| r + alpha * (r - m))
}

/// `η·θ_cur + (1−η)·θ_prev`; with no history the current model is returned.
pub fn momentum_update(theta_cur: &ParamStore, theta_prev: Option<&ParamStore>, eta: f64) -> Result<ParamStore> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::arg(format!("eta must lie in (0, 1], got {eta}")));
    }
    match theta_prev {
        None => Ok(theta_cur.clone()),
        Some(prev) if eta == 1.0 => {
            theta_cur.check_congruent(prev)?;
            Ok(theta_cur.clone())
        }
        Some(prev) => theta_cur.zip_map(prev, |c, p| if c == p { c } else { p + eta * (c - p) }),
    }
}

/// A task-vector unlearned model together with where its direction came from.
#[derive(Clone, Debug)]
pub struct TaskVectorModel {
    pub theta: ParamStore,
    pub alpha: f64,
    pub provenance: &'static str,
}

/// Negates the task vector of a model fine-tuned on the forget set alone.
/// Same arithmetic as [`mox_extrapolate`]; only the source model differs.
pub fn task_vector_unlearn(theta_ref: &ParamStore, theta_ft_on_forget: &ParamStore, alpha: f64) -> Result<TaskVectorModel> {
    Ok(TaskVectorModel {
        theta: mox_extrapolate(theta_ref, theta_ft_on_forget, alpha)?,
        alpha,
        provenance: "ce-finetune-on-forget",
    })
}

/// `(θ − θ_ref) / ‖θ − θ_ref‖₂` over the flattened parameters.
pub fn direction_delta(theta: &ParamStore, theta_ref: &ParamStore) -> Result<ParamStore> {
    let diff = theta.zip_map(theta_ref, |a, b| a - b)?;
    let n = norm(&diff);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateDirection(format!("difference norm is {n}")));
    }
    Ok(diff.map(|x| x / n))
}

/// Inner product of two unit directions, clamped into `[−1, 1]`.
pub fn direction_cosine(d1: &ParamStore, d2: &ParamStore) -> Result<f64> {
    Ok(dot(d1, d2)?.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::axpy;
    use proptest::prelude::*;

    fn store(v: &[f64]) -> ParamStore {
        ParamStore::from_vec("w", v.to_vec())
    }

    #[test]
    fn arithmetic_examples() {
        let r = store(&[0.0, 1.0]);
        let m = store(&[1.0, 0.0]);
        assert_eq!(mox_extrapolate(&r, &m, 2.0).unwrap().flat(), vec![-2.0, 3.0]);
        assert_eq!(mox_extrapolate(&r, &m, 0.0).unwrap(), r);
        assert_eq!(mox_extrapolate(&r, &r, 4.0).unwrap(), r);
        let tv = task_vector_unlearn(&r, &m, 1.0).unwrap();
        assert_eq!(tv.theta.flat(), vec![-1.0, 2.0]);
        assert_eq!(task_vector_unlearn(&r, &r, 3.0).unwrap().theta, r);
        let bad = ParamStore::from_vec("w", vec![1.0]);
        assert!(matches!(mox_extrapolate(&r, &bad, 1.0), Err(Error::StructuralMismatch(_))));
    }

    #[test]
    fn momentum_examples() {
        let cur = store(&[1.0]);
        let prev = store(&[0.0]);
        assert_eq!(momentum_update(&cur, Some(&prev), 0.675).unwrap().flat(), vec![0.675]);
        assert_eq!(momentum_update(&cur, Some(&prev), 1.0).unwrap(), cur);
        assert_eq!(momentum_update(&cur, Some(&cur), 0.3).unwrap(), cur);
        assert_eq!(momentum_update(&cur, None, 0.3).unwrap(), cur);
        assert!(momentum_update(&cur, Some(&prev), 0.0).is_err());
        assert!(momentum_update(&cur, Some(&prev), 1.5).is_err());
    }

    #[test]
    fn direction_examples() {
        let d = direction_delta(&store(&[3.0, 4.0]), &store(&[0.0, 0.0])).unwrap();
        assert_eq!(d.flat(), vec![0.6, 0.8]);
        assert!(matches!(direction_delta(&d, &d), Err(Error::DegenerateDirection(_))));
        assert!((direction_cosine(&d, &d).unwrap() - 1.0).abs() < 1e-15);
        assert!((direction_cosine(&d, &d.map(|x| -x)).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ExtrapolationConfig::default().validate().is_ok());
        assert!(ExtrapolationConfig { alpha: 0.0, eta: 0.5 }.validate().is_err());
        assert!(ExtrapolationConfig { alpha: 1.0, eta: 0.0 }.validate().is_err());
    }

    fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-3.0..3.0f64, n), prop::collection::vec(-3.0..3.0f64, n))
    }

    proptest! {
        #[test]
        fn antipodal((r, m) in pair(12), alpha in 0.01..10.0f64) {
            prop_assume!(r != m);
            let (r, m) = (store(&r), store(&m));
            let f = mox_extrapolate(&r, &m, alpha).unwrap();
            let c = direction_cosine(&direction_delta(&f, &r).unwrap(), &direction_delta(&m, &r).unwrap()).unwrap();
            prop_assert!((c + 1.0).abs() < 1e-10);
        }

        #[test]
        fn momentum_is_convex((c, p) in pair(12), eta in 0.01..1.0f64) {
            let out = momentum_update(&store(&c), Some(&store(&p)), eta).unwrap();
            for ((o, a), b) in out.values().zip(&c).zip(&p) {
                prop_assert!(o >= a.min(*b) && o <= a.max(*b));
            }
        }

        #[test]
        fn inputs_unmodified((r, m) in pair(6), alpha in 0.0..5.0f64) {
            let (rs, ms) = (store(&r), store(&m));
            let _ = mox_extrapolate(&rs, &ms, alpha).unwrap();
            prop_assert_eq!(rs.flat(), r);
            prop_assert_eq!(ms.flat(), m);
        }
    }

    #[test]
    fn alpha_linearity_on_dyadic_grid() {
        // On dyadic values every intermediate is exactly representable.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let r: Vec<f64> = (0..8).map(|_| rng.gen_range(-512..512) as f64 / 128.0).collect();
            let m: Vec<f64> = (0..8).map(|_| rng.gen_range(-512..512) as f64 / 128.0).collect();
            let a1 = rng.gen_range(0..16) as f64 / 4.0;
            let a2 = rng.gen_range(0..16) as f64 / 4.0;
            let (r, m) = (store(&r), store(&m));
            let whole = mox_extrapolate(&r, &m, a1 + a2).unwrap();
            let sum = axpy(1.0, &mox_extrapolate(&r, &m, a1).unwrap(), 1.0, &mox_extrapolate(&r, &m, a2).unwrap()).unwrap();
            let composed = axpy(1.0, &sum, -1.0, &r).unwrap();
            assert_eq!(whole, composed);
        }
    }
}
