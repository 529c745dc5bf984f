//! Central finite-difference check of every trainable parameter.
//!
//! The objective is first evaluated with a recording graph. Perturbed
//! evaluations replay the recorded discrete decisions (code indices, noise
//! draws, stop-gradient values), so the finite difference probes the same
//! smooth surrogate that the analytic gradient differentiates.

use std::sync::Arc;

use crate::autodiff::Graph;
use crate::losses::{LossError, Objective};
use crate::model::ModelState;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat element index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks all parameters of non-frozen modules.
pub fn gradcheck<F>(
    m: &ModelState,
    step: f64,
    floor: f64,
    build: F,
) -> Result<GradcheckReport, LossError>
where
    F: Fn(&mut Graph, &ModelState) -> Result<Objective, LossError>,
{
    let mut g = Graph::recording();
    let obj = build(&mut g, m)?;
    let analytic = g.backward(obj.total)?.params();
    let trace = Arc::new(g.into_trace().expect("recording graph"));

    let eval = |state: &ModelState| -> Result<f64, LossError> {
        let mut g = Graph::replaying(trace.clone());
        let obj = build(&mut g, state)?;
        Ok(g.scalar(obj.total))
    };

    let mut work = m.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let names: Vec<String> = m
        .params()
        .keys()
        .filter(|n| m.is_trainable_param(n))
        .cloned()
        .collect();
    for name in names {
        let len = m.param(&name)?.len();
        for i in 0..len {
            let orig = m.param(&name)?.as_slice().expect("standard layout")[i];
            let set = |w: &mut ModelState, v: f64| -> Result<(), LossError> {
                w.param_mut(&name)?.as_slice_mut().expect("standard layout")[i] = v;
                Ok(())
            };
            set(&mut work, orig + step)?;
            let plus = eval(&work)?;
            set(&mut work, orig - step)?;
            let minus = eval(&work)?;
            set(&mut work, orig)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic
                .get(&name)
                .map_or(0.0, |t| t.as_slice().expect("standard layout")[i]);
            let err = rel_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{vocoder_train_loss, Batch, Part};
    use crate::model::{ModelConfig, ModuleKind};
    use ndarray::Array2;

    #[test]
    fn vocoder_loss_passes_on_small_model() {
        let mut m = ModelState::new(ModelConfig {
            hidden: 6,
            speaker_dim: 2,
            n_speakers: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        m.train_only(&[ModuleKind::Vocoder]);
        let y = Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 + 0.3 * j as f64).sin());
        let o = Array2::from_shape_fn((3, 4), |(i, j)| 0.1 * (i * 4 + j) as f64 - 0.55);
        let b = Batch::new(&[Part {
            x: None,
            y: &y,
            o: Some(&o),
            speaker: Some(1),
        }])
        .unwrap();
        let r = gradcheck(&m, DEFAULT_STEP, DEFAULT_FLOOR, |g, m| {
            vocoder_train_loss(g, m, &b)
        })
        .unwrap();
        assert_eq!(r.checked, 8 * 6 + 6 + 6 * 4 + 4 + 2 * 2 + 2 * 6);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0, 1e-6), 0.0);
        assert!((rel_error(1.0, 1.0001, 1e-6) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!((rel_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
