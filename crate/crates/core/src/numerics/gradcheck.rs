use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AnchorMode, Graph, Var};
use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub step: f64,
    /// Coordinates checked per tensor; tensors at most this large are
    /// checked exhaustively.
    pub coords_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-4,
            step: 1e-5,
            coords_per_tensor: 48,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamCheckStatus {
    Checked,
    /// Reaches the loss only through a piecewise-constant path.
    NonDifferentiable,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub status: ParamCheckStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `forward` must build the loss on the supplied graph from the supplied
/// store and return the scalar loss node. It is called many times and must
/// be deterministic; any randomness should come from a generator it seeds
/// itself. Straight-through nodes are anchored at the base point so the
/// finite differences see the same hard samples.
pub fn grad_check<F>(
    mut forward: F,
    store: &ParameterStore,
    names: &[&str],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::with_anchors(AnchorMode::Record(Vec::new()));
    let loss = forward(&mut g, store)?;
    let base = g.value(loss).item();
    let grads = g.backward(loss)?;
    let nondiff = g.nondifferentiable_params(loss);
    let anchors = match g.take_anchors() {
        AnchorMode::Record(list) => list,
        _ => unreachable!(),
    };

    let mut eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::with_anchors(AnchorMode::Replay {
            anchors: anchors.clone(),
            cursor: 0,
        });
        let l = forward(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let again = eval(store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss {base} then {again} for identical inputs"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for &name in names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{name} is not part of the loss graph")))?
            .clone();
        let numel = analytic.numel();
        if nondiff.contains(name) && analytic.data().iter().all(|&v| v == 0.0) {
            params.push(ParamCheck {
                name: name.to_string(),
                max_rel_error: 0.0,
                coords_checked: 0,
                status: ParamCheckStatus::NonDifferentiable,
            });
            continue;
        }
        let coords: Vec<usize> = if numel <= cfg.coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = store.get(name)?.data()[c];
            work.get_mut(name)?.data_mut()[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        params.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst,
            coords_checked: coords.len(),
            status: ParamCheckStatus::Checked,
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        pass: max_rel_error < cfg.tolerance,
        params,
        max_rel_error,
        step: cfg.step,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn flags_nondeterminism() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::matrix(1, 2, vec![1.0, 2.0]), true).unwrap();
        let mut calls = 0.0;
        let err = grad_check(
            |g, s| {
                calls += 1.0;
                let w = g.param(s, "w")?;
                let l = g.sum_all(w);
                Ok(g.scale(l, calls))
            },
            &s,
            &["w"],
            &GradCheckConfig::default(),
        );
        assert!(matches!(err, Err(Error::NonDeterministic(_))));
    }
}
