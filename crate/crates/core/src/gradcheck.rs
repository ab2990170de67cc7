//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::Result;
use crate::net::{EpisodeInput, Trfs};
use crate::nn::{named_leaves, ParamMap};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Element-wise error metric: `|analytic − numeric| / max(1, |analytic|)`.
///
/// Returns `None` when both magnitudes are below 1e-12.
pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    if analytic.abs() < 1e-12 && numeric.abs() < 1e-12 {
        return None;
    }
    Some((analytic - numeric).abs() / analytic.abs().max(1.0))
}

/// Compares an analytic gradient against central differences of `eval`.
///
/// `eval(i, v)` must return the scalar objective with element `i` of the
/// input replaced by `v`.
pub fn compare_with_central_differences(
    x: &[f64],
    analytic: &[f64],
    step: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, (&xi, &ai)) in x.iter().zip(analytic).enumerate() {
        let plus = eval(i, xi + step)?;
        let minus = eval(i, xi - step)?;
        let numeric = (plus - minus) / (2.0 * step);
        if let Some(err) = relative_error(ai, numeric) {
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central-difference estimate with the given step.
///
/// `f` builds a scalar from its argument on the supplied graph.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let root = f(&mut g, xv)?;
    let grads = g.backward(root)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut perturbed = x.data().to_vec();
    compare_with_central_differences(x.data(), analytic.data(), step, |i, v| {
        let saved = perturbed[i];
        perturbed[i] = v;
        let input = Tensor::new_unchecked(x.shape().to_vec(), perturbed.clone());
        perturbed[i] = saved;
        let mut g = Graph::new();
        let xv = g.constant(input);
        let root = f(&mut g, xv)?;
        Ok(g.value(root).item())
    })
}

/// Worst error over the parameters of one group: the leaves sharing a
/// layer path, e.g. `gem.scales.0.blocks.0.attn.wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub params: usize,
    /// Elements actually compared; equals `params` unless probing was capped.
    pub probed: usize,
    pub max_rel_error: f64,
}

fn group_of(leaf: &str) -> &str {
    leaf.rsplit_once('.').map_or(leaf, |(g, _)| g)
}

/// Element indices probed in a leaf of `len` elements: all of them, or
/// `cap` evenly spaced ones.
fn probe_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap > 0 && cap < len => (0..cap).map(|k| k * len / cap).collect(),
        _ => (0..len).collect(),
    }
}

/// Checks the tape gradient of the total episode loss against central
/// differences for every scalar parameter of the network, or for at most
/// `max_probes` elements per leaf.
pub fn check_model(
    model: &Trfs<f64>,
    input: &EpisodeInput<f64>,
    step: f64,
    max_probes: Option<usize>,
) -> Result<Vec<GroupReport>> {
    let (_, grads) = model.loss_and_grad(input)?;
    let analytic = named_leaves(&grads, "");
    let leaves = named_leaves(model.params(), "");

    let loss_with = |leaf: &str, i: usize, v: f64| -> Result<f64> {
        let params = model.params().map_params("", &mut |name, t: &Tensor<f64>| {
            let mut t = t.clone();
            if name == leaf {
                t.data_mut()[i] = v;
            }
            t
        });
        let probe = Trfs::from_parts(model.config().clone(), params, model.backbone().clone());
        Ok(probe.loss_on(input)?.0.total)
    };

    let mut reports: Vec<GroupReport> = Vec::new();
    for ((name, value), (_, grad)) in leaves.iter().zip(&analytic) {
        let indices = probe_indices(value.len(), max_probes);
        let probed = indices.len();
        let errors: Vec<Option<f64>> = indices
            .into_par_iter()
            .map(|i| {
                let x = value.data()[i];
                let numeric = (loss_with(name, i, x + step)? - loss_with(name, i, x - step)?) / (2.0 * step);
                Ok(relative_error(grad.data()[i], numeric))
            })
            .collect::<Result<_>>()?;
        let worst = errors.into_iter().flatten().fold(0.0, f64::max);
        let group = group_of(name);
        match reports.last_mut() {
            Some(r) if r.group == group => {
                r.params += value.len();
                r.probed += probed;
                r.max_rel_error = r.max_rel_error.max(worst);
            }
            _ => reports.push(GroupReport {
                group: group.to_string(),
                params: value.len(),
                probed,
                max_rel_error: worst,
            }),
        }
    }
    Ok(reports)
}
