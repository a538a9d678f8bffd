//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ForwardHooks, ModelState, ViTConfig};

/// Gradients smaller than this are compared on an absolute scale. Coordinates
/// whose true derivative is exactly zero (for example key biases, to which
/// softmax is shift invariant) would otherwise divide roundoff by roundoff.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// The coordinate with the largest relative error; `None` when there
    /// were no parameters.
    pub worst: Option<Coordinate>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.coordinates == 0
    }
}

/// Compares tape gradients of `loss` against `(f(θ+eps) − f(θ−eps)) / 2eps`
/// for every scalar coordinate of every parameter in `params`.
///
/// `loss` must record a deterministic scalar on the tape it is given. The
/// parameter values are restored bit-exactly afterwards; gradients in
/// `params` hold the analytic result on return.
pub fn finite_diff_check<F>(params: &mut ParamStore, eps: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("finite difference eps must be positive, got {eps}")));
    }
    if params.is_empty() {
        return Ok(GradCheckReport::default());
    }

    params.zero_grad();
    let mut tape = Tape::new();
    let l = loss(&mut tape, params)?;
    tape.backward(l)?.accumulate_into(params)?;

    let mut eval = |store: &ParamStore, what: &str| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, store).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("loss at {what}: {msg}")),
            other => other,
        })?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = (0..params.len()).map(crate::autodiff::ParamId).collect();
    for id in ids {
        for i in 0..params.get(id).value.numel() {
            let original = params.get(id).value.data()[i];
            let name = params.get(id).name.clone();

            params.get_mut(id).value.data_mut()[i] = original + eps;
            let plus = eval(params, &format!("{name}[{i}] + eps"))?;
            params.get_mut(id).value.data_mut()[i] = original - eps;
            let minus = eval(params, &format!("{name}[{i}] - eps"))?;
            params.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params.get(id).grad.data()[i];
            let rel = relative_error(analytic, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(Coordinate {
                    param: name,
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Outcome of a whole-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Selected head per block at the unperturbed parameters.
    pub selected: Vec<usize>,
    /// False if any perturbed evaluation selected a different head, in which
    /// case the finite difference straddles a selection boundary.
    pub selection_stable: bool,
    /// Smallest gap between the top two head norms over all blocks and all
    /// evaluations; infinite when no residual selection happens.
    pub min_margin: f64,
}

impl ModelGradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.report.max_rel_error < tolerance && self.selection_stable
    }
}

/// Checks the cross-entropy gradient of a freshly initialized model on one
/// random image and label drawn from `seed`.
pub fn check_model(cfg: &ViTConfig, seed: u64, eps: f64) -> Result<ModelGradCheck> {
    let model = ModelState::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9c);
    let side = cfg.image_size;
    let pixels = (0..side * side * cfg.channels).map(|_| rng.gen::<f64>()).collect();
    let image = Tensor::new(vec![side, side, cfg.channels], pixels)?;
    let label = rng.gen_range(0..cfg.num_classes);

    let mut selections: Vec<Vec<usize>> = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut params = model.params.clone();
    let report = finite_diff_check(&mut params, eps, |tape, store| {
        let (logits, traces) = model.forward_on_tape_with(tape, store, &image, ForwardHooks::default())?;
        selections.push(traces.iter().map(|t| t.selected).collect());
        for m in traces.iter().filter_map(|t| t.margin()) {
            min_margin = min_margin.min(m);
        }
        tape.cross_entropy(logits, label)
    })?;
    let selected = selections.first().cloned().unwrap_or_default();
    let selection_stable = selections.iter().all(|s| *s == selected);
    Ok(ModelGradCheck {
        report,
        selected,
        selection_stable,
        min_margin,
    })
}
