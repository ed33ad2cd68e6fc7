//! Pure numeric kernels for every training objective: the staged supervised
//! composition, the mixed-preference objective (preference + quality +
//! generation terms), the masked reconstruction composition, the parameter
//! freeze schedule, and analytic gradients with a central finite-difference
//! checker.
//!
//! Everything here is a pure function of its inputs; no shared state.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// Probability floor applied inside [`cross_entropy`] so degenerate
/// predictions stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function `1 / (1 + e^-z)`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(z)` computed as `softplus(-z)`; never exponentiates large sums.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Per-token log-probabilities of one response under the policy and the
/// reference model. The sequence log-probability is the sum of the entries;
/// the policy/reference log-ratio is the difference of those sums.
///
/// Construction validates the invariants (non-empty, equal length, all
/// entries finite and `<= 0`), so a value of this type is always usable.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTrace {
    policy: Vec<f64>,
    reference: Vec<f64>,
}

impl LogProbTrace {
    pub fn new(policy: Vec<f64>, reference: Vec<f64>) -> Result<Self> {
        if policy.is_empty() || reference.is_empty() {
            return Err(Error::invalid("log-prob trace must be non-empty"));
        }
        if policy.len() != reference.len() {
            return Err(Error::invalid(format!(
                "policy and reference lengths differ: {} vs {}",
                policy.len(),
                reference.len()
            )));
        }
        for (name, seq) in [("policy", &policy), ("reference", &reference)] {
            if let Some(bad) = seq.iter().find(|v| !v.is_finite() || **v > 0.0) {
                return Err(Error::invalid(format!(
                    "{name} log-prob {bad} is not a finite value <= 0"
                )));
            }
        }
        Ok(Self { policy, reference })
    }

    /// Trace where the policy equals the reference (log-ratio zero).
    pub fn identity(token_logps: Vec<f64>) -> Result<Self> {
        Self::new(token_logps.clone(), token_logps)
    }

    pub fn len(&self) -> usize {
        self.policy.len()
    }

    pub fn is_empty(&self) -> bool {
        false // enforced non-empty at construction
    }

    pub fn policy_logps(&self) -> &[f64] {
        &self.policy
    }

    pub fn policy_sum(&self) -> f64 {
        self.policy.iter().sum()
    }

    pub fn ref_sum(&self) -> f64 {
        self.reference.iter().sum()
    }

    /// `log π_θ(y|x) − log π_ref(y|x)`.
    pub fn log_ratio(&self) -> f64 {
        self.policy_sum() - self.ref_sum()
    }
}

/// Weights of the three mixed-preference objective terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MpoWeights {
    pub w_p: f64,
    pub w_q: f64,
    pub w_g: f64,
}

impl MpoWeights {
    pub fn new(w_p: f64, w_q: f64, w_g: f64) -> Result<Self> {
        let w = Self { w_p, w_q, w_g };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_p", self.w_p), ("w_q", self.w_q), ("w_g", self.w_g)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "mpo weight {name}={v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

impl Default for MpoWeights {
    fn default() -> Self {
        Self {
            w_p: 1.0,
            w_q: 1.0,
            w_g: 1.0,
        }
    }
}

/// KL penalty coefficient `beta` and reward shift `delta`.
///
/// `beta = 0` is accepted (the sigmoid argument collapses to a constant);
/// negative or non-finite values are rejected.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MpoHyper {
    pub beta: f64,
    pub delta: f64,
}

impl MpoHyper {
    pub fn new(beta: f64, delta: f64) -> Result<Self> {
        let h = Self { beta, delta };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::invalid(format!(
                "beta={} must be finite and >= 0",
                self.beta
            )));
        }
        if !self.delta.is_finite() {
            return Err(Error::invalid(format!(
                "delta={} must be finite",
                self.delta
            )));
        }
        Ok(())
    }
}

impl Default for MpoHyper {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.0,
        }
    }
}

/// Argument fed to the quality-loss sigmoids: the policy/reference
/// *log*-ratio (default; ratios of long sequences underflow) or the raw
/// probability ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityArg {
    #[default]
    LogRatio,
    Ratio,
}

/// Weights of the staged supervised objective: per-attribute factors plus
/// the self-reflection and final-decision factors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StagedWeights {
    pub alpha_r: f64,
    pub alpha_l: f64,
    pub alpha_t: f64,
    pub lambda_sr: f64,
    pub lambda_fd: f64,
}

impl StagedWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_r", self.alpha_r),
            ("alpha_l", self.alpha_l),
            ("alpha_t", self.alpha_t),
            ("lambda_sr", self.lambda_sr),
            ("lambda_fd", self.lambda_fd),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "staged weight {name}={v} must be finite and non-negative"
                )));
            }
        }
        if all.iter().all(|(_, v)| *v == 0.0) {
            return Err(Error::invalid(
                "staged weights must have at least one strictly positive entry",
            ));
        }
        Ok(())
    }
}

impl Default for StagedWeights {
    fn default() -> Self {
        Self {
            alpha_r: 1.0,
            alpha_l: 1.0,
            alpha_t: 1.0,
            lambda_sr: 1.0,
            lambda_fd: 1.0,
        }
    }
}

/// Loss values of the three attribute probes, in fixed order
/// roundness / length / thickness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeLosses {
    pub roundness: f64,
    pub length: f64,
    pub thickness: f64,
}

/// Dense row-major 2-D grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::invalid("grid rows have unequal lengths"));
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Inputs of the reconstruction objective composition: image, occlusion
/// mask, the two component loss values, and the 2-D weighting factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconLossInputs {
    pub image: Grid2,
    pub occlusion_mask: Grid2,
    pub l3d: f64,
    pub l2d: f64,
    pub lambda_2d: f64,
}

impl ReconLossInputs {
    pub fn validate(&self) -> Result<()> {
        if self.image.shape() != self.occlusion_mask.shape() {
            return Err(Error::invalid(format!(
                "image shape {:?} != mask shape {:?}",
                self.image.shape(),
                self.occlusion_mask.shape()
            )));
        }
        if let Some(bad) = self
            .occlusion_mask
            .values()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::invalid(format!("mask entry {bad} outside [0, 1]")));
        }
        for (name, v) in [
            ("l3d", self.l3d),
            ("l2d", self.l2d),
            ("lambda_2d", self.lambda_2d),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name}={v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// The three vision-language training phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    MlpWarmup,
    VitIncremental,
    FullModel,
}

/// Named parameter groups of the vision-language stack.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Mlp,
    Vit,
    Llm,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ParamGroup::Mlp => "MLP",
            ParamGroup::Vit => "ViT",
            ParamGroup::Llm => "LLM",
        };
        f.write_str(name)
    }
}

// ---------------------------------------------------------------------------
// Preference loss
// ---------------------------------------------------------------------------

/// Preference term on raw log-ratios: `-log σ(β (lr_c - lr_r))`.
pub fn preference_loss_from_ratios(lr_c: f64, lr_r: f64, hyper: &MpoHyper) -> f64 {
    neg_log_sigmoid(hyper.beta * (lr_c - lr_r))
}

/// Gradient of [`preference_loss_from_ratios`] w.r.t. `(lr_c, lr_r)`.
///
/// With `z = β (lr_c - lr_r)` this is `(-β σ(-z), +β σ(-z))`; the two
/// components are always negatives of each other.
pub fn preference_grad_from_ratios(lr_c: f64, lr_r: f64, hyper: &MpoHyper) -> (f64, f64) {
    let z = hyper.beta * (lr_c - lr_r);
    let g = hyper.beta * sigmoid(-z);
    (-g, g)
}

/// Preference loss of a chosen/rejected trace pair.
pub fn preference_loss(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    hyper: &MpoHyper,
) -> Result<f64> {
    hyper.validate()?;
    Ok(preference_loss_from_ratios(
        trace_c.log_ratio(),
        trace_r.log_ratio(),
        hyper,
    ))
}

/// Gradient of [`preference_loss`] w.r.t. the chosen and rejected log-ratios.
pub fn preference_grad(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    hyper: &MpoHyper,
) -> Result<(f64, f64)> {
    hyper.validate()?;
    Ok(preference_grad_from_ratios(
        trace_c.log_ratio(),
        trace_r.log_ratio(),
        hyper,
    ))
}

// ---------------------------------------------------------------------------
// Quality loss
// ---------------------------------------------------------------------------

/// Per-side quality terms plus their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityLoss {
    /// `-log σ(β a_c - δ)` for the chosen response.
    pub l_plus: f64,
    /// `-log σ(-(β a_r - δ))` for the rejected response.
    pub l_minus: f64,
    pub total: f64,
}

fn quality_arg_value(lr: f64, arg: QualityArg) -> f64 {
    match arg {
        QualityArg::LogRatio => lr,
        QualityArg::Ratio => lr.exp(),
    }
}

/// Quality term on raw log-ratios with an explicit argument form.
pub fn quality_loss_from_ratios_with(
    lr_c: f64,
    lr_r: f64,
    hyper: &MpoHyper,
    arg: QualityArg,
) -> QualityLoss {
    let a_c = quality_arg_value(lr_c, arg);
    let a_r = quality_arg_value(lr_r, arg);
    let l_plus = neg_log_sigmoid(hyper.beta * a_c - hyper.delta);
    let l_minus = neg_log_sigmoid(-(hyper.beta * a_r - hyper.delta));
    QualityLoss {
        l_plus,
        l_minus,
        total: l_plus + l_minus,
    }
}

/// Quality term on raw log-ratios in the default log-ratio form.
pub fn quality_loss_from_ratios(lr_c: f64, lr_r: f64, hyper: &MpoHyper) -> QualityLoss {
    quality_loss_from_ratios_with(lr_c, lr_r, hyper, QualityArg::LogRatio)
}

/// Gradient of the quality total w.r.t. `(lr_c, lr_r)`.
pub fn quality_grad_from_ratios_with(
    lr_c: f64,
    lr_r: f64,
    hyper: &MpoHyper,
    arg: QualityArg,
) -> (f64, f64) {
    let a_c = quality_arg_value(lr_c, arg);
    let a_r = quality_arg_value(lr_r, arg);
    // d a / d lr is 1 for the log-ratio form and e^lr for the ratio form.
    let (da_c, da_r) = match arg {
        QualityArg::LogRatio => (1.0, 1.0),
        QualityArg::Ratio => (a_c, a_r),
    };
    let d_plus = -hyper.beta * sigmoid(-(hyper.beta * a_c - hyper.delta)) * da_c;
    let d_minus = hyper.beta * sigmoid(hyper.beta * a_r - hyper.delta) * da_r;
    (d_plus, d_minus)
}

pub fn quality_grad_from_ratios(lr_c: f64, lr_r: f64, hyper: &MpoHyper) -> (f64, f64) {
    quality_grad_from_ratios_with(lr_c, lr_r, hyper, QualityArg::LogRatio)
}

/// Quality loss of a chosen/rejected trace pair with an explicit argument
/// form.
pub fn quality_loss_with(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    hyper: &MpoHyper,
    arg: QualityArg,
) -> Result<QualityLoss> {
    hyper.validate()?;
    Ok(quality_loss_from_ratios_with(
        trace_c.log_ratio(),
        trace_r.log_ratio(),
        hyper,
        arg,
    ))
}

/// Quality loss of a chosen/rejected trace pair (log-ratio form).
pub fn quality_loss(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    hyper: &MpoHyper,
) -> Result<QualityLoss> {
    quality_loss_with(trace_c, trace_r, hyper, QualityArg::LogRatio)
}

/// Gradient of the quality total w.r.t. the chosen and rejected log-ratios.
pub fn quality_grad(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    hyper: &MpoHyper,
) -> Result<(f64, f64)> {
    hyper.validate()?;
    Ok(quality_grad_from_ratios(
        trace_c.log_ratio(),
        trace_r.log_ratio(),
        hyper,
    ))
}

// ---------------------------------------------------------------------------
// Generation loss
// ---------------------------------------------------------------------------

/// Length-normalized negative log-likelihood over raw policy token logps.
pub fn generation_loss_from_logps(policy_logps: &[f64]) -> f64 {
    let n = policy_logps.len() as f64;
    -policy_logps.iter().sum::<f64>() / n
}

/// Generation loss of the chosen trace: `-(Σ policy logps) / |y_c|`.
pub fn generation_loss(trace_c: &LogProbTrace) -> f64 {
    generation_loss_from_logps(trace_c.policy_logps())
}

/// Gradient of [`generation_loss`] w.r.t. each policy token logp: a constant
/// `-1/n` vector.
pub fn generation_grad(trace_c: &LogProbTrace) -> Vec<f64> {
    let n = trace_c.len() as f64;
    vec![-1.0 / n; trace_c.len()]
}

// ---------------------------------------------------------------------------
// Combined objectives
// ---------------------------------------------------------------------------

/// Weighted sum of the preference, quality, and generation terms for one
/// chosen/rejected pair, with an explicit quality argument form.
pub fn mpo_loss_with(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    weights: &MpoWeights,
    hyper: &MpoHyper,
    arg: QualityArg,
) -> Result<f64> {
    weights.validate()?;
    let l_p = preference_loss(trace_c, trace_r, hyper)?;
    let l_q = quality_loss_with(trace_c, trace_r, hyper, arg)?.total;
    let l_g = generation_loss(trace_c);
    Ok(weights.w_p * l_p + weights.w_q * l_q + weights.w_g * l_g)
}

/// Weighted sum of the preference, quality, and generation terms for one
/// chosen/rejected pair. Linear in each weight.
pub fn mpo_loss(
    trace_c: &LogProbTrace,
    trace_r: &LogProbTrace,
    weights: &MpoWeights,
    hyper: &MpoHyper,
) -> Result<f64> {
    mpo_loss_with(trace_c, trace_r, weights, hyper, QualityArg::LogRatio)
}

/// Negative log of the probability assigned to the label class, with the
/// probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy(pred_dist: &[f64], label_index: usize) -> Result<f64> {
    if pred_dist.is_empty() {
        return Err(Error::invalid("probability vector must be non-empty"));
    }
    if let Some(bad) = pred_dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::invalid(format!(
            "probability entry {bad} is not finite and non-negative"
        )));
    }
    let sum: f64 = pred_dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "probabilities sum to {sum}, expected 1 within 1e-9"
        )));
    }
    let p = pred_dist
        .get(label_index)
        .ok_or_else(|| {
            Error::invalid(format!(
                "label index {label_index} out of range for {} classes",
                pred_dist.len()
            ))
        })?
        .max(PROB_FLOOR);
    Ok(-p.ln())
}

/// Staged supervised objective: weighted attribute losses plus weighted
/// self-reflection and final-decision losses.
pub fn staged_supervised_objective(
    attr_losses: &AttributeLosses,
    sr_loss: f64,
    fd_loss: f64,
    weights: &StagedWeights,
) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [
        ("roundness", attr_losses.roundness),
        ("length", attr_losses.length),
        ("thickness", attr_losses.thickness),
        ("sr", sr_loss),
        ("fd", fd_loss),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!(
                "{name} loss {v} must be finite and non-negative"
            )));
        }
    }
    Ok(weights.alpha_r * attr_losses.roundness
        + weights.alpha_l * attr_losses.length
        + weights.alpha_t * attr_losses.thickness
        + weights.lambda_sr * sr_loss
        + weights.lambda_fd * fd_loss)
}

/// Masked-image composition and total reconstruction objective: the image is
/// multiplied elementwise by the occlusion mask, and the total is
/// `l3d + lambda_2d * l2d`.
pub fn recon_objective(inputs: &ReconLossInputs) -> Result<(Grid2, f64)> {
    inputs.validate()?;
    let (rows, cols) = inputs.image.shape();
    let data = inputs
        .image
        .values()
        .iter()
        .zip(inputs.occlusion_mask.values())
        .map(|(i, m)| i * m)
        .collect();
    let masked = Grid2 { rows, cols, data };
    let total = inputs.l3d + inputs.lambda_2d * inputs.l2d;
    Ok((masked, total))
}

/// Parameter groups trained in each phase. The sets are strictly nested:
/// `{MLP} ⊂ {ViT, MLP} ⊂ {ViT, MLP, LLM}`.
pub fn freeze_schedule(phase: TrainPhase) -> BTreeSet<ParamGroup> {
    let groups: &[ParamGroup] = match phase {
        TrainPhase::MlpWarmup => &[ParamGroup::Mlp],
        TrainPhase::VitIncremental => &[ParamGroup::Vit, ParamGroup::Mlp],
        TrainPhase::FullModel => &[ParamGroup::Vit, ParamGroup::Mlp, ParamGroup::Llm],
    };
    groups.iter().copied().collect()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

/// Compare an analytic gradient against central finite differences of
/// `loss_fn` at `point`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    analytic_grad: &[f64],
    point: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    if analytic_grad.len() != point.len() {
        return Err(Error::invalid(format!(
            "gradient has {} coordinates, point has {}",
            analytic_grad.len(),
            point.len()
        )));
    }
    let mut perturbed = point.to_vec();
    let mut max_rel = 0.0_f64;
    for (i, analytic) in analytic_grad.iter().enumerate() {
        perturbed[i] = point[i] + epsilon;
        let f_plus = loss_fn(&perturbed);
        perturbed[i] = point[i] - epsilon;
        let f_minus = loss_fn(&perturbed);
        perturbed[i] = point[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::invalid(format!(
                "loss is not finite near coordinate {i}"
            )));
        }
        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn hyper(beta: f64, delta: f64) -> MpoHyper {
        MpoHyper { beta, delta }
    }

    /// Independent scalar route for `-ln σ(z)`: literal sigmoid then log,
    /// no softplus rewrite.
    fn neg_log_sigmoid_naive(z: f64) -> f64 {
        -(1.0 / (1.0 + (-z).exp())).ln()
    }

    /// Builds a pair of single-token traces realizing the given log-ratios.
    fn traces_for(lr_c: f64, lr_r: f64) -> (LogProbTrace, LogProbTrace) {
        let base = -1.0 - lr_c.abs() - lr_r.abs();
        let c = LogProbTrace::new(vec![base + lr_c], vec![base]).unwrap();
        let r = LogProbTrace::new(vec![base + lr_r], vec![base]).unwrap();
        (c, r)
    }

    #[test]
    fn trace_rejects_empty_and_mismatched() {
        assert!(LogProbTrace::new(vec![], vec![]).is_err());
        assert!(LogProbTrace::new(vec![-1.0], vec![-1.0, -2.0]).is_err());
        assert!(LogProbTrace::new(vec![0.5], vec![-1.0]).is_err());
        assert!(LogProbTrace::new(vec![f64::NAN], vec![-1.0]).is_err());
        assert!(LogProbTrace::new(vec![0.0], vec![0.0]).is_ok());
    }

    #[test]
    fn preference_identity_is_ln2() {
        let t = LogProbTrace::identity(vec![-0.7, -1.3]).unwrap();
        let l = preference_loss(&t, &t, &hyper(1.0, 0.0)).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn preference_beta_zero_is_ln2() {
        let (c, r) = traces_for(3.0, -2.0);
        let l = preference_loss(&c, &r, &hyper(0.0, 0.0)).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
    }

    #[test]
    fn preference_matches_scalar_oracle() {
        let (c, r) = traces_for(2.0, 0.0);
        let l = preference_loss(&c, &r, &hyper(1.0, 0.0)).unwrap();
        assert!((l - neg_log_sigmoid_naive(2.0)).abs() < 1e-12);
        assert!((l - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn preference_grad_cases() {
        let (c, r) = traces_for(0.0, 0.0);
        let (gc, gr) = preference_grad(&c, &r, &hyper(1.0, 0.0)).unwrap();
        assert!((gc + 0.5).abs() < 1e-12 && (gr - 0.5).abs() < 1e-12);

        let (gc, gr) = preference_grad(&c, &r, &hyper(0.0, 0.0)).unwrap();
        assert_eq!((gc, gr), (0.0, 0.0));

        let (c, r) = traces_for(2.0, 0.0);
        let (gc, gr) = preference_grad(&c, &r, &hyper(1.0, 0.0)).unwrap();
        let expected = 1.0 - 1.0 / (1.0 + (-2.0_f64).exp());
        assert!((gc + expected).abs() < 1e-12);
        assert!((gr - expected).abs() < 1e-12);
        assert!((gc + 0.119203).abs() < 1e-6);
    }

    #[test]
    fn quality_identity_case() {
        let (c, r) = traces_for(0.0, 0.0);
        let q = quality_loss(&c, &r, &hyper(1.0, 0.0)).unwrap();
        assert!((q.l_plus - LN_2).abs() < 1e-12);
        assert!((q.l_minus - LN_2).abs() < 1e-12);
        assert!((q.total - 2.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn quality_matches_scalar_oracle() {
        let (c, r) = traces_for(3.0, -3.0);
        let q = quality_loss(&c, &r, &hyper(1.0, 0.0)).unwrap();
        assert!((q.l_plus - neg_log_sigmoid_naive(3.0)).abs() < 1e-12);
        assert!((q.l_minus - neg_log_sigmoid_naive(3.0)).abs() < 1e-12);
        assert!((q.total - 0.097174).abs() < 1e-6);

        let (c, r) = traces_for(0.0, 0.0);
        let q = quality_loss(&c, &r, &hyper(1.0, 1.0)).unwrap();
        assert!((q.l_plus - neg_log_sigmoid_naive(-1.0)).abs() < 1e-12);
        assert!((q.l_minus - neg_log_sigmoid_naive(1.0)).abs() < 1e-12);
        assert!((q.l_plus - 1.313262).abs() < 1e-6);
        assert!((q.l_minus - 0.313262).abs() < 1e-6);
        assert!((q.total - 1.626524).abs() < 1e-6);
    }

    #[test]
    fn quality_ratio_form_uses_exponentiated_argument() {
        let h = hyper(1.0, 0.0);
        let q = quality_loss_from_ratios_with(0.0, 0.0, &h, QualityArg::Ratio);
        // lr = 0 means ratio = 1, so both sigmoid arguments are +-1.
        assert!((q.l_plus - neg_log_sigmoid_naive(1.0)).abs() < 1e-12);
        assert!((q.l_minus - neg_log_sigmoid_naive(-1.0)).abs() < 1e-12);
    }

    #[test]
    fn generation_loss_cases() {
        let ln4 = 4.0_f64.ln();
        let t = LogProbTrace::identity(vec![-ln4; 7]).unwrap();
        assert!((generation_loss(&t) - ln4).abs() < 1e-12);

        let t = LogProbTrace::identity(vec![-0.5, -1.5]).unwrap();
        assert!((generation_loss(&t) - 1.0).abs() < 1e-12);

        let t = LogProbTrace::identity(vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(generation_loss(&t), 0.0);
    }

    #[test]
    fn mpo_projections_and_sum() {
        let (c, r) = traces_for(1.0, -1.0);
        let h = hyper(0.7, 0.2);
        let zero = MpoWeights::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(mpo_loss(&c, &r, &zero, &h).unwrap(), 0.0);

        let only_p = MpoWeights::new(1.0, 0.0, 0.0).unwrap();
        let expected = preference_loss(&c, &r, &h).unwrap();
        assert!((mpo_loss(&c, &r, &only_p, &h).unwrap() - expected).abs() < 1e-12);

        // Policy identical to reference, chosen tokens at logp -0.5.
        let c = LogProbTrace::identity(vec![-0.5, -0.5]).unwrap();
        let r = LogProbTrace::identity(vec![-2.0]).unwrap();
        let all = MpoWeights::default();
        let got = mpo_loss(&c, &r, &all, &hyper(1.0, 0.0)).unwrap();
        assert!((got - 2.579441).abs() < 1e-6);
        assert!((got - (LN_2 + 2.0 * LN_2 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        let l = cross_entropy(&[0.5, 0.5], 0).unwrap();
        assert!((l - LN_2).abs() < 1e-12);
        let l = cross_entropy(&[0.9, 0.1], 1).unwrap();
        assert!((l - (-0.1_f64.ln())).abs() < 1e-12);
        assert!((l - std::f64::consts::LN_10).abs() < 1e-12);

        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        assert!(cross_entropy(&[1.0], 3).is_err());
        assert!(cross_entropy(&[-0.1, 1.1], 0).is_err());
        // Degenerate zero probability stays finite via the floor.
        let l = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn staged_objective_cases() {
        let zero = AttributeLosses {
            roundness: 0.0,
            length: 0.0,
            thickness: 0.0,
        };
        let w = StagedWeights::default();
        assert_eq!(
            staged_supervised_objective(&zero, 0.0, 0.0, &w).unwrap(),
            0.0
        );

        let attr = AttributeLosses {
            roundness: LN_2,
            length: LN_2,
            thickness: LN_2,
        };
        let w = StagedWeights {
            lambda_sr: 0.0,
            lambda_fd: 0.0,
            ..StagedWeights::default()
        };
        let got = staged_supervised_objective(&attr, 9.0, 9.0, &w).unwrap();
        assert!((got - 3.0 * LN_2).abs() < 1e-12);
        assert!((got - 2.079442).abs() < 1e-6);

        let attr = AttributeLosses {
            roundness: 1.0,
            length: 1.0,
            thickness: 1.0,
        };
        let w = StagedWeights {
            alpha_r: 0.5,
            alpha_l: 0.25,
            alpha_t: 0.25,
            lambda_sr: 1.0,
            lambda_fd: 2.0,
        };
        let got = staged_supervised_objective(&attr, 0.5, 0.25, &w).unwrap();
        assert!((got - 2.0).abs() < 1e-12);

        let bad = AttributeLosses {
            roundness: -1.0,
            ..attr
        };
        assert!(staged_supervised_objective(&bad, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn recon_objective_cases() {
        let image = Grid2::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ones = Grid2::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let (masked, total) = recon_objective(&ReconLossInputs {
            image: image.clone(),
            occlusion_mask: ones,
            l3d: 0.7,
            l2d: 5.0,
            lambda_2d: 0.0,
        })
        .unwrap();
        assert_eq!(masked, image);
        assert!((total - 0.7).abs() < 1e-12);

        let mask = Grid2::from_rows(vec![vec![1.0, 0.0], vec![0.5, 1.0]]).unwrap();
        let (masked, total) = recon_objective(&ReconLossInputs {
            image,
            occlusion_mask: mask,
            l3d: 0.2,
            l2d: 0.4,
            lambda_2d: 0.5,
        })
        .unwrap();
        let expected = Grid2::from_rows(vec![vec![1.0, 0.0], vec![1.5, 4.0]]).unwrap();
        assert_eq!(masked, expected);
        assert!((total - 0.4).abs() < 1e-12);

        let narrow = Grid2::from_rows(vec![vec![1.0], vec![1.0]]).unwrap();
        let wide = Grid2::from_rows(vec![vec![1.0, 1.0]]).unwrap();
        assert!(recon_objective(&ReconLossInputs {
            image: narrow,
            occlusion_mask: wide,
            l3d: 0.0,
            l2d: 0.0,
            lambda_2d: 0.0,
        })
        .is_err());
    }

    #[test]
    fn freeze_schedule_sets_are_nested() {
        let warm = freeze_schedule(TrainPhase::MlpWarmup);
        let incr = freeze_schedule(TrainPhase::VitIncremental);
        let full = freeze_schedule(TrainPhase::FullModel);
        assert_eq!(warm.iter().copied().collect::<Vec<_>>(), [ParamGroup::Mlp]);
        assert!(incr.contains(&ParamGroup::Vit) && incr.contains(&ParamGroup::Mlp));
        assert_eq!(incr.len(), 2);
        assert_eq!(full.len(), 3);
        assert!(warm.is_subset(&incr) && incr.is_subset(&full));
        assert!(warm.len() < incr.len() && incr.len() < full.len());
    }

    #[test]
    fn finite_diff_agrees_for_each_loss() {
        let h = hyper(1.0, 0.0);
        let err = finite_diff_check(
            |p| preference_loss_from_ratios(p[0], p[1], &h),
            &{
                let (a, b) = preference_grad_from_ratios(0.0, 0.0, &h);
                vec![a, b]
            },
            &[0.0, 0.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "preference rel err {err}");

        let err = finite_diff_check(
            |p| quality_loss_from_ratios(p[0], p[1], &h).total,
            &{
                let (a, b) = quality_grad_from_ratios(3.0, -3.0, &h);
                vec![a, b]
            },
            &[3.0, -3.0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "quality rel err {err}");

        // Ratio form carries an extra chain-rule factor.
        let err = finite_diff_check(
            |p| quality_loss_from_ratios_with(p[0], p[1], &h, QualityArg::Ratio).total,
            &{
                let (a, b) = quality_grad_from_ratios_with(0.5, -0.5, &h, QualityArg::Ratio);
                vec![a, b]
            },
            &[0.5, -0.5],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "quality ratio-form rel err {err}");

        // Linear function: central differences are exact up to rounding.
        let point = [-0.3, -1.7, -0.9];
        let grad = vec![-1.0 / 3.0; 3];
        let err = finite_diff_check(generation_loss_from_logps, &grad, &point, 1e-5).unwrap();
        assert!(err < 1e-9, "generation rel err {err}");
    }

    #[test]
    fn finite_diff_check_rejects_bad_epsilon() {
        assert!(finite_diff_check(|_| 0.0, &[0.0], &[0.0], 0.0).is_err());
        assert!(finite_diff_check(|_| 0.0, &[0.0], &[0.0], 0.5).is_err());
        assert!(finite_diff_check(|p| (1.0 / p[0]).ln(), &[0.0], &[0.0], 1e-5).is_err());
    }
}
