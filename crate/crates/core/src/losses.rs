//! Cross-pyramid consistency objective.
//!
//! Every term returns its value together with the analytic gradient with
//! respect to the logits it depends on. Teacher distributions in the
//! consistency terms are detached: they contribute to the value but never
//! receive gradient.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dbpnet::{Branch, BranchPyramids, PyramidGrads};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Lower clamp applied to probabilities inside logarithms.
pub const LOG_CLAMP: f64 = 1e-8;
/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Softmax temperature; must be strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SoftmaxTemperature(f64);

impl SoftmaxTemperature {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::Argument(format!(
                "temperature must be positive, got {t}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for SoftmaxTemperature {
    fn default() -> Self {
        Self(10.0)
    }
}

impl TryFrom<f64> for SoftmaxTemperature {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SoftmaxTemperature> for f64 {
    fn from(t: SoftmaxTemperature) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight on the main consistency plus uncertainty terms.
    pub fixed_weight: f64,
    /// Final weight of the auxiliary consistency term.
    pub w_max: f64,
    /// Ramp-up length in schedule steps.
    pub t_max: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fixed_weight: 0.1,
            w_max: 0.1,
            t_max: 200,
        }
    }
}

impl LossWeights {
    /// Weights that switch every regularizer off.
    pub fn supervised_only() -> Self {
        Self {
            fixed_weight: 0.0,
            w_max: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_weight >= 0.0) {
            return Err(Error::config(
                "loss_weights.fixed_weight",
                "must be nonnegative",
            ));
        }
        if !(self.w_max >= 0.0) {
            return Err(Error::config("loss_weights.w_max", "must be nonnegative"));
        }
        if self.t_max == 0 {
            return Err(Error::config("loss_weights.t_max", "must be positive"));
        }
        Ok(())
    }
}

/// Values of every loss term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub con_main: f64,
    pub con_aux: f64,
    pub um: f64,
    pub lambda_t: f64,
    pub total: f64,
}

/// Unweighted term values fed to [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub sup: f64,
    pub con_main: f64,
    pub con_aux: f64,
    pub um: f64,
}

fn combine(parts: &LossParts, fixed_weight: f64, lambda_t: f64) -> f64 {
    parts.sup + fixed_weight * (parts.con_main + parts.um) + lambda_t * parts.con_aux
}

impl LossBreakdown {
    /// Recomputes the total from the stored fields.
    pub fn recompute_total(&self, fixed_weight: f64) -> f64 {
        let parts = LossParts {
            sup: self.sup,
            con_main: self.con_main,
            con_aux: self.con_aux,
            um: self.um,
        };
        combine(&parts, fixed_weight, self.lambda_t)
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sup,
            self.con_main,
            self.con_aux,
            self.um,
            self.lambda_t,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Gaussian warm-up `w_max * exp(-5 (1 - min(t, t_max)/t_max)^2)`.
pub fn ramp_up_weight(t: u64, weights: &LossWeights) -> f64 {
    let t_max = weights.t_max.max(1) as f64;
    let phase = 1.0 - (t as f64).min(t_max) / t_max;
    weights.w_max * (-5.0 * phase * phase).exp()
}

pub fn total_loss(parts: LossParts, t: u64, weights: &LossWeights) -> LossBreakdown {
    let lambda_t = ramp_up_weight(t, weights);
    LossBreakdown {
        sup: parts.sup,
        con_main: parts.con_main,
        con_aux: parts.con_aux,
        um: parts.um,
        lambda_t,
        total: combine(&parts, weights.fixed_weight, lambda_t),
    }
}

/// Softmax of `logits / temperature` over axis 1 of a `(B, C, H, W)` map.
pub fn t_softmax<T: Scalar>(logits: &Tensor4<T>, temperature: T) -> Result<Tensor4<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let [b, c, h, w] = logits.shape();
    let plane = h * w;
    let inv_t = temperature.recip();
    let mut out = Tensor4::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let base = bi * c * plane;
        for px in 0..plane {
            let at = |k: usize| base + k * plane + px;
            let mut m = T::neg_infinity();
            for k in 0..c {
                m = m.max(src[at(k)] * inv_t);
            }
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[at(k)] * inv_t - m).exp();
                dst[at(k)] = e;
                z += e;
            }
            for k in 0..c {
                dst[at(k)] /= z;
            }
        }
    }
    Ok(out)
}

/// Pulls `dL/dp` back through `p = softmax(z / T)`.
fn softmax_backward<T: Scalar>(
    probs: &Tensor4<T>,
    dprobs: &Tensor4<T>,
    temperature: T,
) -> Tensor4<T> {
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let inv_t = temperature.recip();
    let mut dz = Tensor4::zeros(probs.shape());
    let (p, g) = (probs.data(), dprobs.data());
    let out = dz.data_mut();
    for bi in 0..b {
        let base = bi * c * plane;
        for px in 0..plane {
            let at = |k: usize| base + k * plane + px;
            let dot = (0..c).map(|k| g[at(k)] * p[at(k)]).sum::<T>();
            for k in 0..c {
                out[at(k)] = inv_t * p[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    dz
}

fn same_shape<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn pixel_count<T: Scalar>(t: &Tensor4<T>) -> T {
    let [b, _, h, w] = t.shape();
    T::from_usize_lossy(b * h * w)
}

/// `mean_{batch, pixels} sum_c teacher_c * log(teacher_c / student_c)`.
pub fn kl_soft<T: Scalar>(student: &Tensor4<T>, teacher: &Tensor4<T>) -> Result<T> {
    same_shape(student, teacher, "kl_soft")?;
    let eps = T::lit(LOG_CLAMP);
    let sum = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| t * (t.max(eps).ln() - s.max(eps).ln()))
        .sum::<T>();
    Ok(sum / pixel_count(student))
}

/// Gradient of [`kl_soft`] with respect to the student probabilities.
fn kl_soft_dstudent<T: Scalar>(student: &Tensor4<T>, teacher: &Tensor4<T>) -> Tensor4<T> {
    let eps = T::lit(LOG_CLAMP);
    let n = pixel_count(student);
    let data = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&s, &t)| if s > eps { -t / (s * n) } else { T::zero() })
        .collect();
    Tensor4::from_vec(student.shape(), data).expect("same shape")
}

/// One directional distillation term with the teacher detached.
#[derive(Debug, Clone)]
pub struct DirectionalKl<T> {
    pub value: T,
    /// Gradient with respect to the student logits.
    pub student_grad: Tensor4<T>,
    /// Gradient with respect to the teacher logits: identically zero.
    pub teacher_grad: Tensor4<T>,
}

/// `kl_soft(t_softmax(student), stopgrad(t_softmax(teacher)))`.
pub fn directional_kl<T: Scalar>(
    student_logits: &Tensor4<T>,
    teacher_logits: &Tensor4<T>,
    temperature: T,
) -> Result<DirectionalKl<T>> {
    same_shape(student_logits, teacher_logits, "directional_kl")?;
    let s = t_softmax(student_logits, temperature)?;
    let t = t_softmax(teacher_logits, temperature)?;
    let value = kl_soft(&s, &t)?;
    let student_grad = softmax_backward(&s, &kl_soft_dstudent(&s, &t), temperature);
    Ok(DirectionalKl {
        value,
        student_grad,
        teacher_grad: Tensor4::zeros(teacher_logits.shape()),
    })
}

/// Value and logit gradients of a symmetric pair of directional terms.
#[derive(Debug, Clone)]
pub struct PairLoss<T> {
    pub value: T,
    pub grad_tr: Tensor4<T>,
    pub grad_up: Tensor4<T>,
}

fn bidirectional<T: Scalar>(
    tr: &Tensor4<T>,
    up: &Tensor4<T>,
    temperature: T,
) -> Result<PairLoss<T>> {
    let tr_student = directional_kl(tr, up, temperature)?;
    let up_student = directional_kl(up, tr, temperature)?;
    let mut grad_tr = tr_student.student_grad;
    grad_tr.add_assign(&up_student.teacher_grad);
    let mut grad_up = up_student.student_grad;
    grad_up.add_assign(&tr_student.teacher_grad);
    Ok(PairLoss {
        value: tr_student.value + up_student.value,
        grad_tr,
        grad_up,
    })
}

/// Main consistency between the scale-4 outputs of both branches.
pub fn main_consistency_loss<T: Scalar>(
    logits_tr4: &Tensor4<T>,
    logits_up4: &Tensor4<T>,
    temperature: T,
) -> Result<PairLoss<T>> {
    bidirectional(logits_tr4, logits_up4, temperature)
}

/// Mean over scales 1..3 of the same-scale bidirectional terms.
#[derive(Debug, Clone)]
pub struct AuxLoss<T> {
    pub value: T,
    pub per_scale: [T; 3],
    pub grads_tr: Vec<Tensor4<T>>,
    pub grads_up: Vec<Tensor4<T>>,
}

pub fn aux_consistency_loss<T: Scalar>(
    pyr: &BranchPyramids<T>,
    temperature: T,
) -> Result<AuxLoss<T>> {
    pyr.validate()?;
    let third = T::lit(1.0 / 3.0);
    let mut per_scale = [T::zero(); 3];
    let mut grads_tr = Vec::with_capacity(3);
    let mut grads_up = Vec::with_capacity(3);
    for s in 1..=3 {
        let mut pair = bidirectional(
            pyr.scale(Branch::Tr, s),
            pyr.scale(Branch::Up, s),
            temperature,
        )?;
        per_scale[s - 1] = pair.value;
        pair.grad_tr.scale(third);
        pair.grad_up.scale(third);
        grads_tr.push(pair.grad_tr);
        grads_up.push(pair.grad_up);
    }
    let value = per_scale.iter().copied().sum::<T>() * third;
    Ok(AuxLoss {
        value,
        per_scale,
        grads_tr,
        grads_up,
    })
}

/// Entropy of the averaged main-output probabilities, per pixel.
pub fn uncertainty_min_loss<T: Scalar>(
    probs_tr4: &Tensor4<T>,
    probs_up4: &Tensor4<T>,
) -> Result<T> {
    same_shape(probs_tr4, probs_up4, "uncertainty_min_loss")?;
    let eps = T::lit(LOG_CLAMP);
    let half = T::lit(0.5);
    let sum = probs_tr4
        .data()
        .iter()
        .zip(probs_up4.data())
        .map(|(&a, &b)| {
            let m = (a + b) * half;
            m * m.max(eps).ln()
        })
        .sum::<T>();
    Ok(-sum / pixel_count(probs_tr4))
}

/// [`uncertainty_min_loss`] on `softmax(logits)` with logit gradients.
pub fn uncertainty_min_from_logits<T: Scalar>(
    logits_tr4: &Tensor4<T>,
    logits_up4: &Tensor4<T>,
) -> Result<PairLoss<T>> {
    same_shape(logits_tr4, logits_up4, "uncertainty_min_loss")?;
    let p_tr = t_softmax(logits_tr4, T::one())?;
    let p_up = t_softmax(logits_up4, T::one())?;
    let value = uncertainty_min_loss(&p_tr, &p_up)?;
    let eps = T::lit(LOG_CLAMP);
    let half = T::lit(0.5);
    let n = pixel_count(&p_tr);
    let data = p_tr
        .data()
        .iter()
        .zip(p_up.data())
        .map(|(&a, &b)| {
            let m = (a + b) * half;
            let d = if m > eps { m.ln() + T::one() } else { eps.ln() };
            -d * half / n
        })
        .collect();
    let dp = Tensor4::from_vec(p_tr.shape(), data).expect("same shape");
    Ok(PairLoss {
        value,
        grad_tr: softmax_backward(&p_tr, &dp, T::one()),
        grad_up: softmax_backward(&p_up, &dp, T::one()),
    })
}

fn check_labels<T: Scalar>(probs: &Tensor4<T>, label: &Array3<u8>) -> Result<()> {
    let [b, c, h, w] = probs.shape();
    if label.dim() != (b, h, w) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match probabilities {:?}",
            label.dim(),
            probs.shape()
        )));
    }
    if let Some(&bad) = label.iter().find(|&&v| v as usize >= c) {
        return Err(Error::Data(format!("label value {bad} outside [0, {c})")));
    }
    Ok(())
}

struct DiceStats<T> {
    inter: Vec<T>,
    denom: Vec<T>,
}

fn dice_stats<T: Scalar>(probs: &Tensor4<T>, label: &Array3<u8>) -> DiceStats<T> {
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let mut inter = vec![T::zero(); c];
    let mut p_sum = vec![T::zero(); c];
    let mut g_sum = vec![T::zero(); c];
    let labels = label.as_slice().expect("standard layout");
    for bi in 0..b {
        for k in 0..c {
            let p = &probs.data()[(bi * c + k) * plane..(bi * c + k + 1) * plane];
            let g = &labels[bi * plane..(bi + 1) * plane];
            for (&pv, &gv) in p.iter().zip(g) {
                p_sum[k] += pv;
                if gv as usize == k {
                    inter[k] += pv;
                    g_sum[k] += T::one();
                }
            }
        }
    }
    let eps = T::lit(DICE_EPS);
    let denom = p_sum
        .iter()
        .zip(&g_sum)
        .map(|(&p, &g)| p + g + eps)
        .collect();
    DiceStats { inter, denom }
}

/// Class-averaged soft Dice loss (background included) against a
/// `(B, H, W)` label map.
pub fn dice_loss<T: Scalar>(probs: &Tensor4<T>, label: &Array3<u8>) -> Result<T> {
    check_labels(probs, label)?;
    let st = dice_stats(probs, label);
    let eps = T::lit(DICE_EPS);
    let c = st.inter.len();
    let total = (0..c)
        .map(|k| T::one() - (T::lit(2.0) * st.inter[k] + eps) / st.denom[k])
        .sum::<T>();
    Ok(total / T::from_usize_lossy(c))
}

/// [`dice_loss`] of `softmax(logits)` and its gradient with respect to the logits.
pub fn dice_loss_from_logits<T: Scalar>(
    logits: &Tensor4<T>,
    label: &Array3<u8>,
) -> Result<(T, Tensor4<T>)> {
    let probs = t_softmax(logits, T::one())?;
    let value = dice_loss(&probs, label)?;
    let st = dice_stats(&probs, label);
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let inv_c = T::from_usize_lossy(c).recip();
    let labels = label.as_slice().expect("standard layout");
    let mut dp = Tensor4::zeros(probs.shape());
    for bi in 0..b {
        for k in 0..c {
            let num = two * st.inter[k] + eps;
            let den = st.denom[k];
            let den2 = den * den;
            let out = &mut dp.data_mut()[(bi * c + k) * plane..(bi * c + k + 1) * plane];
            let g = &labels[bi * plane..(bi + 1) * plane];
            for (o, &gv) in out.iter_mut().zip(g) {
                let gk = if gv as usize == k {
                    T::one()
                } else {
                    T::zero()
                };
                *o = -inv_c * (two * gk * den - num) / den2;
            }
        }
    }
    Ok((value, softmax_backward(&probs, &dp, T::one())))
}

/// Dice on the TR main output plus Dice on the UP main output.
///
/// The labeled samples must lead the batch: `label` covers the first
/// `label.dim().0` samples of the pyramids and the rest receive no gradient.
pub fn supervised_loss<T: Scalar>(
    pyr: &BranchPyramids<T>,
    label: &Array3<u8>,
) -> Result<(T, PyramidGrads<T>)> {
    pyr.validate()?;
    let n_lab = label.dim().0;
    let batch = pyr.main(Branch::Tr).shape()[0];
    if n_lab > batch {
        return Err(Error::Shape(format!(
            "{n_lab} labels for a batch of {batch}"
        )));
    }
    let mut grads = PyramidGrads::default();
    let mut value = T::zero();
    for branch in [Branch::Tr, Branch::Up] {
        let main = pyr.main(branch);
        let labeled = main.slice_outer(0, n_lab);
        let (v, g) = dice_loss_from_logits(&labeled, label)?;
        value += v;
        let mut full = Tensor4::zeros(main.shape());
        full.data_mut()[..g.len()].copy_from_slice(g.data());
        *grads.slot(branch, 4) = Some(full);
    }
    Ok((value, grads))
}

/// The complete training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpcrObjective {
    pub temperature: SoftmaxTemperature,
    pub weights: LossWeights,
    /// Multiply the distillation terms by `T^2` (off reproduces the plain
    /// objective).
    pub t_squared_scaling: bool,
}

impl Default for CpcrObjective {
    fn default() -> Self {
        Self {
            temperature: SoftmaxTemperature::default(),
            weights: LossWeights::default(),
            t_squared_scaling: false,
        }
    }
}

impl CpcrObjective {
    /// Evaluates every term at ramp-up step `t` and returns the breakdown
    /// with the gradient of the total with respect to all pyramid maps.
    ///
    /// Regularizers use every sample; the supervised term uses the leading
    /// `label.dim().0` samples. Terms with zero weight contribute no gradient.
    pub fn evaluate<T: Scalar>(
        &self,
        pyr: &BranchPyramids<T>,
        label: &Array3<u8>,
        t: u64,
    ) -> Result<(LossBreakdown, PyramidGrads<T>)> {
        let temp = T::lit(self.temperature.get());
        let kl_scale = if self.t_squared_scaling {
            temp * temp
        } else {
            T::one()
        };
        let (sup, mut grads) = supervised_loss(pyr, label)?;
        let main = main_consistency_loss(pyr.main(Branch::Tr), pyr.main(Branch::Up), temp)?;
        let aux = aux_consistency_loss(pyr, temp)?;
        let um = uncertainty_min_from_logits(pyr.main(Branch::Tr), pyr.main(Branch::Up))?;
        let parts = LossParts {
            sup: to_f64(sup),
            con_main: to_f64(main.value * kl_scale),
            con_aux: to_f64(aux.value * kl_scale),
            um: to_f64(um.value),
        };
        let breakdown = total_loss(parts, t, &self.weights);
        let fixed = T::lit(self.weights.fixed_weight);
        if self.weights.fixed_weight != 0.0 {
            grads.accumulate(Branch::Tr, 4, &main.grad_tr, fixed * kl_scale);
            grads.accumulate(Branch::Up, 4, &main.grad_up, fixed * kl_scale);
            grads.accumulate(Branch::Tr, 4, &um.grad_tr, fixed);
            grads.accumulate(Branch::Up, 4, &um.grad_up, fixed);
        }
        if breakdown.lambda_t != 0.0 {
            let lambda = T::lit(breakdown.lambda_t) * kl_scale;
            for s in 1..=3 {
                grads.accumulate(Branch::Tr, s, &aux.grads_tr[s - 1], lambda);
                grads.accumulate(Branch::Up, s, &aux.grads_up[s - 1], lambda);
            }
        }
        Ok((breakdown, grads))
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
