//! Training objectives.
//!
//! * `kl_distill`: temperature-scaled `KL(teacher ‖ student)` times `τ²`.
//! * `hcl`: hierarchical context loss, an equally weighted sum of MSEs over
//!   an average-pooling pyramid (`full, 4, 2, 1` by default).
//! * `feature_distill`: `hcl` summed over the four stages.
//! * `reg_loss`: `KL(clean teacher ‖ adapted teacher)`.
//! * `total_loss`: `ce + α·kl + β·fd + γ·reg`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::StageFeature;
use crate::nn::{Resample2d, ResampleKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_kd: f64,
    pub tau_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            tau_kd: 4.0,
            tau_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        for (field, v) in [("loss.tau_kd", self.tau_kd), ("loss.tau_reg", self.tau_reg)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(field, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HclConfig {
    /// Pooled sizes below the full resolution, strictly decreasing.
    pub levels: Vec<usize>,
}

impl Default for HclConfig {
    fn default() -> Self {
        Self {
            levels: vec![4, 2, 1],
        }
    }
}

impl HclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.iter().any(|&l| l == 0) {
            return Err(Error::config("loss.hcl_levels", "levels must be ≥ 1"));
        }
        if self.levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("loss.hcl_levels", "levels must be strictly decreasing"));
        }
        Ok(())
    }

    /// Distinct pooled sizes used for an `h × w` map, full size first.
    pub fn sizes_for(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut sizes = vec![(h, w)];
        for &l in &self.levels {
            let s = (l.min(h), l.min(w));
            if !sizes.contains(&s) {
                sizes.push(s);
            }
        }
        sizes
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean over the batch of `KL(softmax(t/τ) ‖ softmax(s/τ)) · τ²`.
pub fn kl_distill(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_same_shape(teacher_logits, student_logits, "kl_distill")?;
    Ok((kl_rows(teacher_logits, student_logits, tau)? * (tau * tau))?)
}

/// Mean over the batch of `KL(softmax(clean/τ) ‖ softmax(adapted/τ))`. The
/// clean logits are treated as constants.
pub fn reg_loss(clean_logits: &Tensor, adapted_logits: &Tensor, tau: f64) -> Result<Tensor> {
    check_same_shape(clean_logits, adapted_logits, "reg_loss")?;
    kl_rows(&clean_logits.detach(), adapted_logits, tau)
}

fn kl_rows(p_logits: &Tensor, q_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::config("loss.tau", format!("must be > 0, got {tau}")));
    }
    let log_p = candle_nn::ops::log_softmax(&(p_logits / tau)?, D::Minus1)?;
    let log_q = candle_nn::ops::log_softmax(&(q_logits / tau)?, D::Minus1)?;
    let p = log_p.exp()?;
    let per_row = (p * (log_p - log_q)?)?.sum(D::Minus1)?;
    Ok(per_row.mean(0)?)
}

pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, labels)?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Hierarchical context loss between two same-shaped stage features.
pub fn hcl(teacher: &StageFeature, student: &StageFeature, config: &HclConfig) -> Result<Tensor> {
    check_same_shape(&teacher.data, &student.data, "hcl")?;
    let t = teacher.to_spatial()?;
    let s = student.to_spatial()?;
    let (_, _, h, w) = t.dims4()?;
    let sizes = config.sizes_for(h, w);
    let weight = 1.0 / sizes.len() as f64;
    let mut total: Option<Tensor> = None;
    for size in sizes {
        let term = if size == (h, w) {
            mse(&t, &s)?
        } else {
            let pool = Resample2d::new(ResampleKind::AdaptiveAvg, (h, w), size, t.dtype())?;
            mse(&pool.apply(&t)?, &pool.apply(&s)?)?
        };
        let term = (term * weight)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    Ok(total.expect("at least the full level"))
}

/// Stage-summed HCL between adapted teacher features and aligned student
/// features.
pub fn feature_distill(
    teacher: &[StageFeature],
    student: &[StageFeature],
    config: &HclConfig,
) -> Result<Tensor> {
    stage_sum(teacher, student, |t, s| hcl(t, s, config))
}

/// Stage-summed plain MSE, the FitNet distance.
pub fn feature_mse(teacher: &[StageFeature], student: &[StageFeature]) -> Result<Tensor> {
    stage_sum(teacher, student, |t, s| {
        check_same_shape(&t.data, &s.data, "feature_mse")?;
        mse(&t.data, &s.data)
    })
}

fn stage_sum<F>(teacher: &[StageFeature], student: &[StageFeature], dist: F) -> Result<Tensor>
where
    F: Fn(&StageFeature, &StageFeature) -> Result<Tensor>,
{
    if teacher.len() != 4 || student.len() != 4 {
        return Err(Error::Contract(format!(
            "feature loss needs 4 stage pairs, got {} teacher and {} student stages",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = dist(&teacher[0], &student[0])?;
    for (t, s) in teacher.iter().zip(student).skip(1) {
        total = (total + dist(t, s)?)?;
    }
    Ok(total)
}

/// The four loss terms of one step. Absent terms are `None` and count as 0.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub ce: Option<Tensor>,
    pub kl: Option<Tensor>,
    pub fd: Option<Tensor>,
    pub reg: Option<Tensor>,
}

/// Scalar values of the loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub kl: f64,
    pub fd: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossValues {
    /// The weighted combination recomputed from the components.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.ce + w.alpha * self.kl + w.beta * self.fd + w.gamma * self.reg
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `ce + α·kl + β·fd + γ·reg`. Fails naming the first non-finite component.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<(Tensor, LossValues)> {
    let mut values = LossValues::default();
    let mut total: Option<Tensor> = None;
    let parts = [
        ("ce", &terms.ce, 1.0),
        ("kl", &terms.kl, weights.alpha),
        ("fd", &terms.fd, weights.beta),
        ("reg", &terms.reg, weights.gamma),
    ];
    for (name, term, w) in parts {
        let Some(t) = term else { continue };
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::Numeric {
                component: name.to_string(),
                value: v,
            });
        }
        match name {
            "ce" => values.ce = v,
            "kl" => values.kl = v,
            "fd" => values.fd = v,
            _ => values.reg = v,
        }
        // combine in f64 so the total equals the weighted sum of the
        // recorded component values
        let t64 = t.to_dtype(DType::F64)?;
        let weighted = if w == 1.0 { t64 } else { (t64 * w)? };
        total = Some(match total {
            None => weighted,
            Some(acc) => (acc + weighted)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no loss terms to combine".into()))?;
    values.total = scalar(&total)?;
    if !values.total.is_finite() {
        return Err(Error::Numeric {
            component: "total".into(),
            value: values.total,
        });
    }
    Ok((total, values))
}

/// Scalar form of the weighted sum, for already-evaluated components.
pub fn total_loss_scalar(ce: f64, kl: f64, fd: f64, reg: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("ce", ce), ("kl", kl), ("fd", fd), ("reg", reg)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                component: name.into(),
                value: v,
            });
        }
    }
    Ok(ce + w.alpha * kl + w.beta * fd + w.gamma * reg)
}
