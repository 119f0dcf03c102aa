//! Categorical distributions and the divergences used throughout: KL, JS,
//! the JS metric `d_js = √JS`, and total variation.
//!
//! All logarithms are natural, so `0 ≤ js ≤ ln 2`. Terms with zero mass in
//! the first argument contribute nothing; the second argument is clipped at
//! [`LOG_CLIP`](crate::numcore::LOG_CLIP) inside logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::LOG_CLIP;

/// Largest deviation of the total mass from 1 that is silently renormalized.
pub const RENORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::arg(format!(
                "categorical needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(v) = probs.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("invalid probability {v}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORM_TOLERANCE {
            return Err(Error::Numeric(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        let mut probs = probs;
        if sum != 1.0 {
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(c: usize) -> Result<Self> {
        Self::new(vec![1.0 / c as f64; c])
    }

    pub fn one_hot(c: usize, k: usize) -> Result<Self> {
        if k >= c {
            return Err(Error::arg(format!("class {k} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; c];
        probs[k] = 1.0;
        Self::new(probs)
    }

    /// Wraps a vector produced by a normalizing computation (softmax, convex
    /// combination of valid rows) without re-validating it.
    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        Self { probs }
    }

    /// Mean of several categoricals over the same support.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Categorical>) -> Result<Self> {
        let mut acc: Option<Vec<f64>> = None;
        let mut n = 0usize;
        for item in items {
            match acc.as_mut() {
                None => acc = Some(item.probs.clone()),
                Some(a) => {
                    check_len(a, &item.probs)?;
                    for (x, y) in a.iter_mut().zip(&item.probs) {
                        *x += y;
                    }
                }
            }
            n += 1;
        }
        let mut acc = acc.ok_or_else(|| Error::arg("mean of an empty set of categoricals"))?;
        for x in &mut acc {
            *x /= n as f64;
        }
        Ok(Self::from_trusted(acc))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(value: Categorical) -> Self {
        value.probs
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::dim(
            format!("categorical over {} classes", p.len()),
            format!("categorical over {} classes", q.len()),
        ));
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(LOG_CLIP).ln() - qi.max(LOG_CLIP).ln()))
        .sum();
    sum.max(0.0)
}

fn js_raw(p: &[f64], q: &[f64]) -> f64 {
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * (kl_raw(p, &mid) + kl_raw(q, &mid))).clamp(0.0, std::f64::consts::LN_2)
}

/// `KL(p ‖ q) = Σ p ln(p/q)`.
pub fn kl(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_len(&p.probs, &q.probs)?;
    Ok(kl_raw(&p.probs, &q.probs))
}

/// Jensen-Shannon divergence against the midpoint `(p + q) / 2`.
pub fn js(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_len(&p.probs, &q.probs)?;
    Ok(js_raw(&p.probs, &q.probs))
}

/// Square root of [`js`]; a metric on categoricals.
pub fn d_js(p: &Categorical, q: &Categorical) -> Result<f64> {
    js(p, q).map(f64::sqrt)
}

/// Total variation distance `½ Σ |pᵢ − qᵢ|`, in `[0, 1]`.
pub fn tv(p: &Categorical, q: &Categorical) -> Result<f64> {
    l1(p, q).map(|d| 0.5 * d)
}

/// Unscaled mass difference `Σ |pᵢ − qᵢ|`, in `[0, 2]`.
pub fn l1(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_len(&p.probs, &q.probs)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum())
}

/// Gradient of `js(m, q)` with respect to `q`, holding `m` fixed:
/// `∂/∂qᵢ = ½ ln(qᵢ / mᵢ')` with `m' = (m + q) / 2`.
pub fn js_grad_second(m: &Categorical, q: &Categorical) -> Result<Vec<f64>> {
    check_len(&m.probs, &q.probs)?;
    Ok(m.probs
        .iter()
        .zip(&q.probs)
        .map(|(&mi, &qi)| {
            let mid = 0.5 * (mi + qi);
            0.5 * (qi.max(LOG_CLIP).ln() - mid.max(LOG_CLIP).ln())
        })
        .collect())
}
