//! Training objective: masked cross-entropy over the three heads plus a cosine
//! agreement term between each unimodal head and the fusion head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda2 > 0.0 && self.lambda1 > self.lambda2) || !self.lambda1.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must satisfy lambda1 > lambda2 > 0, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

fn masked_rows(labels: &[usize], mask: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != mask.len() {
        return Err(Error::Dimension(format!("{} labels but {} mask entries", labels.len(), mask.len())));
    }
    let (rows, labs): (Vec<usize>, Vec<usize>) =
        labels.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m).map(|(r, (&l, _))| (r, l)).unzip();
    if rows.is_empty() {
        return Err(Error::Contract("supervised loss over an empty mask".into()));
    }
    Ok((rows, labs))
}

/// Mean negative log-likelihood of `labels` under `logits [T, m]` over masked rows.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dimension(format!("logits {s:?} for {} labels", labels.len())));
    }
    let (rows, labs) = masked_rows(labels, mask)?;
    let picked = logits
        .gather_rows(Arc::new(rows.into_iter().map(Some).collect()))?
        .log_softmax()?
        .select_last(Arc::new(labs))?;
    Ok(picked.mean().scale(-1.0))
}

/// Sum of the three heads' cross-entropies, each a mean over masked pixels.
pub fn supervised_loss<'t>(
    logits1: Var<'t>,
    logits2: Var<'t>,
    logitsf: Var<'t>,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var<'t>> {
    let a = cross_entropy(logits1, labels, mask)?;
    let b = cross_entropy(logits2, labels, mask)?;
    let c = cross_entropy(logitsf, labels, mask)?;
    a.try_add(b)?.try_add(c)
}

/// Mean over tokens of `2 - cos(f1, ff) - cos(f2, ff)`; with `mask`, only the
/// selected tokens count.
pub fn consistency_loss<'t>(f1: Var<'t>, f2: Var<'t>, ff: Var<'t>, mask: Option<&[bool]>) -> Result<Var<'t>> {
    let (f1, f2, ff) = match mask {
        None => (f1, f2, ff),
        Some(m) => {
            let rows: Arc<Vec<Option<usize>>> =
                Arc::new(m.iter().enumerate().filter(|(_, &k)| k).map(|(r, _)| Some(r)).collect());
            if rows.is_empty() {
                return Err(Error::Contract("consistency loss over an empty mask".into()));
            }
            (f1.gather_rows(Arc::clone(&rows))?, f2.gather_rows(Arc::clone(&rows))?, ff.gather_rows(rows)?)
        }
    };
    let c1 = f1.cosine_last(ff, COSINE_EPS)?;
    let c2 = f2.cosine_last(ff, COSINE_EPS)?;
    let n = c1.shape().iter().product::<usize>() as f64;
    let tape = f1.tape();
    let two = tape.constant(crate::tensor::Tensor::scalar(2.0));
    two.try_sub(c1.sum().try_add(c2.sum())?.scale(1.0 / n))
}

pub fn total_loss<'t>(sup: Var<'t>, unsup: Var<'t>, w: &LossWeights) -> Result<Var<'t>> {
    sup.scale(w.lambda1).try_add(unsup.scale(w.lambda2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn uniform_posterior_gives_three_ln2() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros([3, 2]));
        let v = supervised_loss(l, l, l, &[0, 1, 1], &[true; 3]).unwrap().value().item();
        assert!((v - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let tape = Tape::new();
        let l = tape.constant(t(&[2, 2], &[50.0, -50.0, -50.0, 50.0]));
        let v = supervised_loss(l, l, l, &[0, 1], &[true, true]).unwrap().value().item();
        assert!(v < 1e-20, "{v}");
    }

    #[test]
    fn masked_mean_matches_per_pixel() {
        let tape = Tape::new();
        let raw = [0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.9, 1.5, 0.0, 0.2, 0.4, -2.2];
        let l = tape.constant(t(&[4, 3], &raw));
        let labels = [2, 0, 1, 1];
        let mask = [true, false, true, false];
        let got = cross_entropy(l, &labels, &mask).unwrap().value().item();
        let mut want = 0.0;
        for r in [0usize, 2] {
            let row = &raw[r * 3..r * 3 + 3];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[labels[r]];
        }
        assert!((got - want / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_contract_error() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(supervised_loss(l, l, l, &[0, 1], &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn consistency_fixtures() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, -3.0, 0.5]));
        assert_eq!(consistency_loss(a, a, a, None).unwrap().value().item(), 0.0);
        let f = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let o = tape.constant(t(&[1, 2], &[0.0, 3.0]));
        assert_eq!(consistency_loss(o, o, f, None).unwrap().value().item(), 2.0);
        let n = tape.constant(t(&[1, 2], &[-2.0, 0.0]));
        assert_eq!(consistency_loss(n, n, f, None).unwrap().value().item(), 4.0);
    }

    #[test]
    fn total_and_weights() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let one = tape.constant(Tensor::scalar(1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let two = tape.constant(Tensor::scalar(2.0));
        assert_eq!(total_loss(one, zero, &w).unwrap().value().item(), 1.0);
        assert!((total_loss(zero, two, &w).unwrap().value().item() - 0.2).abs() < 1e-15);
        assert!(LossWeights { lambda1: 0.1, lambda2: 0.1 }.validate().is_err());
        assert!(LossWeights { lambda1: 1.0, lambda2: 0.0 }.validate().is_err());
        w.validate().unwrap();
    }
}
