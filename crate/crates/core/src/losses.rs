//! Training objectives as differentiable functions of network outputs, plus
//! the weighted aggregation into discriminator and generator/encoder totals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{ensure, Error, Result};
use crate::networks::Nets;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_domain: f64,
    pub lambda_recon: f64,
    pub lambda_lpips: f64,
    pub lambda_inr: f64,
    pub lambda_mix: f64,
    pub lambda_path: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_domain: 1.0,
            lambda_recon: 10.0,
            lambda_lpips: 1.0,
            lambda_inr: 5.0,
            lambda_mix: 1.0,
            lambda_path: 2.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_adv: 0.0,
            lambda_domain: 0.0,
            lambda_recon: 0.0,
            lambda_lpips: 0.0,
            lambda_inr: 0.0,
            lambda_mix: 0.0,
            lambda_path: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            ensure(v.is_finite() && v >= 0.0, || {
                format!("loss weight {name} must be finite and nonnegative, got {v}")
            })?;
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("lambda_adv", self.lambda_adv),
            ("lambda_domain", self.lambda_domain),
            ("lambda_recon", self.lambda_recon),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_inr", self.lambda_inr),
            ("lambda_mix", self.lambda_mix),
            ("lambda_path", self.lambda_path),
        ]
    }
}

/// Loss section of the training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_adv: f64,
    pub lambda_domain: f64,
    pub lambda_recon: f64,
    pub lambda_lpips: f64,
    pub lambda_inr: f64,
    pub lambda_mix: f64,
    pub lambda_path: f64,
    /// Use the saturating `log(1 − D)` generator objective.
    pub saturating_adv: bool,
    /// Add the literal two-input penalty between translations of different
    /// images; crossover mixing inside the generator is used either way.
    pub literal_eq10: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_weights(&LossWeights::default())
    }
}

impl LossConfig {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            lambda_adv: w.lambda_adv,
            lambda_domain: w.lambda_domain,
            lambda_recon: w.lambda_recon,
            lambda_lpips: w.lambda_lpips,
            lambda_inr: w.lambda_inr,
            lambda_mix: w.lambda_mix,
            lambda_path: w.lambda_path,
            saturating_adv: false,
            literal_eq10: false,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_adv: self.lambda_adv,
            lambda_domain: self.lambda_domain,
            lambda_recon: self.lambda_recon,
            lambda_lpips: self.lambda_lpips,
            lambda_inr: self.lambda_inr,
            lambda_mix: self.lambda_mix,
            lambda_path: self.lambda_path,
        }
    }
}

/// Named loss values and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }
}

/// `−[mean log D(y,t) + mean log(1 − D(y_g,t))]`.
pub fn adv_loss_d<'g, T: Scalar>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
    real.ln().mean().add(fake.neg().add_scalar(1.0).ln().mean()).neg()
}

/// `−mean log D(y_g,t)`, or the saturating `mean log(1 − D(y_g,t))`.
pub fn adv_loss_g<T: Scalar>(fake: Var<'_, T>, saturating: bool) -> Var<'_, T> {
    if saturating {
        fake.neg().add_scalar(1.0).ln().mean()
    } else {
        fake.ln().mean().neg()
    }
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`.
pub fn domain_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    ensure(shape.len() == 2 && shape[0] == labels.len(), || {
        format!("{} labels for logits of shape {shape:?}", labels.len())
    })?;
    if let Some(bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {} domains",
            shape[1]
        )));
    }
    Ok(logits.cross_entropy(labels))
}

/// Source-label classification of diffused real images.
pub fn domain_loss_real<'g, T: Scalar>(logits: Var<'g, T>, s: &[usize]) -> Result<Var<'g, T>> {
    domain_loss(logits, s)
}

/// Target-label classification of diffused translations.
pub fn domain_loss_synth<'g, T: Scalar>(logits: Var<'g, T>, c: &[usize]) -> Result<Var<'g, T>> {
    domain_loss(logits, c)
}

/// Mean squared difference over all elements.
pub fn mse<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    ensure(a.shape() == b.shape(), || {
        format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())
    })?;
    Ok(a.sub(b).square().mean())
}

/// Content preservation between a source image and its translation.
pub fn recon_loss<'g, T: Scalar>(x: Var<'g, T>, x_rec: Var<'g, T>) -> Result<Var<'g, T>> {
    mse(x, x_rec)
}

/// Translation into the image's own domain should leave it unchanged.
pub fn identity_loss<'g, T: Scalar>(x: Var<'g, T>, x_same: Var<'g, T>) -> Result<Var<'g, T>> {
    mse(x, x_same)
}

/// Sum over extractor layers of the per-layer mean squared feature distance.
pub fn lpips_loss<'g, T: Scalar>(
    nets: &Nets<'g, '_, T>,
    x: Var<'g, T>,
    x_rec: Var<'g, T>,
) -> Result<Var<'g, T>> {
    ensure(x.shape() == x_rec.shape(), || {
        format!("shape mismatch: {:?} vs {:?}", x.shape(), x_rec.shape())
    })?;
    let fx = nets.perceptual_features(x);
    let fr = nets.perceptual_features(x_rec);
    let mut total: Option<Var<'g, T>> = None;
    for (a, b) in fx.into_iter().zip(fr) {
        let term = a.sub(b).square().mean();
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("extractor has layers"))
}

/// `layers · mean squared distance` between two translated batches.
pub fn style_mix_loss<'g, T: Scalar>(
    out_1: Var<'g, T>,
    out_2: Var<'g, T>,
    layers: usize,
) -> Result<Var<'g, T>> {
    Ok(mse(out_1, out_2)?.scale(layers as f64))
}

/// `mean((length − running_mean)²)` over a batch of path lengths.
pub fn path_penalty<T: Scalar>(lengths: Var<'_, T>, running_mean: f64) -> Var<'_, T> {
    lengths.add_scalar(-running_mean).square().mean()
}

/// Discriminator-side loss terms.
pub struct DTerms<'g, T: Scalar> {
    pub adv_d: Var<'g, T>,
    pub domain_real: Var<'g, T>,
}

/// Generator/encoder-side loss terms.
pub struct GTerms<'g, T: Scalar> {
    pub adv_g: Var<'g, T>,
    pub domain_synth: Var<'g, T>,
    pub recon: Var<'g, T>,
    pub lpips: Var<'g, T>,
    pub identity: Var<'g, T>,
    pub mix: Var<'g, T>,
    pub path: Var<'g, T>,
}

impl<'g, T: Scalar> DTerms<'g, T> {
    pub fn named(&self, w: &LossWeights) -> Vec<(&'static str, Var<'g, T>, f64)> {
        vec![
            ("adv_d", self.adv_d, w.lambda_adv),
            ("domain_real", self.domain_real, w.lambda_domain),
        ]
    }
}

impl<'g, T: Scalar> GTerms<'g, T> {
    pub fn named(&self, w: &LossWeights) -> Vec<(&'static str, Var<'g, T>, f64)> {
        vec![
            ("adv_g", self.adv_g, w.lambda_adv),
            ("domain_synth", self.domain_synth, w.lambda_domain),
            ("recon", self.recon, w.lambda_recon),
            ("lpips", self.lpips, w.lambda_lpips),
            ("identity", self.identity, w.lambda_inr),
            ("mix", self.mix, w.lambda_mix),
            ("path", self.path, w.lambda_path),
        ]
    }
}

/// Weighted sum of named terms. Fails with [`Error::NonFinite`] naming the
/// first non-finite term.
pub fn weighted_total<'g, T: Scalar>(
    terms: &[(&'static str, Var<'g, T>, f64)],
    step: u64,
) -> Result<(Var<'g, T>, LossReport)> {
    let mut report = LossReport::default();
    let mut total: Option<Var<'g, T>> = None;
    for &(name, var, weight) in terms {
        let value = var.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step,
                value,
            });
        }
        report.terms.insert(name.to_string(), value);
        report.total += weight * value;
        let scaled = var.scale(weight);
        total = Some(match total {
            Some(t) => t.add(scaled),
            None => scaled,
        });
    }
    let total = total.ok_or_else(|| Error::validation("no loss terms"))?;
    Ok((total, report))
}

/// Both totals: `(D total, D report, G/E total, G/E report)`.
#[allow(clippy::type_complexity)]
pub fn total_losses<'g, T: Scalar>(
    d: &DTerms<'g, T>,
    g: &GTerms<'g, T>,
    weights: &LossWeights,
    step: u64,
) -> Result<((Var<'g, T>, LossReport), (Var<'g, T>, LossReport))> {
    Ok((
        weighted_total(&d.named(weights), step)?,
        weighted_total(&g.named(weights), step)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::tensor::Tensor;

    fn v<'g>(g: &'g Graph<f64>, shape: &[usize], data: &[f64]) -> Var<'g, f64> {
        g.input(Tensor::from_f64(shape, data))
    }

    #[test]
    fn adversarial_values() {
        let g = Graph::<f64>::new();
        let half = v(&g, &[4], &[0.5; 4]);
        assert!((adv_loss_d(half, half).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((adv_loss_g(half, false).item() - 2f64.ln()).abs() < 1e-12);
        let real = v(&g, &[2], &[0.9, 0.9]);
        let fake = v(&g, &[2], &[0.1, 0.1]);
        assert!((adv_loss_d(real, fake).item() + 2.0 * 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nonsaturating_gradient_magnitudes() {
        let g = Graph::<f64>::new();
        let p = v(&g, &[2], &[0.1, 0.99]);
        let loss = adv_loss_g(p, false).scale(2.0);
        let grads = g.backward(loss);
        let d = grads.wrt(p).unwrap().data().to_vec();
        assert!((d[0] + 10.0).abs() < 1e-9);
        assert!((d[1] + 1.0 / 0.99).abs() < 1e-9);
    }

    #[test]
    fn domain_values() {
        let g = Graph::<f64>::new();
        let uniform = v(&g, &[2, 3], &[0.0; 6]);
        assert!((domain_loss(uniform, &[0, 2]).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let half = v(&g, &[1, 2], &[0.0, 0.0]);
        assert!((domain_loss(half, &[1]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        assert!(domain_loss(uniform, &[0, 3]).is_err());
    }

    #[test]
    fn reconstruction_values() {
        let g = Graph::<f64>::new();
        let a = v(&g, &[1, 1, 2, 2], &[-1.0; 4]);
        let b = v(&g, &[1, 1, 2, 2], &[1.0; 4]);
        assert_eq!(recon_loss(a, b).unwrap().item(), 4.0);
        assert_eq!(recon_loss(a, a).unwrap().item(), 0.0);
        let mut px = vec![0.0; 1024];
        px[17] = 0.5;
        let x = v(&g, &[1, 1, 32, 32], &vec![0.0; 1024]);
        let y = v(&g, &[1, 1, 32, 32], &px);
        assert!((identity_loss(x, y).unwrap().item() - 0.25 / 1024.0).abs() < 1e-15);
        let c = v(&g, &[1, 1, 4, 1], &[0.0; 4]);
        assert!(recon_loss(a, c).is_err());
        let m1 = v(&g, &[1, 2], &[0.0, 1.0]);
        let m2 = v(&g, &[1, 2], &[1.0, 0.0]);
        assert_eq!(style_mix_loss(m1, m2, 4).unwrap().item(), 4.0);
    }

    #[test]
    fn totals() {
        let g = Graph::<f64>::new();
        let two = v(&g, &[], &[2.0]);
        let zero = v(&g, &[], &[0.0]);
        let terms = [("a", two, 3.0), ("b", zero, 5.0)];
        let (total, report) = weighted_total(&terms, 0).unwrap();
        assert_eq!(total.item(), 6.0);
        assert_eq!(report.total, 6.0);
        let nan = v(&g, &[], &[f64::NAN]);
        match weighted_total(&[("a", two, 1.0), ("bad", nan, 1.0)], 7) {
            Err(Error::NonFinite { term, step, .. }) => {
                assert_eq!(term, "bad");
                assert_eq!(step, 7);
            }
            Err(other) => panic!("expected NonFinite, got {other}"),
            Ok(_) => panic!("expected an error"),
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_mix: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
