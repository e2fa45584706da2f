//! Properties of the toy domains, the forward noising process and the loss
//! terms, checked against closed forms and independent feature measurements.

mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use midgan_core::autodiff::Graph;
use midgan_core::diffusion::{build_schedule, diffuse, AdaptiveDiffusionState, DiffusionConfig};
use midgan_core::losses::{adv_loss_d, adv_loss_g, domain_loss, path_penalty, style_mix_loss};
use midgan_core::rng::stream_rng;
use midgan_core::toy_data::{byte_to_unit, render_sample, DomainEffect, ToyDomainSpec};
use midgan_core::Tensor;

use support::oracle::features;

fn render(effect: DomainEffect, index: u64, size: usize) -> Vec<f32> {
    let spec = ToyDomainSpec { image_size: size, domain_effect: effect, seed: 9, ..ToyDomainSpec::default() };
    render_sample(&spec, index).unwrap().into_iter().map(byte_to_unit).collect()
}

#[test]
fn overlays_carry_their_defining_signatures() {
    for size in [32, 64] {
        let (mut halftone, mut rings) = (0, 0);
        for i in 0..40 {
            let plain = features(&render(DomainEffect::None, i, size), size);
            let print = features(&render(DomainEffect::HalftoneOverlay, i, size), size);
            let lens = features(&render(DomainEffect::RingOverlay, i, size), size);
            halftone += usize::from(print[2] > plain[2] + 1.0);
            rings += usize::from(lens[3] > plain[3] + 0.2);
            // Printing compresses contrast everywhere; the lens leaves the
            // sclera untouched, so the image corners are unchanged.
            assert!(print[1] < plain[1], "sample {i}: contrast {} vs {}", print[1], plain[1]);
            let (p, l) = (render(DomainEffect::None, i, size), render(DomainEffect::RingOverlay, i, size));
            for corner in [0, size - 1, size * (size - 1), size * size - 1] {
                assert_eq!(p[corner], l[corner], "sample {i}");
            }
        }
        assert!(halftone >= 38, "{size}px: halftone visible in {halftone}/40");
        assert!(rings >= 36, "{size}px: rings visible in {rings}/40");
    }
}

#[test]
fn overlays_share_the_underlying_eye() {
    let plain = render(DomainEffect::None, 3, 32);
    let again = render(DomainEffect::None, 3, 32);
    assert_eq!(plain, again);
    let other = render(DomainEffect::None, 4, 32);
    assert_ne!(plain, other);
    let print = render(DomainEffect::HalftoneOverlay, 3, 32);
    let corr = correlation(&plain, &print);
    assert!(corr > 0.8, "correlation {corr}");
}

fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().map(|&v| v as f64).sum::<f64>() / n, b.iter().map(|&v| v as f64).sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - ma) * (y as f64 - mb)).sum();
    let va: f64 = a.iter().map(|&x| (x as f64 - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|&y| (y as f64 - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retention_matches_product_of_linear_betas(
        t_max in 2usize..200,
        beta_min in 1e-5f64..1e-2,
        spread in 0.0f64..0.05,
    ) {
        let beta_max = beta_min + spread;
        let s = build_schedule(t_max, beta_min, beta_max, 0.1).unwrap();
        let mut acc = 1.0f64;
        prop_assert_eq!(s.retention[0], 1.0);
        for k in 1..=t_max {
            acc *= 1.0 - (beta_min + (beta_max - beta_min) * (k - 1) as f64 / (t_max - 1) as f64);
            prop_assert!((s.retention[k] - acc).abs() < 1e-12);
            prop_assert!(s.retention[k] <= s.retention[k - 1]);
        }
    }

    #[test]
    fn adaptive_schedule_stays_in_bounds(
        t_min in 1usize..20,
        extra in 0usize..60,
        c_step in 1usize..5,
        outputs in prop::collection::vec(0.0f64..1.0, 1..300),
    ) {
        let cfg = DiffusionConfig { t_min, t_max: t_min + extra, c_step, ..DiffusionConfig::default() };
        let mut s = AdaptiveDiffusionState::new(&cfg);
        let mut updates = 0;
        for (i, o) in outputs.iter().enumerate() {
            let up = s.record_batch(&[*o]);
            prop_assert_eq!(up.is_some(), (i + 1) % 4 == 0);
            updates += usize::from(up.is_some());
            prop_assert!((t_min..=t_min + extra).contains(&s.t_current));
        }
        prop_assert_eq!(updates, outputs.len() / 4);
    }

    #[test]
    fn adversarial_losses_match_closed_forms(d_real in 0.01f64..0.99, d_fake in 0.01f64..0.99) {
        let g = Graph::<f64>::new();
        let r = || g.constant(Tensor::full(&[3], d_real));
        let f = || g.constant(Tensor::full(&[3], d_fake));
        let expect_d = -(d_real.ln() + (1.0 - d_fake).ln());
        prop_assert!((adv_loss_d(r(), f()).item() - expect_d).abs() < 1e-12);
        prop_assert!((adv_loss_g(f(), false).item() + d_fake.ln()).abs() < 1e-12);
        prop_assert!((adv_loss_g(f(), true).item() - (1.0 - d_fake).ln()).abs() < 1e-12);
    }

    #[test]
    fn domain_loss_is_softmax_cross_entropy(
        logits in prop::collection::vec(-5.0f64..5.0, 12),
        labels in prop::collection::vec(0usize..3, 4),
    ) {
        let g = Graph::<f64>::new();
        let got = domain_loss(g.constant(Tensor::from_vec(&[4, 3], logits.clone())), &labels).unwrap().item();
        let mut expect = 0.0;
        for (row, &y) in logits.chunks(3).zip(&labels) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[y];
        }
        prop_assert!((got - expect / 4.0).abs() < 1e-10);
    }
}

#[test]
fn domain_loss_rejects_bad_labels() {
    let g = Graph::<f64>::new();
    let logits = || g.constant(Tensor::full(&[2, 3], 0.0));
    assert!(domain_loss(logits(), &[0, 3]).is_err());
    assert!(domain_loss(logits(), &[0]).is_err());
}

#[test]
fn regularizers_match_definitions() {
    let g = Graph::<f64>::new();
    let lengths = g.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]));
    assert!((path_penalty(lengths, 2.5).item() - 1.25).abs() < 1e-12);
    let a = g.constant(Tensor::full(&[2, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::full(&[2, 1, 2, 2], 0.5));
    assert!((style_mix_loss(a, b, 4).unwrap().item() - 1.0).abs() < 1e-12);
}

#[test]
fn diffusion_is_reproducible_and_keeps_t_zero_clean() {
    let cfg = DiffusionConfig::default();
    let schedule = cfg.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::from_vec(&[3, 1, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
    let a = diffuse(&x, &[0, 10, 64], &schedule, &mut stream_rng(5, 0)).unwrap();
    let b = diffuse(&x, &[0, 10, 64], &schedule, &mut stream_rng(5, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a.data()[..16], &x.data()[..16]);
    assert!(diffuse(&x, &[0, 10, 65], &schedule, &mut stream_rng(5, 0)).is_err());
    assert!(diffuse(&x, &[0, 10], &schedule, &mut stream_rng(5, 0)).is_err());
}
