//! Independent domain classifier for toy images. Its features measure the
//! signatures that define each toy domain (a period-4 halftone grid and
//! period-6 concentric rings around the pupil) plus brightness and contrast,
//! and feed a multinomial logistic regression. It shares no code with the
//! networks under test.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// 2-D power spectrum of a mean-removed square image, row-major.
fn power_spectrum(plane: &[f32], size: usize, mean: f64) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let mut grid: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v as f64 - mean, 0.0)).collect();
    for row in grid.chunks_exact_mut(size) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); size];
    for x in 0..size {
        for y in 0..size {
            col[y] = grid[y * size + x];
        }
        fft.process(&mut col);
        for y in 0..size {
            grid[y * size + x] = col[y];
        }
    }
    grid.iter().map(|c| c.norm_sqr()).collect()
}

/// Share of non-DC spectral power at the halftone grid frequencies.
fn halftone_share(power: &[f64], size: usize) -> f64 {
    let q = size / 4;
    let total: f64 = power.iter().skip(1).sum::<f64>().max(1e-12);
    let mut peak = 0.0;
    for (fy, fx) in [(0, q), (q, 0), (q, q)] {
        for (sy, sx) in [(fy, fx), ((size - fy) % size, (size - fx) % size), (fy, (size - fx) % size), ((size - fy) % size, fx)] {
            peak += power[sy * size + sx];
        }
    }
    // The symmetric copies double count the axis peaks; only the ratio matters.
    peak / total
}

/// Strength of the 6-pixel-period oscillation in the radial profile around the
/// pupil: its amplitude, and its ratio to the amplitude at nearby periods.
/// The profile is detrended first so the iris edge does not register.
fn ring_score(plane: &[f32], size: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..plane.len()).collect();
    order.sort_by(|&a, &b| plane[a].total_cmp(&plane[b]));
    let dark = (plane.len() / 32).max(1);
    let (mut cx, mut cy) = (0.0, 0.0);
    for &i in &order[..dark] {
        cx += (i % size) as f64 + 0.5;
        cy += (i / size) as f64 + 0.5;
    }
    cx /= dark as f64;
    cy /= dark as f64;
    let scale = size as f64 / 32.0;
    let bin = 0.5;
    let (r_lo, r_hi) = (3.0 * scale, 14.0 * scale);
    let bins = ((r_hi - r_lo) / bin) as usize;
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for y in 0..size {
        for x in 0..size {
            let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            if r >= r_lo && r < r_hi {
                let k = ((r - r_lo) / bin) as usize;
                sum[k] += plane[y * size + x] as f64;
                count[k] += 1;
            }
        }
    }
    let profile: Vec<Option<f64>> = sum.iter().zip(&count).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect();
    let half = 6;
    let mut residual = Vec::new();
    for i in half..bins.saturating_sub(half) {
        let Some(v) = profile[i] else { continue };
        let window: Vec<f64> = profile[i - half..=i + half].iter().flatten().copied().collect();
        let trend = window.iter().sum::<f64>() / window.len() as f64;
        residual.push((r_lo + (i as f64 + 0.5) * bin, v - trend));
    }
    let amplitude = |period: f64| {
        let (mut a, mut b) = (0.0, 0.0);
        for &(r, v) in &residual {
            let phase = std::f64::consts::TAU * r / period;
            a += v * phase.cos();
            b += v * phase.sin();
        }
        2.0 * (a * a + b * b).sqrt() / residual.len().max(1) as f64
    };
    let ring = amplitude(6.0);
    let others = (amplitude(4.0) + amplitude(9.0)) / 2.0;
    (ring, ring / (others + 1e-4))
}

/// Brightness, contrast, halftone share and ring strength of a square
/// single-channel image.
pub fn features(plane: &[f32], size: usize) -> Vec<f64> {
    let n = (size * size) as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let power = power_spectrum(plane, size, mean);
    let (ring_amp, ring_rel) = ring_score(plane, size);
    vec![
        mean,
        sd,
        (halftone_share(&power, size) + 1e-6).ln(),
        (ring_amp + 1e-6).ln(),
        ring_rel.ln(),
    ]
}

/// Softmax regression on standardized features, trained by full-batch
/// gradient descent.
pub struct Oracle {
    mu: Vec<f64>,
    sd: Vec<f64>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    size: usize,
}

impl Oracle {
    pub fn fit(images: &[&[f32]], labels: &[usize], classes: usize, size: usize) -> Self {
        let raw: Vec<Vec<f64>> = images.iter().map(|p| features(p, size)).collect();
        let d = raw[0].len();
        let n = raw.len() as f64;
        let mu: Vec<f64> = (0..d).map(|j| raw.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| (raw.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
            .collect();
        let xs: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect())
            .collect();
        let mut w = vec![vec![0.0; d]; classes];
        let mut b = vec![0.0; classes];
        for _ in 0..800 {
            let mut gw = vec![vec![0.0; d]; classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = softmax(&w, &b, x);
                for k in 0..classes {
                    let e = p[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += e;
                    for j in 0..d {
                        gw[k][j] += e * x[j];
                    }
                }
            }
            for k in 0..classes {
                b[k] -= 0.5 * gb[k] / n;
                for j in 0..d {
                    w[k][j] -= 0.5 * (gw[k][j] / n + 1e-4 * w[k][j]);
                }
            }
        }
        Self { mu, sd, w, b, size }
    }

    pub fn predict(&self, plane: &[f32]) -> usize {
        let x: Vec<f64> = features(plane, self.size)
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.mu[j]) / self.sd[j])
            .collect();
        let p = softmax(&self.w, &self.b, &x);
        (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).expect("classes")
    }

    pub fn accuracy(&self, images: &[&[f32]], labels: &[usize]) -> f64 {
        let hits = images.iter().zip(labels).filter(|(p, &y)| self.predict(p) == y).count();
        hits as f64 / labels.len() as f64
    }
}

fn softmax(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = w
        .iter()
        .zip(b)
        .map(|(wk, bk)| bk + wk.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
