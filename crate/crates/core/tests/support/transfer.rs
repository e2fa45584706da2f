//! Measurements for the toy end-to-end training checks: per-domain FID of a
//! translated corpus, oracle-judged target-domain rate of cross-domain
//! translations, and identity versus inter-domain pixel error.

use midgan_core::eval::{fid, FeatureEmbedder, GaussianStats};
use midgan_core::networks::ModelBundle;
use midgan_core::toy_data::{DatasetSplit, ImageSet};

use super::oracle::Oracle;

#[derive(Debug, Clone)]
pub struct Transfer {
    pub fid: Vec<f64>,
    pub target_rate: f64,
    pub identity_mse: f64,
    pub inter_domain_mse: f64,
    /// `confusion[target][predicted]` over cross-domain translations.
    pub confusion: Vec<Vec<usize>>,
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn stats(embedder: &FeatureEmbedder, set: &ImageSet) -> GaussianStats {
    let mut rows = Vec::new();
    for b in set.chunks(128) {
        rows.extend(embedder.embed_batch(&b));
    }
    GaussianStats::from_features(&rows).unwrap()
}

/// Trains the oracle on the training reals and returns it with its held-out accuracy.
pub fn fit_oracle(train: &ImageSet, test: &ImageSet, classes: usize) -> (Oracle, f64) {
    let imgs: Vec<&[f32]> = (0..train.len()).map(|i| train.image(i)).collect();
    let oracle = Oracle::fit(&imgs, &train.labels, classes, train.size);
    let timgs: Vec<&[f32]> = (0..test.len()).map(|i| test.image(i)).collect();
    let acc = oracle.accuracy(&timgs, &test.labels);
    (oracle, acc)
}

/// Translates every held-out image into every domain and scores the result.
pub fn measure(
    bundle: &ModelBundle<f32>,
    split: &DatasetSplit,
    test: &ImageSet,
    oracle: &Oracle,
    embedder: &FeatureEmbedder,
) -> Transfer {
    let k = split.domains.len();
    let n = test.len();
    let per = test.channels * test.size * test.size;
    let mut by_target: Vec<Vec<f32>> = vec![Vec::new(); k];
    let mut labels_by_target: Vec<Vec<usize>> = vec![Vec::new(); k];
    let (mut hits, mut cross) = (0usize, 0usize);
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut id_err, mut id_n) = (0.0, 0usize);
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let batch = test.batch(&idx);
        for c in 0..k {
            let out = bundle
                .translate_tensor(&batch.data, &batch.labels, &vec![c; idx.len()])
                .unwrap();
            for (j, &s) in batch.labels.iter().enumerate() {
                let img = &out.data()[j * per..(j + 1) * per];
                if s == c {
                    id_err += mse(img, test.image(idx[j]));
                    id_n += 1;
                } else {
                    cross += 1;
                    let p = oracle.predict(img);
                    confusion[c][p] += 1;
                    hits += usize::from(p == c);
                    by_target[c].extend_from_slice(img);
                    labels_by_target[c].push(c);
                }
            }
        }
    }
    let mut fids = Vec::new();
    for c in 0..k {
        let synth = ImageSet::from_batch(&midgan_core::toy_data::ImageBatch {
            data: midgan_core::Tensor::from_vec(
                &[labels_by_target[c].len(), test.channels, test.size, test.size],
                by_target[c].clone(),
            ),
            labels: labels_by_target[c].clone(),
        });
        let real_idx = test.indices_of(c);
        let real = ImageSet::from_batch(&test.batch(&real_idx));
        fids.push(fid(&stats(embedder, &real), &stats(embedder, &synth)).unwrap());
    }
    let (mut inter, mut inter_n) = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1..n).step_by(7) {
            if test.labels[i] != test.labels[j] {
                inter += mse(test.image(i), test.image(j));
                inter_n += 1;
            }
        }
    }
    Transfer {
        fid: fids,
        target_rate: hits as f64 / cross as f64,
        identity_mse: id_err / id_n as f64,
        inter_domain_mse: inter / inter_n as f64,
        confusion,
    }
}
