#![allow(dead_code)]

use eqcbm::datagen::SyntheticDataset;

/// Per-concept test accuracy of plain logistic regression on the raw
/// features, fit by full-batch gradient descent.
pub fn logistic_concept_accuracy(train: &SyntheticDataset, test: &SyntheticDataset) -> Vec<f64> {
    let dim = train.input_dim();
    (0..train.num_concepts)
        .map(|k| {
            let mut w = vec![0.0f64; dim + 1];
            let n = train.len() as f64;
            for _ in 0..300 {
                let mut grad = vec![0.0; dim + 1];
                for i in 0..train.len() {
                    let x = train.features(i);
                    let y = train.concepts(i)[k] as f64;
                    let z = w[dim] + x.iter().zip(&w).map(|(a, b)| *a as f64 * b).sum::<f64>();
                    let r = 1.0 / (1.0 + (-z).exp()) - y;
                    for (g, a) in grad.iter_mut().zip(x) {
                        *g += r * *a as f64;
                    }
                    grad[dim] += r;
                }
                for (wj, g) in w.iter_mut().zip(&grad) {
                    *wj -= 0.5 * g / n;
                }
            }
            let correct = (0..test.len())
                .filter(|&i| {
                    let x = test.features(i);
                    let z = w[dim] + x.iter().zip(&w).map(|(a, b)| *a as f64 * b).sum::<f64>();
                    (z > 0.0) == (test.concepts(i)[k] == 1)
                })
                .count();
            correct as f64 / test.len() as f64
        })
        .collect()
}

/// Expected accuracy of the best possible classifier that sees only the
/// observed (bit-flipped) concept vector, with uniform class prior.
pub fn concept_only_bayes_accuracy(ds: &SyntheticDataset, flip: f64) -> f64 {
    let k = ds.num_concepts;
    let m = ds.num_classes;
    let mut total = 0.0;
    for pattern in 0u32..(1 << k) {
        let best = (0..m)
            .map(|y| {
                let proto = ds.prototype(y);
                let d = (0..k).filter(|&j| ((pattern >> j) & 1) as u8 != proto[j]).count() as i32;
                flip.powi(d) * (1.0 - flip).powi(k as i32 - d)
            })
            .fold(0.0, f64::max);
        total += best / m as f64;
    }
    total
}

/// Best accuracy any function of the observed concepts can reach on this
/// exact sample: per distinct concept pattern, the majority label.
pub fn concept_only_ceiling(ds: &SyntheticDataset) -> f64 {
    let mut counts = std::collections::BTreeMap::<Vec<u8>, Vec<usize>>::new();
    for i in 0..ds.len() {
        counts
            .entry(ds.concepts(i).to_vec())
            .or_insert_with(|| vec![0; ds.num_classes])[ds.label(i)] += 1;
    }
    let best: usize = counts.values().map(|c| *c.iter().max().unwrap()).sum();
    best as f64 / ds.len() as f64
}
