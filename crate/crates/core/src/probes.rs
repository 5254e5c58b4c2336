// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer linear probes from residual activations to labels.
//!
//! Multinomial logistic regression on standardized features, fit by
//! full-batch gradient descent on mean cross-entropy plus `l2/2 * |W|^2`.
//! A step that would raise the loss is retried at half the learning rate,
//! so the recorded loss never increases.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cue::csv_field;
use crate::error::{CueError, Result};
use crate::rng;

/// Residual positions summarized into one probe input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    FinalToken,
    /// Mean over positions, BOS excluded.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// Trained probe for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub n_classes: usize,
    /// Standardization applied before the linear map.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `d x n_classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Training loss before the first step and after every epoch.
    pub loss_history: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Standardized problem in a form shared by training and gradient checks.
struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    l2: f64,
}

impl Problem<'_> {
    fn logits(&self, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let mut z = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.k..(i + 1) * self.k];
            z.iter_mut().zip(row).for_each(|(a, &wv)| *a += xi * wv);
        }
        z
    }

    fn loss(&self, w: &[f64], b: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        let mut total = 0.0;
        for (x, &y) in self.x.iter().zip(self.y) {
            let z = self.logits(w, b, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, w: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.x.len() as f64;
        let mut gw: Vec<f64> = w.iter().map(|v| self.l2 * v).collect();
        let mut gb = vec![0.0; self.k];
        for (x, &y) in self.x.iter().zip(self.y) {
            let mut p = self.logits(w, b, x);
            softmax_in_place(&mut p);
            p[y] -= 1.0;
            for (c, pc) in p.iter().enumerate() {
                gb[c] += pc / n;
            }
            for (i, &xi) in x.iter().enumerate() {
                for (c, pc) in p.iter().enumerate() {
                    gw[i * self.k + c] += xi * pc / n;
                }
            }
        }
        (gw, gb)
    }
}

fn check_matrix(features: &[Vec<f64>]) -> Result<usize> {
    let d = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| CueError::invalid("probe needs at least one sample"))?;
    if d == 0 {
        return Err(CueError::invalid("probe features are empty"));
    }
    for row in features {
        if row.len() != d {
            return Err(CueError::Dim {
                expected: d,
                got: row.len(),
                context: "probe feature row",
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CueError::Numeric("probe feature is not finite".into()));
        }
    }
    Ok(d)
}

/// Fits a probe on `features` (n x d) with integer labels in
/// `0..n_classes`; every class must appear.
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    hyper: &ProbeHyper,
) -> Result<LinearProbe> {
    let d = check_matrix(features)?;
    if labels.len() != features.len() {
        return Err(CueError::Dim {
            expected: features.len(),
            got: labels.len(),
            context: "probe labels",
        });
    }
    if n_classes < 2 || features.len() < n_classes {
        return Err(CueError::invalid(
            "probe needs at least two classes and n >= classes",
        ));
    }
    let mut seen = vec![false; n_classes];
    for &y in labels {
        *seen
            .get_mut(y)
            .ok_or_else(|| CueError::invalid(format!("label id {y} out of range")))? = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(CueError::invalid(format!(
            "label id {c} absent from training data"
        )));
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite() && hyper.l2 >= 0.0) {
        return Err(CueError::invalid(
            "probe lr must be positive and l2 non-negative",
        ));
    }
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|i| features.iter().map(|r| r[i]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|i| {
            let var = features
                .iter()
                .map(|r| (r[i] - mean[i]).powi(2))
                .sum::<f64>()
                / n;
            if var > 1e-24 {
                1.0 / var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|r| standardize(r, &mean, &scale))
        .collect();
    let prob = Problem {
        x: &xs,
        y: labels,
        k: n_classes,
        l2: hyper.l2,
    };
    let mut r = rng::seeded(rng::derive_seed(hyper.seed, "probe-init"));
    let mut w: Vec<f64> = (0..d * n_classes)
        .map(|_| 1e-3 * rng::normal(&mut r))
        .collect();
    let mut b = vec![0.0; n_classes];
    let mut loss = prob.loss(&w, &b);
    let mut history = vec![loss];
    let mut lr = hyper.lr;
    for _ in 0..hyper.epochs {
        let (gw, gb) = prob.gradient(&w, &b);
        loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect();
            let b2: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - lr * g).collect();
            let l2 = prob.loss(&w2, &b2);
            if !l2.is_finite() && lr < 1e-12 {
                return Err(CueError::Numeric("probe loss diverged".into()));
            }
            if l2 <= loss {
                w = w2;
                b = b2;
                loss = l2;
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
        history.push(loss);
    }
    Ok(LinearProbe {
        n_classes,
        mean,
        scale,
        weights: w,
        bias: b,
        loss_history: history,
    })
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((v, m), s)| (v - m) * s)
        .collect()
}

impl LinearProbe {
    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d() {
            return Err(CueError::Dim {
                expected: self.d(),
                got: x.len(),
                context: "probe input",
            });
        }
        let xs = standardize(x, &self.mean, &self.scale);
        let mut z = self.bias.clone();
        for (i, &xi) in xs.iter().enumerate() {
            let row = &self.weights[i * self.n_classes..(i + 1) * self.n_classes];
            z.iter_mut().zip(row).for_each(|(a, &w)| *a += xi * w);
        }
        let mut best = 0;
        for (c, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// Loss and analytic gradient of the probe objective at `(w, b)` on raw
/// (unstandardized) features; exposed for gradient checking.
pub fn loss_and_gradient(
    features: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    l2: f64,
    w: &[f64],
    b: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d = check_matrix(features)?;
    if w.len() != d * n_classes || b.len() != n_classes || labels.len() != features.len() {
        return Err(CueError::invalid("probe parameter shapes do not match"));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(CueError::invalid("label id out of range"));
    }
    let p = Problem {
        x: features,
        y: labels,
        k: n_classes,
        l2,
    };
    let (gw, gb) = p.gradient(w, b);
    Ok((p.loss(w, b), gw, gb))
}

fn check_lengths(predicted: &[usize], gold: &[usize], n_classes: usize) -> Result<()> {
    if predicted.len() != gold.len() {
        return Err(CueError::Dim {
            expected: gold.len(),
            got: predicted.len(),
            context: "predictions vs gold",
        });
    }
    if predicted.iter().chain(gold).any(|&c| c >= n_classes) {
        return Err(CueError::invalid("label id out of range"));
    }
    Ok(())
}

/// Entry `(g, p)` counts samples of gold `g` predicted as `p`.
pub fn confusion_matrix(
    predicted: &[usize],
    gold: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_lengths(predicted, gold, n_classes)?;
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &g) in predicted.iter().zip(gold) {
        m[g][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-label F1. Labels absent from both gold and
/// predictions are left out; a label predicted but never gold scores 0.
pub fn macro_f1(predicted: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    let m = confusion_matrix(predicted, gold, n_classes)?;
    if predicted.is_empty() {
        return Err(CueError::invalid("macro-F1 of an empty sample"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..n_classes {
        let tp = m[c][c];
        let gold_c: usize = m[c].iter().sum();
        let pred_c: usize = m.iter().map(|row| row[c]).sum();
        if gold_c == 0 && pred_c == 0 {
            continue;
        }
        used += 1;
        sum += 2.0 * tp as f64 / (gold_c + pred_c) as f64;
    }
    Ok(sum / used as f64)
}

/// Seeded stratified split: per label, `round(n_c * test_fraction)` test
/// samples, at least one whenever the label has two or more samples, and
/// never all of them. Returns sorted `(train, test)` indices.
pub fn stratified_split(
    labels: &[usize],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CueError::invalid("test fraction must be in [0, 1)"));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let mut r = rng::seeded(rng::derive_seed(seed, "probe-split"));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for members in by_label.values() {
        let n = members.len();
        let mut k = (n as f64 * test_fraction).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            k = k.clamp(1, n - 1);
        }
        k = k.min(n.saturating_sub(1));
        let order = rng::choose_distinct(&mut r, n, n);
        test.extend(order[..k].iter().map(|&j| members[j]));
        train.extend(order[k..].iter().map(|&j| members[j]));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Seeded uniform permutation of the label vector (permutation null).
pub fn shuffle_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut r = rng::seeded(rng::derive_seed(seed, "label-shuffle"));
    rng::choose_distinct(&mut r, labels.len(), labels.len())
        .into_iter()
        .map(|j| labels[j])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbeReport {
    pub layer: u32,
    pub macro_f1: f64,
    pub train_loss: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// `|C| x |C|`, rows gold, columns predicted.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub labels: Vec<String>,
    pub chance: f64,
    pub pooling: Pooling,
    pub hyper: ProbeHyper,
    pub layers: Vec<LayerProbeReport>,
}

/// Trains and evaluates one probe per layer on a shared stratified 80/20
/// split. `features[layer][i]` belongs to sample `i` with label
/// `labels[i]`.
pub fn run_probes(
    features: &BTreeMap<u32, Vec<Vec<f64>>>,
    labels: &[String],
    pooling: Pooling,
    hyper: &ProbeHyper,
) -> Result<ProbeReport> {
    let names: Vec<String> = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .cloned()
        .collect();
    let ids: Vec<usize> = labels
        .iter()
        .map(|l| names.binary_search(l).expect("collected above"))
        .collect();
    let k = names.len();
    let (train, test) = stratified_split(&ids, 0.2, hyper.seed)?;
    if test.is_empty() {
        return Err(CueError::invalid("probe test split is empty"));
    }
    let layers = features
        .par_iter()
        .map(|(&layer, rows)| {
            if rows.len() != ids.len() {
                return Err(CueError::Dim {
                    expected: ids.len(),
                    got: rows.len(),
                    context: "probe samples per layer",
                });
            }
            let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
                (
                    idx.iter().map(|&i| rows[i].clone()).collect(),
                    idx.iter().map(|&i| ids[i]).collect(),
                )
            };
            let (xtr, ytr) = pick(&train);
            let (xte, yte) = pick(&test);
            let probe = train_probe(&xtr, &ytr, k, hyper)?;
            let pred = probe.predict_all(&xte)?;
            Ok(LayerProbeReport {
                layer,
                macro_f1: macro_f1(&pred, &yte, k)?,
                train_loss: *probe.loss_history.last().expect("initial loss"),
                n_train: xtr.len(),
                n_test: xte.len(),
                confusion: confusion_matrix(&pred, &yte, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        chance: 1.0 / k as f64,
        labels: names,
        pooling,
        hyper: *hyper,
        layers,
    })
}

impl ProbeReport {
    pub fn layer(&self, layer: u32) -> Option<&LayerProbeReport> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Confusion matrix CSV with a `gold\predicted` corner cell.
    pub fn confusion_csv(&self, layer: u32) -> Option<String> {
        let rep = self.layer(layer)?;
        let mut out = String::from("gold\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&rep.confusion) {
            out.push_str(&csv_field(l));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Some(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CueError::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CueError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g = [0, 1, 2, 1];
        assert_eq!(macro_f1(&g, &g, 3).unwrap(), 1.0);
        let m = confusion_matrix(&g, &g, 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn all_one_label_two_classes() {
        let gold = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        assert!((macro_f1(&pred, &gold, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let m = confusion_matrix(&pred, &gold, 2).unwrap();
        assert_eq!(m, vec![vec![2, 0], vec![2, 0]]);
        assert_eq!(m.iter().flatten().sum::<usize>(), 4);
    }

    #[test]
    fn absent_label_excluded_but_spurious_counts() {
        // class 2 absent everywhere: excluded.
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 1.0);
        // class 2 predicted but never gold: F1 0.
        let f = macro_f1(&[0, 2], &[0, 1], 3).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn separable_clusters_fit() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let s = i as f64 * 0.01;
            x.push(vec![1.0 + s, -1.0]);
            y.push(0);
            x.push(vec![-1.0 - s, 1.0]);
            y.push(1);
        }
        let p = train_probe(&x, &y, 2, &ProbeHyper::default()).unwrap();
        assert_eq!(p.predict_all(&x).unwrap(), y);
        assert!(p.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constant_features_predict_majority() {
        let x = vec![vec![0.5, 0.5]; 7];
        let y = [0, 1, 1, 1, 0, 1, 2];
        let p = train_probe(&x, &y, 3, &ProbeHyper::default()).unwrap();
        assert!(p.predict_all(&x).unwrap().iter().all(|&c| c == 1));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let h = ProbeHyper::default();
        assert!(train_probe(&[], &[], 2, &h).is_err());
        assert!(train_probe(&[vec![1.0], vec![2.0]], &[0, 0], 2, &h).is_err());
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (tr, te) = stratified_split(&labels, 0.2, 3).unwrap();
        assert_eq!(te.len(), 10);
        assert_eq!(tr.len(), 40);
        for c in 0..5 {
            assert_eq!(te.iter().filter(|&&i| labels[i] == c).count(), 2);
        }
        assert_eq!(stratified_split(&labels, 0.2, 3).unwrap(), (tr, te));
    }
}
