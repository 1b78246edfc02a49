//! Full-batch linear learners: L2 logistic regression and a primal
//! hinge-loss SVM calibrated with Platt scaling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Hyperparameters, LearnerError, MemberModel, MemberParams, TrainingSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearParams {
    pub fn zeros(dims: usize) -> Self {
        Self { weights: vec![0.0; dims], bias: 0.0 }
    }

    pub fn margin(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.weights.len() {
            return Err(LearnerError::DimensionMismatch { expected: self.weights.len(), got: x.len() });
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean log-loss plus `l2/2 * |w|²` (bias unregularized), and its gradient
/// `(dw, db)`.
pub fn logistic_objective(p: &LinearParams, set: &TrainingSet, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = set.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; set.dims];
    let mut grad_b = 0.0;
    for (x, &y) in set.rows().zip(&set.labels) {
        let z = p.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p.bias;
        // -log σ(z) for positives, -log(1-σ(z)) for negatives
        loss += if y { softplus(-z) } else { softplus(z) };
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, v) in grad.iter_mut().zip(x) {
            *g += r * v;
        }
        grad_b += r;
    }
    let reg: f64 = p.weights.iter().map(|w| w * w).sum::<f64>();
    loss = loss / n + 0.5 * l2 * reg;
    for (g, w) in grad.iter_mut().zip(&p.weights) {
        *g = *g / n + l2 * w;
    }
    (loss, grad, grad_b / n)
}

/// Gradient descent with Armijo backtracking; the step grows back by 2x after
/// every accepted iteration.
fn minimize_logistic(set: &TrainingSet, l2: f64, lr: f64, epochs: usize) -> LinearParams {
    let mut p = LinearParams::zeros(set.dims);
    let mut step = lr;
    let (mut loss, mut grad, mut grad_b) = logistic_objective(&p, set, l2);
    for _ in 0..epochs {
        let gnorm2 = grad.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b;
        if gnorm2 < 1e-20 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = LinearParams {
                weights: p.weights.iter().zip(&grad).map(|(w, g)| w - step * g).collect(),
                bias: p.bias - step * grad_b,
            };
            let (l, g, gb) = logistic_objective(&cand, set, l2);
            if l <= loss - 0.5 * step * gnorm2 {
                p = cand;
                loss = l;
                grad = g;
                grad_b = gb;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    p
}

pub fn train_logistic(set: &TrainingSet, l2: f64, lr: f64, epochs: usize, seed: u64) -> Result<MemberModel, LearnerError> {
    set.require_both_classes()?;
    let p = minimize_logistic(set, l2, lr, epochs);
    Ok(MemberModel { params: MemberParams::Logistic(p), hyperparameters: Hyperparameters::Linear { l2, lr, epochs }, seed })
}

fn hinge_objective(p: &LinearParams, set: &TrainingSet, l2: f64) -> f64 {
    let n = set.len() as f64;
    let hinge: f64 = set
        .rows()
        .zip(&set.labels)
        .map(|(x, &y)| {
            let m = p.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p.bias;
            (1.0 - if y { m } else { -m }).max(0.0)
        })
        .sum();
    hinge / n + 0.5 * l2 * p.weights.iter().map(|w| w * w).sum::<f64>()
}

/// Primal subgradient descent on mean hinge loss + `l2/2 |w|²`. Steps are
/// `min(lr / sqrt(t), 1 / l2)`; the best iterate by objective is kept.
fn minimize_hinge(set: &TrainingSet, l2: f64, lr: f64, epochs: usize) -> LinearParams {
    let n = set.len() as f64;
    let mut p = LinearParams::zeros(set.dims);
    let mut best = p.clone();
    let mut best_obj = hinge_objective(&p, set, l2);
    for t in 1..=epochs {
        let mut gw: Vec<f64> = p.weights.iter().map(|w| l2 * w).collect();
        let mut gb = 0.0;
        for (x, &y) in set.rows().zip(&set.labels) {
            let sign = if y { 1.0 } else { -1.0 };
            let m = p.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + p.bias;
            if sign * m < 1.0 {
                for (g, v) in gw.iter_mut().zip(x) {
                    *g -= sign * v / n;
                }
                gb -= sign / n;
            }
        }
        let mut eta = lr / (t as f64).sqrt();
        if l2 > 0.0 {
            eta = eta.min(1.0 / l2);
        }
        for (w, g) in p.weights.iter_mut().zip(&gw) {
            *w -= eta * g;
        }
        p.bias -= eta * gb;
        let obj = hinge_objective(&p, set, l2);
        if obj < best_obj {
            best_obj = obj;
            best = p.clone();
        }
    }
    best
}

/// Fit `(a, b)` so that `sigmoid(a * margin + b)` matches the labels, using
/// Platt's smoothed targets and Newton steps with a backtracking guard.
pub(crate) fn fit_platt(margins: &[f64], labels: &[bool]) -> (f64, f64) {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        margins.iter().zip(&targets).map(|(m, t)| {
            let z = a * m + b;
            t * softplus(-z) + (1.0 - t) * softplus(z)
        }).sum()
    };
    let (mut a, mut b) = (1.0, 0.0);
    let mut f = objective(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (m, t) in margins.iter().zip(&targets) {
            let p = sigmoid(a * m + b);
            let r = p - t;
            let w = p * (1.0 - p);
            ga += r * m;
            gb += r;
            haa += w * m * m;
            hab += w * m;
            hbb += w;
        }
        if ga.abs() < 1e-10 && gb.abs() < 1e-10 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det.abs() > 1e-300 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga, gb)
        };
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = objective(na, nb);
            if nf < f {
                a = na;
                b = nb;
                f = nf;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

const PLATT_FOLDS: usize = 3;

pub fn train_linear_svm(set: &TrainingSet, l2: f64, lr: f64, epochs: usize, seed: u64) -> Result<MemberModel, LearnerError> {
    set.require_both_classes()?;
    let linear = minimize_hinge(set, l2, lr, epochs);

    // Out-of-fold margins for calibration; stratified so every training part
    // keeps both classes. Tiny classes fall back to in-sample margins.
    let pos: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i]).collect();
    let neg: Vec<usize> = (0..set.len()).filter(|&i| !set.labels[i]).collect();
    let margins: Vec<f64> = if pos.len() >= PLATT_FOLDS && neg.len() >= PLATT_FOLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fold_of = vec![0usize; set.len()];
        for class in [pos, neg] {
            let mut idx = class;
            idx.shuffle(&mut rng);
            for (k, i) in idx.into_iter().enumerate() {
                fold_of[i] = k % PLATT_FOLDS;
            }
        }
        let mut m = vec![0.0; set.len()];
        for f in 0..PLATT_FOLDS {
            let train_idx: Vec<usize> = (0..set.len()).filter(|&i| fold_of[i] != f).collect();
            let fold_model = minimize_hinge(&set.subset(&train_idx), l2, lr, epochs);
            for i in (0..set.len()).filter(|&i| fold_of[i] == f) {
                m[i] = fold_model.margin(set.row(i))?;
            }
        }
        m
    } else {
        set.rows().map(|x| linear.margin(x)).collect::<Result<_, _>>()?
    };
    let (platt_a, platt_b) = fit_platt(&margins, &set.labels);
    Ok(MemberModel {
        params: MemberParams::LinearSvm { linear, platt_a, platt_b },
        hyperparameters: Hyperparameters::Linear { l2, lr, epochs },
        seed,
    })
}
