//! Combining query answers into a prediction.
//!
//! [`train_logistic`] fits an L2-regularized logistic regression by
//! full-batch gradient descent on standardized features;
//! [`likelihood_ratio_predict`] is the fixed rule of the differential attack.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer used by [`train_logistic`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Exactly `iterations` fixed-step gradient steps from zero.
    #[default]
    GradientDescent,
    /// Damped Newton steps from zero until the Newton decrement vanishes or
    /// `iterations` steps were taken. `learning_rate` is unused.
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2_lambda: f64,
    pub solver: Solver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            iterations: 500,
            l2_lambda: 1e-4,
            solver: Solver::GradientDescent,
        }
    }
}

/// A dense `rows × cols` matrix stored column-major, one column per query.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::InvalidParameter("ragged feature columns".into()));
        }
        Ok(FeatureMatrix {
            rows,
            cols: columns.len(),
            data: columns.concat(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged feature rows".into()));
        }
        let mut m = FeatureMatrix::zeros(rows.len(), cols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[col * self.rows + row] = v;
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(row, j)).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(cols.len() * self.rows);
        for &c in cols {
            data.extend_from_slice(self.column(c));
        }
        FeatureMatrix {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log(sigmoid(z))` without overflow.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Mean log loss plus `lambda/2 · |w|^2` over a standardized matrix.
#[derive(Clone, Debug)]
pub struct LogisticObjective {
    x: FeatureMatrix,
    y: Vec<f64>,
    lambda: f64,
}

impl LogisticObjective {
    pub fn new(x: FeatureMatrix, labels: &[u8], lambda: f64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::InvalidParameter(
                "feature rows and labels differ in length".into(),
            ));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidParameter("labels must be 0 or 1".into()));
        }
        Ok(LogisticObjective {
            x,
            y: labels.iter().map(|&l| f64::from(l)).collect(),
            lambda,
        })
    }

    fn margins(&self, weights: &[f64], bias: f64) -> Vec<f64> {
        let mut z = vec![bias; self.x.rows()];
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (zi, xi) in z.iter_mut().zip(self.x.column(j)) {
                    *zi += w * xi;
                }
            }
        }
        z
    }

    pub fn loss(&self, weights: &[f64], bias: f64) -> f64 {
        let n = self.x.rows() as f64;
        let data: f64 = self
            .margins(weights, bias)
            .iter()
            .zip(&self.y)
            .map(|(&z, &y)| y * softplus_neg(z) + (1.0 - y) * softplus_neg(-z))
            .sum();
        data / n + 0.5 * self.lambda * weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Gradient with respect to the weights and the (unregularized) bias.
    pub fn gradient(&self, weights: &[f64], bias: f64) -> (Vec<f64>, f64) {
        let n = self.x.rows() as f64;
        let residual: Vec<f64> = self
            .margins(weights, bias)
            .iter()
            .zip(&self.y)
            .map(|(&z, &y)| sigmoid(z) - y)
            .collect();
        let gw = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let dot: f64 = self.x.column(j).iter().zip(&residual).map(|(x, r)| x * r).sum();
                dot / n + self.lambda * w
            })
            .collect();
        let gb = residual.iter().sum::<f64>() / n;
        (gw, gb)
    }

    /// Hessian over `(weights, bias)`, bias last.
    pub fn hessian(&self, weights: &[f64], bias: f64) -> DMatrix<f64> {
        let n = self.x.rows();
        let m = weights.len();
        let curvature: Vec<f64> = self
            .margins(weights, bias)
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                p * (1.0 - p) / n as f64
            })
            .collect();
        let ones = vec![1.0; n];
        let column = |j: usize| if j < m { self.x.column(j) } else { &ones[..] };
        let mut h = DMatrix::zeros(m + 1, m + 1);
        for a in 0..=m {
            for b in a..=m {
                let (xa, xb) = (column(a), column(b));
                let v: f64 = (0..n).map(|i| curvature[i] * xa[i] * xb[i]).sum();
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        for j in 0..m {
            h[(j, j)] += self.lambda;
        }
        h
    }
}

fn gradient_descent(objective: &LogisticObjective, config: &TrainConfig, m: usize) -> (Vec<f64>, f64) {
    let mut weights = vec![0.0; m];
    let mut bias = 0.0;
    for _ in 0..config.iterations {
        let (gw, gb) = objective.gradient(&weights, bias);
        for (w, g) in weights.iter_mut().zip(gw) {
            *w -= config.learning_rate * g;
        }
        bias -= config.learning_rate * gb;
    }
    (weights, bias)
}

fn newton(objective: &LogisticObjective, config: &TrainConfig, m: usize) -> (Vec<f64>, f64) {
    let mut weights = vec![0.0; m];
    let mut bias = 0.0;
    let mut loss = objective.loss(&weights, bias);
    for _ in 0..config.iterations {
        let (gw, gb) = objective.gradient(&weights, bias);
        let g = DVector::from_iterator(m + 1, gw.into_iter().chain([gb]));
        let mut h = objective.hessian(&weights, bias);
        for j in 0..=m {
            h[(j, j)] += 1e-10;
        }
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&g);
        let decrement = g.dot(&step);
        if decrement.is_nan() || decrement <= 1e-14 {
            break;
        }
        let mut t = 1.0;
        let accepted = loop {
            let w: Vec<f64> = weights.iter().zip(step.iter()).map(|(w, d)| w - t * d).collect();
            let b = bias - t * step[m];
            let l = objective.loss(&w, b);
            if l <= loss - 1e-4 * t * decrement {
                break Some((w, b, l));
            }
            t *= 0.5;
            if t < 1e-10 {
                break None;
            }
        };
        match accepted {
            Some((w, b, l)) => {
                weights = w;
                bias = b;
                loss = l;
            }
            None => break,
        }
    }
    (weights, bias)
}

fn standardize(features: &FeatureMatrix) -> (FeatureMatrix, Vec<f64>, Vec<f64>) {
    let n = features.rows() as f64;
    let mut means = Vec::with_capacity(features.cols());
    let mut stds = Vec::with_capacity(features.cols());
    let mut out = features.clone();
    for j in 0..features.cols() {
        let col = features.column(j);
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let constant = std.is_nan() || std <= 1e-12;
        means.push(mean);
        stds.push(if constant { 1.0 } else { std });
        for (i, v) in col.iter().enumerate() {
            let z = if constant { 0.0 } else { (v - mean) / std };
            out.set(i, j, z);
        }
    }
    (out, means, stds)
}

/// Fits a model from zero weights with the configured solver.
pub fn train_logistic(
    features: &FeatureMatrix,
    labels: &[u8],
    config: &TrainConfig,
) -> Result<LogisticModel> {
    if features.rows() == 0 {
        return Err(Error::InsufficientData(
            "cannot train on zero examples".into(),
        ));
    }
    let (x, means, stds) = standardize(features);
    let objective = LogisticObjective::new(x, labels, config.l2_lambda)?;
    let (weights, bias) = match config.solver {
        Solver::GradientDescent => gradient_descent(&objective, config, features.cols()),
        Solver::Newton => newton(&objective, config, features.cols()),
    };
    Ok(LogisticModel {
        weights,
        bias,
        feature_means: means,
        feature_stds: stds,
    })
}

impl LogisticModel {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Probability of label 1 for one answer vector.
    pub fn probability(&self, answers: &[f64]) -> f64 {
        let z = self.bias
            + answers
                .iter()
                .enumerate()
                .map(|(j, &a)| {
                    self.weights[j] * (a - self.feature_means[j]) / self.feature_stds[j]
                })
                .sum::<f64>();
        sigmoid(z)
    }

    /// Probability and label; probability 0.5 predicts 1.
    pub fn predict(&self, answers: &[f64]) -> (f64, u8) {
        let p = self.probability(answers);
        (p, u8::from(p >= 0.5))
    }

    pub fn predict_matrix(&self, features: &FeatureMatrix) -> Vec<u8> {
        (0..features.rows())
            .map(|i| self.predict(&features.row(i)).1)
            .collect()
    }

    pub fn accuracy(&self, features: &FeatureMatrix, labels: &[u8]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let correct = self
            .predict_matrix(features)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        correct as f64 / labels.len() as f64
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Absolute standardized weight per query position.
pub fn query_importance(model: &LogisticModel) -> Vec<f64> {
    model.weights.iter().map(|w| w.abs()).collect()
}

fn log_normal_density(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - (x - mean).powi(2) / (2.0 * variance)
}

/// Likelihood-ratio decision between `N(0, 2)` (target not counted, predict
/// `1 - v_n`) and `N(1, 2l + 2)` (predict `v_n`), as (mean, variance).
pub fn likelihood_ratio_predict(delta: f64, l: usize, v_n: u8) -> u8 {
    let h0 = log_normal_density(delta, 0.0, 2.0);
    let h1 = log_normal_density(delta, 1.0, 2.0 * l as f64 + 2.0);
    if h1 > h0 {
        v_n
    } else {
        1 - v_n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable() -> (FeatureMatrix, Vec<u8>) {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let noise: Vec<f64> = (0..40).map(|i| ((i * 7) % 5) as f64).collect();
        let signal: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        (FeatureMatrix::from_columns(40, &[noise, signal]).unwrap(), labels)
    }

    #[test]
    fn no_iterations_gives_half() {
        let (x, y) = separable();
        let config = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let model = train_logistic(&x, &y, &config).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
        assert_eq!(model.predict(&x.row(0)), (0.5, 1));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let x = FeatureMatrix::zeros(0, 3);
        assert!(train_logistic(&x, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn separable_feature_is_learned_and_most_important() {
        let (x, y) = separable();
        let model = train_logistic(&x, &y, &TrainConfig::default()).unwrap();
        assert_eq!(model.accuracy(&x, &y), 1.0);
        let imp = query_importance(&model);
        assert!(imp[1] > imp[0]);
    }

    #[test]
    fn constant_feature_contributes_nothing() {
        let y = vec![0, 1, 0, 1];
        let x = FeatureMatrix::from_columns(4, &[vec![3.0; 4], vec![0.0, 1.0, 0.0, 1.0]]).unwrap();
        let model = train_logistic(&x, &y, &TrainConfig::default()).unwrap();
        assert_eq!(model.feature_stds[0], 1.0);
        assert_eq!(model.weights[0], 0.0);
        assert_eq!(model.probability(&[100.0, 1.0]), model.probability(&[3.0, 1.0]));
    }

    #[test]
    fn saturation_and_importance_values() {
        let model = LogisticModel {
            weights: vec![2.0, -3.0, 0.5],
            bias: 0.0,
            feature_means: vec![0.0; 3],
            feature_stds: vec![1.0; 3],
        };
        assert_eq!(query_importance(&model), vec![2.0, 3.0, 0.5]);
        assert!(model.predict(&[10.0, 0.0, 0.0]).0 > 0.99);
    }

    #[test]
    fn loss_decreases_at_small_step() {
        let mut rng = crate::seed::rng_from_seed(3);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<u8> = (0..30).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let obj = LogisticObjective::new(x, &y, 1e-4).unwrap();
        let (mut w, mut b) = (vec![0.0; 4], 0.0);
        let mut last = obj.loss(&w, b);
        for _ in 0..100 {
            let (gw, gb) = obj.gradient(&w, b);
            for (wi, g) in w.iter_mut().zip(gw) {
                *wi -= 0.01 * g;
            }
            b -= 0.01 * gb;
            let now = obj.loss(&w, b);
            assert!(now <= last + 1e-15);
            last = now;
        }
    }

    #[test]
    fn newton_reaches_the_gradient_descent_optimum() {
        let mut rng = crate::seed::rng_from_seed(5);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<u8> = rows.iter().map(|r| u8::from(r[0] + 0.5 * r[1] + rng.gen_range(-1.0..1.0) > 0.0)).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let newton = TrainConfig {
            solver: Solver::Newton,
            iterations: 50,
            ..TrainConfig::default()
        };
        let slow = TrainConfig {
            iterations: 20_000,
            ..TrainConfig::default()
        };
        let a = train_logistic(&x, &y, &newton).unwrap();
        let b = train_logistic(&x, &y, &slow).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa - wb).abs() < 1e-4, "{wa} {wb}");
        }
        assert!((a.bias - b.bias).abs() < 1e-4);
    }

    #[test]
    fn newton_with_zero_steps_stays_at_zero() {
        let (x, y) = separable();
        let config = TrainConfig {
            solver: Solver::Newton,
            iterations: 0,
            ..TrainConfig::default()
        };
        let model = train_logistic(&x, &y, &config).unwrap();
        assert!(model.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn likelihood_ratio_cases() {
        assert_eq!(likelihood_ratio_predict(0.0, 3, 1), 0);
        assert_eq!(likelihood_ratio_predict(5.0, 3, 1), 1);
        assert_eq!(likelihood_ratio_predict(0.49, 0, 0), 1);
        assert_eq!(likelihood_ratio_predict(0.51, 0, 0), 0);
    }

    #[test]
    fn model_json_round_trip() {
        let (x, y) = separable();
        let model = train_logistic(&x, &y, &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_json(&path).unwrap();
        assert_eq!(LogisticModel::load_json(&path).unwrap(), model);
    }
}
