//! Baselines on raw tower counts: lasso regression of weekly spend and
//! classification of each user's dominant shopping behavior.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cmf::assign_folds;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub lasso_max_sweeps: usize,
    pub lasso_tol: f64,
    /// Ridge weight for multinomial logistic regression.
    pub logistic_lambda: f64,
    pub logistic_max_iter: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            lambdas: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            folds: 10,
            lasso_max_sweeps: 1000,
            lasso_tol: 1e-9,
            logistic_lambda: 1.0,
            logistic_max_iter: 500,
        }
    }
}

impl BaselineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            v.push("baselines.lambdas must be a nonempty list of values >= 0".into());
        }
        if self.folds < 2 {
            v.push(format!("baselines.folds must be >= 2, got {}", self.folds));
        }
        if !(self.logistic_lambda >= 0.0) {
            v.push("baselines.logistic_lambda must be >= 0".into());
        }
        v
    }
}

/// Column means and standard deviations of the training rows. Constant
/// columns get scale 1 so they stay all-zero after centering.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Array1<f64>,
    pub scales: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let means = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let scales = x
            .axis_iter(Axis(1))
            .zip(means.iter())
            .map(|(col, &mu)| {
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / col.len().max(1) as f64;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Standardizer { means, scales }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.means) / &self.scales
    }
}

/// `1 - SS_res / SS_tot` with `SS_tot` about the mean of `y`.
pub fn r_squared(y: ArrayView1<f64>, pred: ArrayView1<f64>) -> Result<f64> {
    if y.len() != pred.len() || y.is_empty() {
        return Err(Error::Shape(format!("r2 over {} targets and {} predictions", y.len(), pred.len())));
    }
    let mean = y.mean().expect("nonempty");
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Numerical("R^2 is undefined for a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub lambda: f64,
    /// Coefficients on standardized features.
    pub coef: Array1<f64>,
    pub intercept: f64,
    pub standardizer: Standardizer,
    pub sweeps: usize,
}

impl LassoFit {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.standardizer.apply(x).dot(&self.coef) + self.intercept
    }

    pub fn nnz(&self) -> usize {
        self.coef.iter().filter(|&&c| c != 0.0).count()
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// `(1/2n) |y - b - Z beta|^2 + lambda |beta|_1` on standardized `Z`.
pub fn lasso_objective(z: ArrayView2<f64>, y: ArrayView1<f64>, coef: ArrayView1<f64>, intercept: f64, lambda: f64) -> f64 {
    let r = &y - &z.dot(&coef) - intercept;
    r.dot(&r) / (2.0 * y.len() as f64) + lambda * coef.iter().map(|c| c.abs()).sum::<f64>()
}

/// Cyclic coordinate descent. Features are standardized on `x` itself; the
/// intercept is the mean of `y` because standardized columns are centered.
pub fn lasso_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, max_sweeps: usize, tol: f64) -> Result<LassoFit> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} feature rows for {} targets", x.nrows(), y.len())));
    }
    if y.len() < 2 {
        return Err(Error::Empty("lasso needs at least 2 samples".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lasso lambda must be >= 0, got {lambda}")));
    }
    let standardizer = Standardizer::fit(x);
    let z = standardizer.apply(x);
    let n = y.len() as f64;
    let intercept = y.mean().expect("nonempty");
    let col_sq: Vec<f64> = z.axis_iter(Axis(1)).map(|c| c.dot(&c) / n).collect();
    let mut coef = Array1::<f64>::zeros(z.ncols());
    let mut resid = &y - intercept;
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..z.ncols() {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = z.column(j);
            let old = coef[j];
            let rho = col.dot(&resid) / n + col_sq[j] * old;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            if new != old {
                resid.scaled_add(old - new, &col);
                coef[j] = new;
                max_delta = max_delta.max((new - old).abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
    Ok(LassoFit { lambda, coef, intercept, standardizer, sweeps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoRow {
    pub lambda: f64,
    pub r2_train: f64,
    pub r2_test: f64,
    /// Nonzero coefficients of the fit on all rows.
    pub nnz: usize,
}

/// Cross-validated lasso path. R^2 values are means over folds.
pub fn lasso_regression(x: ArrayView2<f64>, y: ArrayView1<f64>, config: &BaselineConfig, seed: u64) -> Result<Vec<LassoRow>> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} feature rows for {} targets", x.nrows(), y.len())));
    }
    if y.len() < 2 {
        return Err(Error::Empty("lasso needs at least 2 samples".into()));
    }
    let mean = y.mean().expect("nonempty");
    if y.iter().all(|&v| v == mean) {
        return Err(Error::Numerical("R^2 is undefined for a constant target".into()));
    }
    let rows: Vec<usize> = (0..y.len()).collect();
    let folds = assign_folds(&rows, config.folds, seed)?;
    let jobs: Vec<(usize, usize)> = (0..config.lambdas.len())
        .flat_map(|l| (0..folds.len()).map(move |f| (l, f)))
        .collect();
    let scores = par::map_slice(&jobs, |&(l, f)| -> Result<(f64, f64)> {
        let test = &folds[f];
        let train: Vec<usize> = rows.iter().copied().filter(|r| test.binary_search(r).is_err()).collect();
        let (xt, yt) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
        let (xs, ys) = (x.select(Axis(0), test), y.select(Axis(0), test));
        let fit = lasso_fit(xt.view(), yt.view(), config.lambdas[l], config.lasso_max_sweeps, config.lasso_tol)?;
        Ok((
            r_squared(yt.view(), fit.predict(xt.view()).view())?,
            r_squared(ys.view(), fit.predict(xs.view()).view())?,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let nnz = par::map_slice(&config.lambdas, |&lambda| {
        lasso_fit(x, y, lambda, config.lasso_max_sweeps, config.lasso_tol).map(|f| f.nnz())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let k = folds.len() as f64;
    Ok(config
        .lambdas
        .iter()
        .enumerate()
        .map(|(l, &lambda)| {
            let mine = &scores[l * folds.len()..(l + 1) * folds.len()];
            LassoRow {
                lambda,
                r2_train: mine.iter().map(|s| s.0).sum::<f64>() / k,
                r2_test: mine.iter().map(|s| s.1).sum::<f64>() / k,
                nnz: nnz[l],
            }
        })
        .collect())
}

pub fn write_lasso_csv<W: Write>(rows: &[LassoRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "r2_train", "r2_test", "nnz"])?;
    for r in rows {
        w.write_record([
            format!("{:?}", r.lambda),
            format!("{:?}", r.r2_train),
            format!("{:?}", r.r2_test),
            r.nnz.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<lasso csv>", e))?;
    Ok(())
}

/// Index of the largest weight; ties go to the smallest index.
pub fn primary_behavior(row: ArrayView1<f64>) -> Result<usize> {
    if row.is_empty() {
        return Err(Error::Empty("empty topic row".into()));
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Most frequent label; ties go to the smallest label.
pub fn majority_class(labels: &[usize]) -> Option<usize> {
    let classes = labels.iter().max()? + 1;
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &k) in counts.iter().enumerate() {
        if k > counts[best] {
            best = c;
        }
    }
    Some(best)
}

/// Softmax regression with an unpenalized bias:
/// `-(1/n) sum_i log p(y_i | x_i) + (lambda / 2) |W|^2` on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub standardizer: Standardizer,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let total = row.sum();
        row.mapv_inplace(|p| p / total);
    }
}

fn logistic_loss(z: &Array2<f64>, labels: &[usize], w: &Array2<f64>, b: &Array1<f64>, lambda: f64) -> (f64, Array2<f64>, Array1<f64>) {
    let n = labels.len() as f64;
    let logits = z.dot(w) + b;
    let mut nll = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        nll += lse - row[y];
    }
    let mut probs = logits;
    softmax_rows(&mut probs);
    for (i, &y) in labels.iter().enumerate() {
        probs[[i, y]] -= 1.0;
    }
    let gw = z.t().dot(&probs) / n + w * lambda;
    let gb = probs.sum_axis(Axis(0)) / n;
    let loss = nll / n + lambda / 2.0 * w.iter().map(|x| x * x).sum::<f64>();
    (loss, gw, gb)
}

/// Gradient descent with backtracking line search.
pub fn fit_logistic(x: ArrayView2<f64>, labels: &[usize], classes: usize, lambda: f64, max_iter: usize) -> Result<LogisticModel> {
    if x.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Shape(format!("label outside 0..{classes}")));
    }
    let standardizer = Standardizer::fit(x);
    let z = standardizer.apply(x);
    let mut w = Array2::<f64>::zeros((z.ncols(), classes));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut loss, mut gw, mut gb) = logistic_loss(&z, labels, &w, &b, lambda);
    let mut step = 1.0;
    for _ in 0..max_iter {
        let g2 = gw.iter().map(|g| g * g).sum::<f64>() + gb.dot(&gb);
        if g2 < 1e-16 {
            break;
        }
        loop {
            let w_new = &w - &(&gw * step);
            let b_new = &b - &(&gb * step);
            let (l_new, gw_new, gb_new) = logistic_loss(&z, labels, &w_new, &b_new, lambda);
            if l_new <= loss - 0.5 * step * g2 {
                w = w_new;
                b = b_new;
                loss = l_new;
                gw = gw_new;
                gb = gb_new;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Ok(LogisticModel { weights: w, bias: b, standardizer });
            }
        }
    }
    Ok(LogisticModel { weights: w, bias: b, standardizer })
}

impl LogisticModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let scores = self.standardizer.apply(x).dot(&self.weights) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| primary_behavior(r).expect("at least one class"))
            .collect()
    }
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub classifier: String,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub rows: Vec<AccuracyRow>,
    /// Correct predictions over all held-out rows, per classifier.
    pub pooled_accuracy: Vec<(String, f64)>,
    /// Frequency of the modal label in the full data.
    pub majority_frequency: f64,
    /// Folds whose training split held a single class; only the majority
    /// predictor ran on them.
    pub single_class_folds: Vec<usize>,
}

impl ClassificationReport {
    pub fn pooled(&self, classifier: &str) -> Option<f64> {
        self.pooled_accuracy.iter().find(|(c, _)| c == classifier).map(|p| p.1)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["classifier", "fold", "accuracy"])?;
        for r in &self.rows {
            w.write_record([r.classifier.clone(), r.fold.to_string(), format!("{:?}", r.accuracy)])?;
        }
        w.flush().map_err(|e| Error::io("<classification csv>", e))?;
        Ok(())
    }
}

pub const MAJORITY: &str = "majority";
pub const LOGISTIC: &str = "logistic";

/// Cross-validated majority and logistic classifiers on the same folds.
pub fn classify_primary(x: ArrayView2<f64>, labels: &[usize], config: &BaselineConfig, seed: u64) -> Result<ClassificationReport> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::InvalidConfig("classification needs at least 2 classes".into()));
    }
    let modal = majority_class(labels).expect("labels nonempty");
    let majority_frequency = labels.iter().filter(|&&l| l == modal).count() as f64 / labels.len() as f64;
    let rows_all: Vec<usize> = (0..labels.len()).collect();
    let folds = assign_folds(&rows_all, config.folds, seed)?;

    struct FoldResult {
        majority_hits: usize,
        logistic_hits: Option<usize>,
        size: usize,
    }
    let results = par::map_range(folds.len(), |f| -> Result<FoldResult> {
        let test = &folds[f];
        let train: Vec<usize> = rows_all.iter().copied().filter(|r| test.binary_search(r).is_err()).collect();
        let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let train_modal = majority_class(&y_train).expect("nonempty training split");
        let majority_hits = y_test.iter().filter(|&&y| y == train_modal).count();
        let single = y_train.iter().all(|&y| y == y_train[0]);
        let logistic_hits = if single {
            None
        } else {
            let model = fit_logistic(
                x.select(Axis(0), &train).view(),
                &y_train,
                classes,
                config.logistic_lambda,
                config.logistic_max_iter,
            )?;
            let pred = model.predict(x.select(Axis(0), test).view());
            Some(y_test.iter().zip(&pred).filter(|(a, b)| a == b).count())
        };
        Ok(FoldResult { majority_hits, logistic_hits, size: test.len() })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut single_class_folds = Vec::new();
    let (mut maj_hits, mut log_hits, mut log_n) = (0, 0, 0);
    for (f, r) in results.iter().enumerate() {
        maj_hits += r.majority_hits;
        rows.push(AccuracyRow { classifier: MAJORITY.into(), fold: f, accuracy: r.majority_hits as f64 / r.size as f64 });
        match r.logistic_hits {
            Some(h) => {
                log_hits += h;
                log_n += r.size;
                rows.push(AccuracyRow { classifier: LOGISTIC.into(), fold: f, accuracy: h as f64 / r.size as f64 });
            }
            None => single_class_folds.push(f),
        }
    }
    let mut pooled_accuracy = vec![(MAJORITY.to_string(), maj_hits as f64 / labels.len() as f64)];
    if log_n > 0 {
        pooled_accuracy.push((LOGISTIC.to_string(), log_hits as f64 / log_n as f64));
    }
    Ok(ClassificationReport { rows, pooled_accuracy, majority_frequency, single_class_folds })
}
