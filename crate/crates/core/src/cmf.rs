//! Group-sparse collective matrix factorization.
//!
//! Shopping proportions `S` (users x behaviors) and mobility features `M`
//! (users x tower classes) share one latent user matrix `U`:
//!
//! ```text
//! S ~ 1 b_s^T + U Vs^T      (observed rows only)
//! M ~ 1 b_m^T + U Vm^T
//! ```
//!
//! The loss adds ridge terms on `U`, `Vs`, `Vm` and an unsquared l2 penalty on
//! every column of `Vs` and `Vm`. A column driven to zero in one view makes the
//! matching latent factor private to the other view. The offsets `b_s`, `b_m`
//! are unpenalized and can be switched off.
//!
//! Fitting is block coordinate descent. Each outer iteration updates `Vm`,
//! `Vs`, the offsets and then `U`. Loading blocks use proximal gradient with
//! backtracking and column soft-thresholding; offsets have closed forms; `U`
//! rows are independent ridge solves.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows};
use crate::par;

/// Ridge floor used when a normal matrix would otherwise be singular.
pub const RIDGE_FLOOR: f64 = 1e-8;

/// Slack allowed when checking that an accepted step did not raise the objective.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmfConfig {
    pub rank: usize,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub gamma_s: f64,
    pub gamma_m: f64,
    /// Relative objective change that stops the outer loop.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Fit unpenalized per-column offsets for both views.
    pub intercepts: bool,
    /// Clamp predicted shopping rows to [0, 1].
    pub clamp_predictions: bool,
}

impl Default for CmfConfig {
    fn default() -> Self {
        CmfConfig {
            rank: 3,
            lambda_u: 0.1,
            lambda_s: 0.1,
            lambda_m: 0.1,
            gamma_s: 0.1,
            gamma_m: 0.1,
            tol: 1e-6,
            max_iter: 500,
            seed: 0,
            intercepts: true,
            clamp_predictions: false,
        }
    }
}

impl CmfConfig {
    /// Every violated field, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.rank == 0 {
            v.push("cmf.rank must be >= 1".to_string());
        }
        for (name, value) in [
            ("lambda_u", self.lambda_u),
            ("lambda_s", self.lambda_s),
            ("lambda_m", self.lambda_m),
            ("gamma_s", self.gamma_s),
            ("gamma_m", self.gamma_m),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                v.push(format!("cmf.{name} must be finite and >= 0, got {value}"));
            }
        }
        if !(self.tol > 0.0) {
            v.push(format!("cmf.tol must be > 0, got {}", self.tol));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }
}

/// Rows of `S` whose entries enter the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMask {
    observed: Vec<bool>,
}

impl RowMask {
    pub fn all(n: usize) -> Self {
        RowMask { observed: vec![true; n] }
    }

    pub fn none(n: usize) -> Self {
        RowMask { observed: vec![false; n] }
    }

    pub fn from_indices(n: usize, rows: &[usize]) -> Result<Self> {
        let mut mask = RowMask::none(n);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("mask row {r} outside 0..{n}")));
            }
            mask.observed[r] = true;
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    /// This mask with `rows` removed.
    pub fn without(&self, rows: &[usize]) -> Self {
        let mut m = self.clone();
        for &r in rows {
            m.observed[r] = false;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmfModel {
    #[serde(rename = "U", with = "serde_rows")]
    pub u: Array2<f64>,
    #[serde(rename = "Vs", with = "serde_rows")]
    pub vs: Array2<f64>,
    #[serde(rename = "Vm", with = "serde_rows")]
    pub vm: Array2<f64>,
    pub shopping_offset: Array1<f64>,
    pub mobility_offset: Array1<f64>,
    pub config: CmfConfig,
    pub objective_history: Vec<f64>,
}

impl CmfModel {
    /// A model with zero offsets, e.g. for evaluating planted factors.
    pub fn from_factors(u: Array2<f64>, vs: Array2<f64>, vm: Array2<f64>, config: CmfConfig) -> Self {
        let (k, d) = (vs.nrows(), vm.nrows());
        CmfModel {
            u,
            vs,
            vm,
            shopping_offset: Array1::zeros(k),
            mobility_offset: Array1::zeros(d),
            config,
            objective_history: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `1 b_s^T + U Vs^T` over all rows.
    pub fn reconstruct_shopping(&self) -> Array2<f64> {
        self.u.dot(&self.vs.t()) + &self.shopping_offset
    }

    pub fn reconstruct_mobility(&self) -> Array2<f64> {
        self.u.dot(&self.vm.t()) + &self.mobility_offset
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

fn check_shapes(s: ArrayView2<f64>, m: ArrayView2<f64>, mask: &RowMask) -> Result<()> {
    if s.nrows() != m.nrows() || mask.len() != s.nrows() {
        return Err(Error::Shape(format!(
            "S is {}x{}, M is {}x{}, mask covers {} rows",
            s.nrows(),
            s.ncols(),
            m.nrows(),
            m.ncols(),
            mask.len()
        )));
    }
    if s.iter().chain(m.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("S or M has non-finite entries".into()));
    }
    Ok(())
}

fn check_model(s: ArrayView2<f64>, m: ArrayView2<f64>, model: &CmfModel) -> Result<()> {
    let r = model.u.ncols();
    let ok = model.u.nrows() == s.nrows()
        && model.vs.dim() == (s.ncols(), r)
        && model.vm.dim() == (m.ncols(), r)
        && model.shopping_offset.len() == s.ncols()
        && model.mobility_offset.len() == m.ncols();
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "model U {:?}, Vs {:?}, Vm {:?} do not fit S {:?} and M {:?}",
            model.u.dim(),
            model.vs.dim(),
            model.vm.dim(),
            s.dim(),
            m.dim()
        )))
    }
}

/// Per-column l2 norms.
pub fn group_norms(v: ArrayView2<f64>) -> Vec<f64> {
    v.axis_iter(Axis(1)).map(|c| c.dot(&c).sqrt()).collect()
}

fn masked_residual_sq(
    target: ArrayView2<f64>,
    offset: ArrayView1<f64>,
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: Option<&RowMask>,
) -> f64 {
    let fitted = u.dot(&v.t());
    let mut total = 0.0;
    for i in 0..target.nrows() {
        if mask.is_some_and(|m| !m.is_observed(i)) {
            continue;
        }
        for j in 0..target.ncols() {
            let e = target[[i, j]] - offset[j] - fitted[[i, j]];
            total += e * e;
        }
    }
    total
}

/// Full objective, including the group penalties.
pub fn objective(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    mask: &RowMask,
    model: &CmfModel,
    config: &CmfConfig,
) -> Result<f64> {
    check_shapes(s, m, mask)?;
    check_model(s, m, model)?;
    Ok(objective_unchecked(s, m, mask, model, config))
}

fn objective_unchecked(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    mask: &RowMask,
    model: &CmfModel,
    config: &CmfConfig,
) -> f64 {
    let (u, vs, vm) = (model.u.view(), model.vs.view(), model.vm.view());
    masked_residual_sq(s, model.shopping_offset.view(), u, vs, Some(mask))
        + masked_residual_sq(m, model.mobility_offset.view(), u, vm, None)
        + config.lambda_u * linalg::frobenius_sq(u)
        + config.lambda_s * linalg::frobenius_sq(vs)
        + config.lambda_m * linalg::frobenius_sq(vm)
        + config.gamma_s * group_norms(vs).iter().sum::<f64>()
        + config.gamma_m * group_norms(vm).iter().sum::<f64>()
}

/// Gradients of the smooth part (everything but the group penalties) with
/// respect to `U`, `Vs` and `Vm`, offsets held fixed.
pub fn smooth_gradients(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    mask: &RowMask,
    model: &CmfModel,
    config: &CmfConfig,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    check_shapes(s, m, mask)?;
    check_model(s, m, model)?;
    let mut rs = model.reconstruct_shopping() - &s;
    for i in 0..rs.nrows() {
        if !mask.is_observed(i) {
            rs.row_mut(i).fill(0.0);
        }
    }
    let rm = model.reconstruct_mobility() - &m;
    let gu = (rs.dot(&model.vs) + rm.dot(&model.vm) + &model.u * config.lambda_u) * 2.0;
    let gvs = (rs.t().dot(&model.u) + &model.vs * config.lambda_s) * 2.0;
    let gvm = (rm.t().dot(&model.u) + &model.vm * config.lambda_m) * 2.0;
    Ok((gu, gvs, gvm))
}

/// Quadratic model of one loading block:
/// `f(V) = c - 2 <V, cross> + <V gram, V> + lambda |V|^2`, plus `gamma sum_k |V_k|`.
struct LoadingBlock {
    gram: Array2<f64>,
    cross: Array2<f64>,
    lambda: f64,
    gamma: f64,
}

impl LoadingBlock {
    fn new(
        target: ArrayView2<f64>,
        offset: ArrayView1<f64>,
        u: ArrayView2<f64>,
        mask: Option<&RowMask>,
        lambda: f64,
        gamma: f64,
    ) -> Self {
        let rows: Vec<usize> = match mask {
            Some(mask) => mask.indices(),
            None => (0..target.nrows()).collect(),
        };
        let uo = u.select(Axis(0), &rows);
        let to = target.select(Axis(0), &rows) - &offset;
        LoadingBlock {
            gram: uo.t().dot(&uo),
            cross: to.t().dot(&uo),
            lambda,
            gamma,
        }
    }

    /// Smooth part without the constant term.
    fn smooth(&self, v: &Array2<f64>) -> f64 {
        let vg = v.dot(&self.gram);
        (&vg * v).sum() - 2.0 * (&self.cross * v).sum() + self.lambda * linalg::frobenius_sq(v.view())
    }

    fn gradient(&self, v: &Array2<f64>) -> Array2<f64> {
        (v.dot(&self.gram) - &self.cross + v * self.lambda) * 2.0
    }

    fn penalty(&self, v: &Array2<f64>) -> f64 {
        self.gamma * group_norms(v.view()).iter().sum::<f64>()
    }

    /// Column soft-thresholding, the prox of `t * gamma * sum_k |V_k|`.
    fn prox(&self, mut v: Array2<f64>, t: f64) -> Array2<f64> {
        let thresh = t * self.gamma;
        for mut col in v.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            let scale = if norm > thresh { 1.0 - thresh / norm } else { 0.0 };
            col.mapv_inplace(|x| x * scale);
        }
        v
    }

    /// Proximal gradient with backtracking; never increases the block objective.
    fn minimize(&self, mut v: Array2<f64>, max_steps: usize) -> Array2<f64> {
        let lipschitz = 2.0 * (linalg::max_eigenvalue_psd(self.gram.view()) + self.lambda);
        if lipschitz <= 0.0 {
            return self.prox(v, 1.0);
        }
        let mut step = 1.0 / lipschitz;
        let mut f = self.smooth(&v);
        let mut total = f + self.penalty(&v);
        for _ in 0..max_steps {
            let g = self.gradient(&v);
            let mut accepted = None;
            for _ in 0..60 {
                let cand = self.prox(&v - &(&g * step), step);
                let diff = &cand - &v;
                let f_cand = self.smooth(&cand);
                let bound = f + (&g * &diff).sum() + linalg::frobenius_sq(diff.view()) / (2.0 * step);
                if f_cand.is_finite() && f_cand <= bound + 1e-12 * f.abs().max(1.0) {
                    accepted = Some((cand, f_cand));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, f_cand)) = accepted else { break };
            let total_cand = f_cand + self.penalty(&cand);
            if total_cand > total {
                break;
            }
            let change = total - total_cand;
            v = cand;
            f = f_cand;
            total = total_cand;
            if change <= 1e-13 * total.abs().max(1.0) {
                break;
            }
        }
        v
    }
}

fn column_means_of(target: ArrayView2<f64>, fitted: &Array2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut out = Array1::zeros(target.ncols());
    if rows.is_empty() {
        return out;
    }
    for &i in rows {
        for j in 0..target.ncols() {
            out[j] += target[[i, j]] - fitted[[i, j]];
        }
    }
    out / rows.len() as f64
}

/// Ridge solve of every `U` row given the loadings.
fn update_users(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    mask: &RowMask,
    model: &CmfModel,
    lambda_u: f64,
) -> Result<Array2<f64>> {
    let r = model.rank();
    let gram_s = model.vs.t().dot(&model.vs);
    let gram_m = model.vm.t().dot(&model.vm);
    let eye = Array2::<f64>::eye(r);
    let with_s = &gram_s + &gram_m + &eye * lambda_u;
    let without_s = &gram_m + &eye * lambda_u;
    let factor = |a: &Array2<f64>| {
        linalg::cholesky(a.view())
            .or_else(|| linalg::cholesky((a + &eye * RIDGE_FLOOR).view()))
            .ok_or_else(|| Error::Numerical("singular user normal matrix".into()))
    };
    let l_with = factor(&with_s)?;
    let l_without = factor(&without_s)?;
    let ms = &m - &model.mobility_offset;
    let ss = &s - &model.shopping_offset;
    let rows = par::map_range(s.nrows(), |i| {
        let mut b = model.vm.t().dot(&ms.row(i));
        if mask.is_observed(i) {
            b += &model.vs.t().dot(&ss.row(i));
            linalg::cholesky_solve(l_with.view(), b.view())
        } else {
            linalg::cholesky_solve(l_without.view(), b.view())
        }
    });
    let mut u = Array2::zeros((s.nrows(), r));
    for (i, row) in rows.into_iter().enumerate() {
        u.row_mut(i).assign(&row);
    }
    Ok(u)
}

/// Initial factors: entries uniform on (-1, 1) scaled by `1/sqrt(rank)`,
/// drawn in the order `U`, `Vs`, `Vm`.
pub fn initialize(n: usize, k: usize, d: usize, config: &CmfConfig) -> CmfModel {
    let r = config.rank;
    let scale = 1.0 / (r as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |rows: usize| Array2::from_shape_simple_fn((rows, r), || rng.gen_range(-1.0..1.0) * scale);
    let u = draw(n);
    let vs = draw(k);
    let vm = draw(d);
    CmfModel::from_factors(u, vs, vm, config.clone())
}

const INNER_STEPS: usize = 100;

/// Fits the model on the observed rows of `S` and all rows of `M`.
pub fn fit(s: ArrayView2<f64>, m: ArrayView2<f64>, mask: &RowMask, config: &CmfConfig) -> Result<CmfModel> {
    config.validate()?;
    check_shapes(s, m, mask)?;
    if mask.count() == 0 {
        return Err(Error::Empty("row mask observes no shopping rows".into()));
    }
    let mut model = initialize(s.nrows(), s.ncols(), m.ncols(), config);
    let observed = mask.indices();
    let all_rows: Vec<usize> = (0..s.nrows()).collect();
    let mut current = objective_unchecked(s, m, mask, &model, config);
    if !current.is_finite() {
        return Err(Error::Numerical("initial objective is not finite".into()));
    }
    model.objective_history.push(current);

    for _ in 0..config.max_iter {
        let block = LoadingBlock::new(
            m,
            model.mobility_offset.view(),
            model.u.view(),
            None,
            config.lambda_m,
            config.gamma_m,
        );
        model.vm = block.minimize(model.vm.clone(), INNER_STEPS);

        let block = LoadingBlock::new(
            s,
            model.shopping_offset.view(),
            model.u.view(),
            Some(mask),
            config.lambda_s,
            config.gamma_s,
        );
        model.vs = block.minimize(model.vs.clone(), INNER_STEPS);

        if config.intercepts {
            model.shopping_offset = column_means_of(s, &model.u.dot(&model.vs.t()), &observed);
            model.mobility_offset = column_means_of(m, &model.u.dot(&model.vm.t()), &all_rows);
        }

        model.u = update_users(s, m, mask, &model, config.lambda_u)?;

        let next = objective_unchecked(s, m, mask, &model, config);
        if !next.is_finite() {
            return Err(Error::Numerical("objective became non-finite".into()));
        }
        if next > current + MONOTONE_SLACK * current.abs().max(1.0) {
            log::warn!("objective rose from {current} to {next}");
        }
        model.objective_history.push(next);
        let rel = (current - next).abs() / current.abs().max(f64::MIN_POSITIVE);
        current = next;
        if rel < config.tol {
            break;
        }
    }
    Ok(model)
}

/// Shopping-only reference: the same fit with an empty mobility view.
pub fn fit_shopping_only(s: ArrayView2<f64>, mask: &RowMask, config: &CmfConfig) -> Result<CmfModel> {
    let empty = Array2::<f64>::zeros((s.nrows(), 0));
    fit(s, empty.view(), mask, config)
}

/// Predicts shopping rows from mobility rows of users outside the mask:
/// `u = argmin |m - b_m - u Vm^T|^2 + lambda_u |u|^2`, prediction `b_s + u Vs^T`.
pub fn predict_shopping(model: &CmfModel, mobility_rows: ArrayView2<f64>, config: &CmfConfig) -> Result<Array2<f64>> {
    if mobility_rows.ncols() != model.vm.nrows() {
        return Err(Error::Shape(format!(
            "mobility rows have {} columns, model expects {}",
            mobility_rows.ncols(),
            model.vm.nrows()
        )));
    }
    let r = model.rank();
    let lambda = config.lambda_u.max(RIDGE_FLOOR);
    let a = model.vm.t().dot(&model.vm) + Array2::<f64>::eye(r) * lambda;
    let l = linalg::cholesky(a.view()).ok_or_else(|| Error::Numerical("singular prediction normal matrix".into()))?;
    let centered = &mobility_rows - &model.mobility_offset;
    let rows = par::map_range(mobility_rows.nrows(), |i| {
        let b = model.vm.t().dot(&centered.row(i));
        let u = linalg::cholesky_solve(l.view(), b.view());
        let mut pred = model.vs.dot(&u) + &model.shopping_offset;
        if config.clamp_predictions {
            pred.mapv_inplace(|x| x.clamp(0.0, 1.0));
        }
        pred
    });
    let mut out = Array2::zeros((mobility_rows.nrows(), model.vs.nrows()));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// `sqrt(mean((truth - pred)^2))` over all compared entries.
pub fn rmse(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
    if truth.dim() != pred.dim() {
        return Err(Error::Shape(format!("truth {:?} vs prediction {:?}", truth.dim(), pred.dim())));
    }
    let count = truth.len();
    if count == 0 {
        return Err(Error::Empty("rmse over zero entries".into()));
    }
    let sum: f64 = truth.iter().zip(pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / count as f64).sqrt())
}

/// Splits `rows` into `folds` disjoint groups by a seeded shuffle. Position
/// `p` of the shuffled order goes to fold `p % folds`; each fold is sorted.
pub fn assign_folds(rows: &[usize], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("folds must be >= 2, got {folds}")));
    }
    if rows.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} rows cannot fill {folds} folds",
            rows.len()
        )));
    }
    let mut order = rows.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut out = vec![Vec::new(); folds];
    for (p, r) in order.into_iter().enumerate() {
        out[p % folds].push(r);
    }
    for f in &mut out {
        if f.is_empty() {
            return Err(Error::Empty("fold with zero users".into()));
        }
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub fold: usize,
    pub rank: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
    /// `(rank, mean RMSE over folds)` in grid order.
    pub mean_rmse: Vec<(usize, f64)>,
    pub selected_rank: usize,
}

impl CvReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fold", "rank", "rmse"])?;
        for row in &self.rows {
            w.write_record([row.fold.to_string(), row.rank.to_string(), format!("{:?}", row.rmse)])?;
        }
        w.flush().map_err(|e| Error::io("<cv csv>", e))?;
        Ok(())
    }
}

fn heldout_rmse(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    known: &RowMask,
    fold: &[usize],
    config: &CmfConfig,
) -> Result<f64> {
    let mask = known.without(fold);
    let model = fit(s, m, &mask, config)?;
    let pred = predict_shopping(&model, m.select(Axis(0), fold).view(), config)?;
    rmse(s.select(Axis(0), fold).view(), pred.view())
}

/// K-fold evaluation of held-out shopping rows for every rank in `ranks`.
/// `known` marks rows of `S` that exist at all; only those are split.
pub fn cross_validate(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    known: &RowMask,
    ranks: &[usize],
    config: &CmfConfig,
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    check_shapes(s, m, known)?;
    if ranks.is_empty() {
        return Err(Error::InvalidConfig("rank grid is empty".into()));
    }
    let assignment = assign_folds(&known.indices(), folds, seed)?;
    let jobs: Vec<(usize, usize)> = (0..folds).flat_map(|f| ranks.iter().map(move |&r| (f, r))).collect();
    let scores = par::map_slice(&jobs, |&(f, rank)| {
        let cfg = CmfConfig { rank, ..config.clone() };
        heldout_rmse(s, m, known, &assignment[f], &cfg).map(|rmse| CvRow { fold: f, rank, rmse })
    });
    let rows = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_rmse: Vec<(usize, f64)> = ranks
        .iter()
        .map(|&r| {
            let vals: Vec<f64> = rows.iter().filter(|row| row.rank == r).map(|row| row.rmse).collect();
            (r, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let selected_rank = mean_rmse
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|&(r, _)| r)
        .expect("nonempty grid");
    Ok(CvReport {
        rows,
        mean_rmse,
        selected_rank,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewComparison {
    pub rmse_joint: f64,
    pub rmse_shopping_only: f64,
    /// `(rmse_shopping_only - rmse_joint) / rmse_shopping_only`.
    pub relative_change: f64,
    /// `(fold, joint, shopping_only)`.
    pub per_fold: Vec<(usize, f64, f64)>,
}

/// Held-out RMSE with and without the mobility view, over the same folds.
/// Without mobility a held-out user has no side information, so the
/// shopping-only arm predicts the column means of the training rows.
pub fn compare_views(
    s: ArrayView2<f64>,
    m: ArrayView2<f64>,
    known: &RowMask,
    config: &CmfConfig,
    folds: usize,
    seed: u64,
) -> Result<ViewComparison> {
    check_shapes(s, m, known)?;
    let assignment = assign_folds(&known.indices(), folds, seed)?;
    let per_fold = par::map_range(folds, |f| -> Result<(usize, f64, f64)> {
        let fold = &assignment[f];
        let joint = heldout_rmse(s, m, known, fold, config)?;
        let train = known.without(fold).indices();
        let means = s.select(Axis(0), &train).mean_axis(Axis(0)).expect("training rows");
        let truth = s.select(Axis(0), fold);
        let baseline = Array2::from_shape_fn(truth.dim(), |(_, j)| means[j]);
        Ok((f, joint, rmse(truth.view(), baseline.view())?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rmse_joint = per_fold.iter().map(|p| p.1).sum::<f64>() / folds as f64;
    let rmse_shopping_only = per_fold.iter().map(|p| p.2).sum::<f64>() / folds as f64;
    Ok(ViewComparison {
        rmse_joint,
        rmse_shopping_only,
        relative_change: (rmse_shopping_only - rmse_joint) / rmse_shopping_only,
        per_fold,
    })
}

/// The block `rows` of `a`, cloned.
pub fn rows_of(a: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(Axis(0), rows)
}

/// Leading `cols` columns.
pub fn leading_columns(a: ArrayView2<f64>, cols: usize) -> Array2<f64> {
    a.slice(s![.., ..cols]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
    }

    fn zero_penalties() -> CmfConfig {
        CmfConfig {
            lambda_u: 0.0,
            lambda_s: 0.0,
            lambda_m: 0.0,
            gamma_s: 0.0,
            gamma_m: 0.0,
            intercepts: false,
            ..Default::default()
        }
    }

    /// Term-by-term evaluation with explicit loops.
    fn naive_objective(s: &Array2<f64>, m: &Array2<f64>, mask: &RowMask, model: &CmfModel, c: &CmfConfig) -> f64 {
        let r = model.u.ncols();
        let mut total = 0.0;
        for i in 0..s.nrows() {
            if mask.is_observed(i) {
                for j in 0..s.ncols() {
                    let mut fit = model.shopping_offset[j];
                    for k in 0..r {
                        fit += model.u[[i, k]] * model.vs[[j, k]];
                    }
                    total += (s[[i, j]] - fit).powi(2);
                }
            }
            for j in 0..m.ncols() {
                let mut fit = model.mobility_offset[j];
                for k in 0..r {
                    fit += model.u[[i, k]] * model.vm[[j, k]];
                }
                total += (m[[i, j]] - fit).powi(2);
            }
        }
        let sq = |a: &Array2<f64>| a.iter().map(|x| x * x).sum::<f64>();
        total += c.lambda_u * sq(&model.u) + c.lambda_s * sq(&model.vs) + c.lambda_m * sq(&model.vm);
        for k in 0..r {
            let ns: f64 = (0..model.vs.nrows()).map(|j| model.vs[[j, k]].powi(2)).sum::<f64>().sqrt();
            let nm: f64 = (0..model.vm.nrows()).map(|j| model.vm[[j, k]].powi(2)).sum::<f64>().sqrt();
            total += c.gamma_s * ns + c.gamma_m * nm;
        }
        total
    }

    #[test]
    fn zero_factors_give_data_energy() {
        let s = array![[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]];
        let m = array![[1.0], [2.0], [0.0]];
        let mask = RowMask::from_indices(3, &[0, 2]).unwrap();
        let cfg = zero_penalties();
        let model = CmfModel::from_factors(Array2::zeros((3, 2)), Array2::zeros((2, 2)), Array2::zeros((1, 2)), cfg.clone());
        let f = objective(s.view(), m.view(), &mask, &model, &cfg).unwrap();
        assert!((f - (0.04 + 0.64 + 1.0 + 1.0 + 4.0)).abs() < 1e-15);
    }

    #[test]
    fn exact_factorization_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, vs, vm) = (randn(6, 2, &mut rng), randn(3, 2, &mut rng), randn(4, 2, &mut rng));
        let s = u.dot(&vs.t());
        let m = u.dot(&vm.t());
        let cfg = zero_penalties();
        let model = CmfModel::from_factors(u, vs, vm, cfg.clone());
        let f = objective(s.view(), m.view(), &RowMask::all(6), &model, &cfg).unwrap();
        assert!(f < 1e-25);
    }

    #[test]
    fn objective_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = randn(5, 3, &mut rng);
        let m = randn(5, 4, &mut rng);
        let mask = RowMask::from_indices(5, &[0, 1, 3]).unwrap();
        let cfg = CmfConfig { lambda_u: 0.3, lambda_s: 0.2, lambda_m: 0.7, gamma_s: 0.5, gamma_m: 1.1, ..Default::default() };
        let mut model = CmfModel::from_factors(randn(5, 2, &mut rng), randn(3, 2, &mut rng), randn(4, 2, &mut rng), cfg.clone());
        model.shopping_offset = array![0.1, -0.2, 0.3];
        model.mobility_offset = array![0.5, 0.0, -1.0, 0.25];
        let f = objective(s.view(), m.view(), &mask, &model, &cfg).unwrap();
        let naive = naive_objective(&s, &m, &mask, &model, &cfg);
        assert!((f - naive).abs() < 1e-10, "{f} vs {naive}");
    }

    #[test]
    fn objective_rejects_bad_shapes() {
        let cfg = CmfConfig::default();
        let model = CmfModel::from_factors(Array2::zeros((2, 1)), Array2::zeros((2, 1)), Array2::zeros((2, 1)), cfg.clone());
        let s = Array2::zeros((3, 2));
        let m = Array2::zeros((3, 2));
        assert!(objective(s.view(), m.view(), &RowMask::all(3), &model, &cfg).is_err());
        assert!(objective(s.view(), m.view(), &RowMask::all(2), &model, &cfg).is_err());
    }

    #[test]
    fn group_norm_examples() {
        assert_eq!(group_norms(Array2::<f64>::zeros((3, 2)).view()), vec![0.0, 0.0]);
        assert_eq!(group_norms(Array2::<f64>::eye(2).view()), vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = randn(4, 3, &mut rng);
        let norms = group_norms(v.view());
        for k in 0..3 {
            let naive = (0..4).map(|j| v[[j, k]] * v[[j, k]]).sum::<f64>().sqrt();
            assert!((norms[k] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_examples() {
        let a = array![[0.2, 0.8]];
        assert_eq!(rmse(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(rmse(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view()).unwrap(), 1.0);
        let r = rmse(a.view(), array![[0.4, 0.6]].view()).unwrap();
        assert!((r - 0.2).abs() < 1e-15);
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(rmse(empty.view(), empty.view()), Err(Error::Empty(_))));
        assert!(rmse(a.view(), array![[1.0]].view()).is_err());
    }

    #[test]
    fn prediction_ridge_limit_and_zero_row() {
        let cfg = CmfConfig { lambda_u: 0.0, intercepts: false, ..Default::default() };
        let vm = Array2::<f64>::eye(3);
        let vs = array![[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]];
        let model = CmfModel::from_factors(Array2::zeros((1, 3)), vs.clone(), vm.clone(), cfg.clone());
        let m = array![[0.5, -1.0, 2.0]];
        let pred = predict_shopping(&model, m.view(), &cfg).unwrap();
        let expect = m.dot(&vm).dot(&vs.t());
        for (p, e) in pred.iter().zip(expect.iter()) {
            assert!((p - e).abs() < 1e-6);
        }
        let zero = predict_shopping(&model, Array2::zeros((1, 3)).view(), &cfg).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn folds_partition_known_rows() {
        let rows: Vec<usize> = (0..23).filter(|i| i % 5 != 0).collect();
        let folds = assign_folds(&rows, 4, 9).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, rows);
        assert_eq!(folds, assign_folds(&rows, 4, 9).unwrap());
        assert!(assign_folds(&rows, 1, 0).is_err());
        assert!(assign_folds(&[1, 2], 3, 0).is_err());
    }

    #[test]
    fn empty_mask_and_bad_config_rejected() {
        let s = Array2::zeros((4, 2));
        let m = Array2::zeros((4, 2));
        assert!(fit(s.view(), m.view(), &RowMask::none(4), &CmfConfig::default()).is_err());
        let bad = CmfConfig { rank: 0, lambda_s: -1.0, tol: 0.0, ..Default::default() };
        assert_eq!(bad.violations().len(), 3);
    }

    fn planted(n: usize, k: usize, d: usize, r: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = randn(n, r, &mut rng);
        let vs = randn(k, r, &mut rng);
        let vm = randn(d, r, &mut rng);
        (u.dot(&vs.t()), u.dot(&vm.t()), u)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = randn(6, 3, &mut rng);
        let m = randn(6, 4, &mut rng);
        let mask = RowMask::from_indices(6, &[0, 2, 3, 5]).unwrap();
        let cfg = CmfConfig { lambda_u: 0.3, lambda_s: 0.2, lambda_m: 0.4, gamma_s: 0.0, gamma_m: 0.0, ..Default::default() };
        let mut model = CmfModel::from_factors(randn(6, 2, &mut rng), randn(3, 2, &mut rng), randn(4, 2, &mut rng), cfg.clone());
        model.shopping_offset = array![0.1, 0.2, -0.1];
        let (gu, gvs, gvm) = smooth_gradients(s.view(), m.view(), &mask, &model, &cfg).unwrap();
        let h = 1e-6;
        let f = |mm: &CmfModel| objective(s.view(), m.view(), &mask, mm, &cfg).unwrap();
        let check = |which: usize, grad: &Array2<f64>| {
            for idx in ndarray::indices(grad.dim()) {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let (p, q) = match which {
                    0 => (&mut plus.u, &mut minus.u),
                    1 => (&mut plus.vs, &mut minus.vs),
                    _ => (&mut plus.vm, &mut minus.vm),
                };
                p[(idx.0, idx.1)] += h;
                q[(idx.0, idx.1)] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let g = grad[(idx.0, idx.1)];
                assert!((fd - g).abs() <= 1e-5 * g.abs().max(1.0), "block {which} {idx:?}: {fd} vs {g}");
            }
        };
        check(0, &gu);
        check(1, &gvs);
        check(2, &gvm);
    }

    #[test]
    fn user_rows_match_gaussian_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = randn(4, 3, &mut rng);
        let m = randn(4, 5, &mut rng);
        let mask = RowMask::from_indices(4, &[1, 2]).unwrap();
        let lambda = 0.7;
        let mut model = CmfModel::from_factors(Array2::zeros((4, 2)), randn(3, 2, &mut rng), randn(5, 2, &mut rng), CmfConfig::default());
        model.shopping_offset = array![0.3, 0.0, -0.2];
        model.mobility_offset = array![0.1, 0.1, 0.0, 0.5, -0.4];
        let u = update_users(s.view(), m.view(), &mask, &model, lambda).unwrap();
        for i in 0..4 {
            // Normal equations assembled and solved by hand.
            let mut a = [[0.0f64; 3]; 2];
            for p in 0..2 {
                a[p][p] += lambda;
                for q in 0..2 {
                    for j in 0..5 {
                        a[p][q] += model.vm[[j, p]] * model.vm[[j, q]];
                    }
                    if mask.is_observed(i) {
                        for j in 0..3 {
                            a[p][q] += model.vs[[j, p]] * model.vs[[j, q]];
                        }
                    }
                }
                for j in 0..5 {
                    a[p][2] += model.vm[[j, p]] * (m[[i, j]] - model.mobility_offset[j]);
                }
                if mask.is_observed(i) {
                    for j in 0..3 {
                        a[p][2] += model.vs[[j, p]] * (s[[i, j]] - model.shopping_offset[j]);
                    }
                }
            }
            let factor = a[1][0] / a[0][0];
            let x1 = (a[1][2] - factor * a[0][2]) / (a[1][1] - factor * a[0][1]);
            let x0 = (a[0][2] - a[0][1] * x1) / a[0][0];
            assert!((u[[i, 0]] - x0).abs() < 1e-8 && (u[[i, 1]] - x1).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_history_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = randn(30, 5, &mut rng).mapv(f64::abs);
        let m = randn(30, 7, &mut rng).mapv(f64::abs);
        let mask = RowMask::from_indices(30, &(0..20).collect::<Vec<_>>()).unwrap();
        for gamma in [0.0, 0.5, 5.0] {
            let cfg = CmfConfig { rank: 4, gamma_s: gamma, gamma_m: gamma, tol: 1e-10, max_iter: 200, ..Default::default() };
            let model = fit(s.view(), m.view(), &mask, &cfg).unwrap();
            for w in model.objective_history.windows(2) {
                assert!(w[1] <= w[0] + MONOTONE_SLACK, "{} -> {}", w[0], w[1]);
            }
            let last = *model.objective_history.last().unwrap();
            let direct = objective(s.view(), m.view(), &mask, &model, &cfg).unwrap();
            assert!((last - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (s, m, _) = planted(20, 3, 4, 2, 2);
        let mask = RowMask::from_indices(20, &(0..15).collect::<Vec<_>>()).unwrap();
        let cfg = CmfConfig { rank: 2, ..Default::default() };
        let a = fit(s.view(), m.view(), &mask, &cfg).unwrap();
        let b = fit(s.view(), m.view(), &mask, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_planted_model_is_recovered() {
        let (s, m, _) = planted(60, 6, 8, 2, 3);
        let observed: Vec<usize> = (0..45).collect();
        let mask = RowMask::from_indices(60, &observed).unwrap();
        let cfg = CmfConfig {
            rank: 2,
            lambda_u: 1e-6,
            lambda_s: 1e-6,
            lambda_m: 1e-6,
            gamma_s: 0.0,
            gamma_m: 0.0,
            tol: 1e-14,
            max_iter: 5000,
            intercepts: false,
            ..Default::default()
        };
        let model = fit(s.view(), m.view(), &mask, &cfg).unwrap();
        let recon = model.reconstruct_shopping();
        let err = rmse(rows_of(s.view(), &observed).view(), rows_of(recon.view(), &observed).view()).unwrap();
        assert!(err < 1e-3, "{err}");
        let heldout: Vec<usize> = (45..60).collect();
        let pred = predict_shopping(&model, rows_of(m.view(), &heldout).view(), &cfg).unwrap();
        let err = rmse(rows_of(s.view(), &heldout).view(), pred.view()).unwrap();
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn huge_mobility_penalty_reduces_to_shopping_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = randn(25, 4, &mut rng);
        let m = randn(25, 6, &mut rng);
        let mask = RowMask::from_indices(25, &(0..18).collect::<Vec<_>>()).unwrap();
        for intercepts in [false, true] {
            let cfg = CmfConfig { rank: 2, gamma_m: 1e6, tol: 1e-300, max_iter: 150, intercepts, ..Default::default() };
            let joint = fit(s.view(), m.view(), &mask, &cfg).unwrap();
            assert!(joint.vm.iter().all(|&x| x == 0.0));
            let single = fit_shopping_only(s.view(), &mask, &cfg).unwrap();
            let centered = if intercepts { &m - &m.mean_axis(Axis(0)).unwrap() } else { m.clone() };
            let constant = linalg::frobenius_sq(centered.view());
            let fj = joint.objective_history.last().unwrap() - constant;
            let fs = single.objective_history.last().unwrap();
            assert!((fj - fs).abs() < 1e-6, "{fj} vs {fs}");
        }
    }

    #[test]
    fn scaling_data_scales_objective_at_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = randn(8, 3, &mut rng);
        let m = randn(8, 4, &mut rng);
        let mask = RowMask::all(8);
        let cfg = zero_penalties();
        let model = CmfModel::from_factors(randn(8, 2, &mut rng), randn(3, 2, &mut rng), randn(4, 2, &mut rng), cfg.clone());
        let c = 2.5;
        let mut scaled = model.clone();
        scaled.vs *= c;
        scaled.vm *= c;
        let f = objective(s.view(), m.view(), &mask, &model, &cfg).unwrap();
        let fc = objective((&s * c).view(), (&m * c).view(), &mask, &scaled, &cfg).unwrap();
        assert!((fc - c * c * f).abs() < 1e-9 * fc);
    }

    #[test]
    fn model_json_roundtrip() {
        let (s, m, _) = planted(10, 3, 3, 2, 4);
        let cfg = CmfConfig { rank: 2, max_iter: 5, ..Default::default() };
        let model = fit(s.view(), m.view(), &RowMask::all(10), &cfg).unwrap();
        let mut buf = Vec::new();
        model.write_json(&mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for key in ["U", "Vs", "Vm", "config", "objective_history"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: CmfModel = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, model);
    }
}
