//! Fit attribute: garment/body distance matrix over all training pairs and
//! its maximum-likelihood factor analysis.
//!
//! Columns of the distance matrix `D` (one per garment-body pair) are modelled
//! as i.i.d. Gaussian with `D − μ ≈ L·A`, diagonal noise `Ψ`. `L` and `Ψ` are
//! found by alternating an exact SVD solve for the loadings given `Ψ` with the
//! EM update of `Ψ`; the fit attribute of a pair is the posterior mean factor
//! `E[a | d]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::{nearest_vertex_map, IndicatorMap, TriMesh};
use crate::stats;
use crate::tensor::Tensor;

/// Lower bound for noise variances.
pub const MIN_NOISE_VAR: f64 = 1e-9;

/// One garment draped on one unposed body.
#[derive(Clone, Debug)]
pub struct FitPair {
    pub garment_id: String,
    pub body_id: String,
    pub garment: TriMesh,
    pub body: TriMesh,
    pub indicator: IndicatorMap,
}

impl FitPair {
    /// Pairs a garment with a body, associating vertices by nearest neighbor.
    pub fn new(garment_id: impl Into<String>, body_id: impl Into<String>, garment: TriMesh, body: TriMesh) -> Result<Self> {
        let indicator = nearest_vertex_map(&garment, &body)?;
        Ok(Self {
            garment_id: garment_id.into(),
            body_id: body_id.into(),
            garment,
            body,
            indicator,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PairRegistry {
    pairs: Vec<FitPair>,
    probe_count: usize,
}

impl PairRegistry {
    pub fn new(pairs: Vec<FitPair>) -> Result<Self> {
        if pairs.is_empty() {
            return invalid("pair registry is empty");
        }
        for (k, p) in pairs.iter().enumerate() {
            p.indicator.validate()?;
            if p.indicator.len() != p.garment.vertex_count() || p.indicator.body_vertex_count != p.body.vertex_count() {
                return invalid(format!("indicator of pair {k} does not match its meshes"));
            }
        }
        let probe_count = pairs.iter().map(|p| p.garment.vertex_count()).min().unwrap_or(0);
        if probe_count == 0 {
            return invalid("registry contains an empty garment");
        }
        Ok(Self { pairs, probe_count })
    }

    pub fn pairs(&self) -> &[FitPair] {
        &self.pairs
    }

    pub fn probe_count(&self) -> usize {
        self.probe_count
    }
}

/// Evenly spread probe vertices `⌊i·n / probes⌋`.
pub fn probe_indices(vertex_count: usize, probe_count: usize) -> Result<Vec<usize>> {
    if probe_count == 0 || probe_count > vertex_count {
        return invalid(format!("cannot take {probe_count} probes from {vertex_count} vertices"));
    }
    Ok((0..probe_count).map(|i| i * vertex_count / probe_count).collect())
}

/// Garment-to-associated-body-vertex distances at the probe vertices.
pub fn pair_distances(garment: &TriMesh, body: &TriMesh, indicator: &IndicatorMap, probe_count: usize) -> Result<Vec<f64>> {
    let projected = indicator.project(body)?;
    if projected.len() != garment.vertex_count() {
        return invalid("indicator length differs from garment vertex count");
    }
    Ok(probe_indices(garment.vertex_count(), probe_count)?
        .into_iter()
        .map(|i| (garment.vertices[i] - projected[i]).norm())
        .collect())
}

/// `N_{g*} × N_pair` distance matrix, one column per registered pair.
pub fn distance_matrix(registry: &PairRegistry) -> Result<Tensor> {
    let n = registry.probe_count();
    let mut d = Tensor::zeros(n, registry.pairs().len());
    for (col, pair) in registry.pairs().iter().enumerate() {
        let dist = pair_distances(&pair.garment, &pair.body, &pair.indicator, n)?;
        for (row, v) in dist.into_iter().enumerate() {
            d.set(row, col, v);
        }
    }
    Ok(d)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Log-likelihood after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Noise variances that hit [`MIN_NOISE_VAR`] in the final iterate.
    pub clamped_noise: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    pub mu: Vec<f64>,
    /// `N_{g*} × F`.
    pub loading: Tensor,
    pub noise_var: Vec<f64>,
    /// `F × N_pair` posterior mean factors of the training columns.
    pub factors: Tensor,
    pub factor_count: usize,
    /// Whether the first factor was negated so that it decreases with the mean
    /// garment-body distance.
    pub first_factor_flipped: bool,
    pub seed: u64,
    pub diagnostics: FitDiagnostics,
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut t = Tensor::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            t.set(r, c, m[(r, c)]);
        }
    }
    t
}

/// Exact Gaussian log-likelihood of the centered samples (rows of `x`) under
/// covariance `W·Wᵀ + diag(ψ)`, evaluated through the determinant lemma.
fn log_likelihood(x: &DMatrix<f64>, w: &DMatrix<f64>, psi: &[f64]) -> f64 {
    let (n, p) = (x.nrows() as f64, x.ncols());
    let f = w.ncols();
    let inv_sqrt: Vec<f64> = psi.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut xs = x.clone();
    let mut ws = w.clone();
    for j in 0..p {
        xs.column_mut(j).scale_mut(inv_sqrt[j]);
        ws.row_mut(j).scale_mut(inv_sqrt[j]);
    }
    let m = DMatrix::<f64>::identity(f, f) + ws.transpose() * &ws;
    let chol = m.clone().cholesky().expect("I + WᵀΨ⁻¹W is positive definite");
    let log_det_m = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_det_c = psi.iter().map(|v| v.ln()).sum::<f64>() + log_det_m;
    let xw = &xs * &ws;
    let trace_s = xs.norm_squared() / n;
    let correction = (chol.solve(&(xw.transpose() * &xw))).trace() / n;
    let trace = trace_s - correction;
    -0.5 * n * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_c + trace)
}

/// Maximum-likelihood factor analysis of the columns of `d`.
///
/// Stops when the relative log-likelihood gain drops below `tol` or after
/// `max_iter` iterations.
pub fn fit_factor_analysis(d: &Tensor, factor_count: usize, tol: f64, max_iter: usize, seed: u64) -> Result<FitModel> {
    let (p, n) = (d.rows(), d.cols());
    if n < 2 {
        return invalid(format!("factor analysis needs at least two pairs, got {n}"));
    }
    if factor_count == 0 || factor_count > p.min(n - 1) {
        return invalid(format!("{factor_count} factors for {p} probes and {n} pairs"));
    }
    if !d.all_finite() {
        return invalid("distance matrix has non-finite entries");
    }
    let dm = to_dmatrix(d);
    let mu: Vec<f64> = (0..p).map(|r| dm.row(r).mean()).collect();
    // samples as rows
    let mut x = dm.transpose();
    for j in 0..p {
        x.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let variance: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared() / n as f64).collect();
    let nsqrt = (n as f64).sqrt();

    let top_right = |m: &DMatrix<f64>| -> (Vec<f64>, DMatrix<f64>) {
        let svd = m.clone().svd(false, true);
        let vt = svd.v_t.expect("requested V");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let k = factor_count.min(order.len());
        let s: Vec<f64> = order[..k].iter().map(|&i| svd.singular_values[i]).collect();
        let mut rows = DMatrix::zeros(factor_count, m.ncols());
        for (r, &i) in order[..k].iter().enumerate() {
            rows.row_mut(r).copy_from(&vt.row(i));
        }
        (s, rows)
    };

    // initial loadings from the scaled top-F SVD of the centered data
    let (s0, vt0) = top_right(&(&x / nsqrt));
    let mut w = DMatrix::zeros(p, factor_count);
    for k in 0..s0.len() {
        for j in 0..p {
            w[(j, k)] = vt0[(k, j)] * s0[k];
        }
    }
    let mut psi: Vec<f64> = (0..p)
        .map(|j| (variance[j] - w.row(j).norm_squared()).max(MIN_NOISE_VAR))
        .collect();

    let mut diagnostics = FitDiagnostics::default();
    let mut previous = f64::NEG_INFINITY;
    for iter in 0..max_iter {
        // loadings maximising the likelihood for the current noise
        let sqrt_psi: Vec<f64> = psi.iter().map(|v| v.sqrt()).collect();
        let mut scaled = &x / nsqrt;
        for j in 0..p {
            scaled.column_mut(j).scale_mut(1.0 / sqrt_psi[j]);
        }
        let (s, vt) = top_right(&scaled);
        w = DMatrix::zeros(p, factor_count);
        for k in 0..s.len() {
            let gain = (s[k] * s[k] - 1.0).max(0.0).sqrt();
            for j in 0..p {
                w[(j, k)] = gain * vt[(k, j)] * sqrt_psi[j];
            }
        }
        let ll = log_likelihood(&x, &w, &psi);
        diagnostics.log_likelihood.push(ll);
        diagnostics.iterations = iter + 1;
        if previous.is_finite() && (ll - previous) <= tol * previous.abs().max(1.0) {
            diagnostics.converged = true;
            break;
        }
        previous = ll;
        psi = (0..p)
            .map(|j| (variance[j] - w.row(j).norm_squared()).max(MIN_NOISE_VAR))
            .collect();
    }
    diagnostics.clamped_noise = psi.iter().filter(|&&v| v <= MIN_NOISE_VAR).count();
    if diagnostics.clamped_noise > 0 {
        log::debug!("{} noise variances clamped to {MIN_NOISE_VAR}", diagnostics.clamped_noise);
    }

    // order factors by explained variance, make signs canonical
    let mut order: Vec<usize> = (0..factor_count).collect();
    let col_norm: Vec<f64> = (0..factor_count).map(|k| w.column(k).norm_squared()).collect();
    order.sort_by(|&a, &b| col_norm[b].total_cmp(&col_norm[a]).then(a.cmp(&b)));
    let mut loading = DMatrix::zeros(p, factor_count);
    for (dst, &src) in order.iter().enumerate() {
        let col = w.column(src);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        loading.set_column(dst, &(col * sign));
    }

    let mut model = FitModel {
        mu,
        loading: to_tensor(&loading),
        noise_var: psi,
        factors: Tensor::zeros(factor_count, n),
        factor_count,
        first_factor_flipped: false,
        seed,
        diagnostics,
    };
    let mut factors = model.posterior_factors(&dm)?;
    let mean_distance: Vec<f64> = (0..n).map(|c| dm.column(c).mean()).collect();
    let first: Vec<f64> = factors.row(0).iter().copied().collect();
    if stats::pearson(&first, &mean_distance) > 0.0 {
        model.first_factor_flipped = true;
        for j in 0..p {
            let v = model.loading.get(j, 0);
            model.loading.set(j, 0, -v);
        }
        factors.row_mut(0).neg_mut();
    }
    model.factors = to_tensor(&factors);
    Ok(model)
}

impl FitModel {
    pub fn probe_count(&self) -> usize {
        self.mu.len()
    }

    /// Posterior mean factors of every column of `d` (`F × cols`).
    fn posterior_factors(&self, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.probe_count();
        if d.nrows() != p {
            return invalid(format!("{} distances for a fit model over {p} probes", d.nrows()));
        }
        let l = to_dmatrix(&self.loading);
        let mut lt_psi_inv = l.transpose();
        for j in 0..p {
            lt_psi_inv.column_mut(j).scale_mut(1.0 / self.noise_var[j]);
        }
        let precision = DMatrix::<f64>::identity(self.factor_count, self.factor_count) + &lt_psi_inv * &l;
        let chol = precision
            .cholesky()
            .ok_or_else(|| crate::Error::Validation("posterior precision is not positive definite".into()))?;
        let mut centered = d.clone();
        for j in 0..p {
            centered.row_mut(j).add_scalar_mut(-self.mu[j]);
        }
        Ok(chol.solve(&(lt_psi_inv * centered)))
    }

    /// Fit attribute `α = (I + LᵀΨ⁻¹L)⁻¹ LᵀΨ⁻¹ (d − μ)` of one pair.
    pub fn fit_vector(&self, pair_distances: &[f64]) -> Result<Vec<f64>> {
        if pair_distances.len() != self.probe_count() {
            return invalid(format!(
                "{} distances for a fit model over {} probes",
                pair_distances.len(),
                self.probe_count()
            ));
        }
        let d = DMatrix::from_column_slice(pair_distances.len(), 1, pair_distances);
        let a = self.posterior_factors(&d)?;
        Ok(a.column(0).iter().copied().collect())
    }

    /// Fit attribute of a garment draped on an unposed body.
    pub fn alpha_for(&self, garment: &TriMesh, unposed_body: &TriMesh, indicator: &IndicatorMap) -> Result<Vec<f64>> {
        self.fit_vector(&pair_distances(garment, unposed_body, indicator, self.probe_count())?)
    }

    /// Stored factors of training column `pair`.
    pub fn training_alpha(&self, pair: usize) -> Vec<f64> {
        (0..self.factor_count).map(|k| self.factors.get(k, pair)).collect()
    }

    /// `‖(D − μ) − L·A‖_F / ‖D − μ‖_F` over the training columns.
    pub fn reconstruction_error(&self, d: &Tensor) -> f64 {
        let dm = to_dmatrix(d);
        let l = to_dmatrix(&self.loading);
        let a = to_dmatrix(&self.factors);
        let mut centered = dm.clone();
        for j in 0..self.probe_count() {
            centered.row_mut(j).add_scalar_mut(-self.mu[j]);
        }
        let residual = &centered - l * a;
        residual.norm() / centered.norm().max(f64::MIN_POSITIVE)
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
