//! Linear decoding analysis: capture denoiser hidden states across layers and
//! sampling timesteps, reduce them with PCA, fit regularized regressions from
//! voxels to the reduced features, and export per-voxel weight maps.

use crate::diffusion::{sample_latents, NoiseSchedule, Stage, TapRecorder, UNet};
use crate::error::{CndError, Result};
use crate::tensor::Arr;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L2,
    L1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// (stage, layer index) taps to record.
    pub layers: Vec<(Stage, usize)>,
    /// Sampling timesteps at which to record.
    pub timesteps: Vec<usize>,
    pub pca_components: usize,
    pub lambda: f64,
    pub penalty: Penalty,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            layers: vec![(Stage::Encoder, 0), (Stage::Middle, 0), (Stage::Decoder, 0)],
            timesteps: vec![0, 50, 150, 249],
            pca_components: 300,
            lambda: 1.0,
            penalty: Penalty::L2,
            seed: 0,
        }
    }
}

/// Runs seeded sampling once per condition and records spatially-averaged
/// activations at every configured (layer, timestep). Each returned matrix
/// has one row per condition.
pub fn capture_features(
    unet: &UNet,
    schedule: &NoiseSchedule,
    conditions: &[(Arr, Option<Arr>)],
    config: &AnalysisConfig,
) -> Result<BTreeMap<(Stage, usize, usize), Array2<f64>>> {
    if conditions.is_empty() {
        return Err(CndError::Input("no conditions to capture".into()));
    }
    if config.layers.is_empty() || config.timesteps.is_empty() {
        return Err(CndError::Config("layers and timesteps must be non-empty".into()));
    }
    for &t in &config.timesteps {
        if t >= schedule.t_steps {
            return Err(CndError::Config(format!(
                "timestep {t} outside schedule 0..{}",
                schedule.t_steps
            )));
        }
    }
    let mut recorder = TapRecorder::new(unet.tap_layout());
    for &(stage, layer) in &config.layers {
        recorder.register(stage, layer)?;
    }
    for &t in &config.timesteps {
        recorder.watch_timestep(t);
    }
    for (i, (ctx, time_add)) in conditions.iter().enumerate() {
        sample_latents(
            unet,
            schedule,
            ctx,
            time_add.as_ref(),
            crate::contrastive::derive_seed(config.seed, 50, i as u64),
            Some(&mut recorder),
        )?;
    }
    let captured = recorder.read_taps();
    for m in captured.values() {
        if m.nrows() != conditions.len() {
            return Err(CndError::State("capture row count mismatch".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CndError::Diverged("non-finite captured activation".into()));
        }
    }
    Ok(captured)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReducedFeatures {
    /// Samples x components projection.
    pub scores: Array2<f64>,
    /// Original dim x components, orthonormal columns.
    pub basis: Array2<f64>,
    pub mean: Array1<f64>,
    /// Per-component explained variance, non-increasing.
    pub variances: Array1<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors as columns), sorted by descending eigenvalue.
fn jacobi_eigh(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.diag().iter().map(|d| d.abs()).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        vecs.column_mut(col).assign(&v.column(i));
    }
    (vals, vecs)
}

/// Mean-centered projection onto the top-k principal directions.
pub fn pca_reduce(features: &Array2<f64>, k: usize) -> Result<ReducedFeatures> {
    let (n, d) = (features.nrows(), features.ncols());
    if n < 2 {
        return Err(CndError::Input("PCA needs at least 2 samples".into()));
    }
    if k == 0 || k > d.min(n - 1) {
        return Err(CndError::Config(format!(
            "k={k} must be in [1, min(dim={d}, samples-1={})]",
            n - 1
        )));
    }
    let mean = features.mean_axis(Axis(0)).unwrap();
    let centered = features - &mean.clone().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let (vals, vecs) = jacobi_eigh(&cov);
    let basis = vecs.slice(ndarray::s![.., ..k]).to_owned();
    let variances = Array1::from_iter(vals.iter().take(k).map(|v| v.max(0.0)));
    let scores = centered.dot(&basis);
    Ok(ReducedFeatures { scores, basis, mean, variances })
}

impl ReducedFeatures {
    /// Projects new rows into the learned component space.
    pub fn project(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.mean.clone().insert_axis(Axis(0))).dot(&self.basis)
    }

    /// Back-projection (exact only for full-rank data).
    pub fn reconstruct(&self, scores: &Array2<f64>) -> Array2<f64> {
        scores.dot(&self.basis.t()) + &self.mean.clone().insert_axis(Axis(0))
    }
}

// ---------------------------------------------------------------------------
// Regularized regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RegressionResult {
    /// voxels x components.
    pub w: Array2<f64>,
    pub lambda: f64,
    pub penalty: Penalty,
    /// Held-out R-squared per component (in-sample when N is too small to split).
    pub per_component_r2: Vec<f64>,
    /// Set when a singular system at lambda=0 forced a jittered solve.
    pub condition_warning: bool,
}

/// Gaussian elimination with partial pivoting; returns None when singular.
fn solve_multi(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut rhs = b.clone();
    let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for col in 0..n {
        let mut piv = col;
        for r in (col + 1)..n {
            if m[[r, col]].abs() > m[[piv, col]].abs() {
                piv = r;
            }
        }
        if m[[piv, col]].abs() < 1e-12 * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                m.swap([col, c], [piv, c]);
            }
            for c in 0..rhs.ncols() {
                rhs.swap([col, c], [piv, c]);
            }
        }
        for r in (col + 1)..n {
            let f = m[[r, col]] / m[[col, col]];
            for c in col..n {
                m[[r, c]] -= f * m[[col, c]];
            }
            for c in 0..rhs.ncols() {
                rhs[[r, c]] -= f * rhs[[col, c]];
            }
        }
    }
    let mut x = Array2::zeros((n, rhs.ncols()));
    for col in (0..n).rev() {
        for c in 0..rhs.ncols() {
            let mut acc = rhs[[col, c]];
            for k in (col + 1)..n {
                acc -= m[[col, k]] * x[[k, c]];
            }
            x[[col, c]] = acc / m[[col, col]];
        }
    }
    Some(x)
}

/// Closed-form ridge: W = (V^T V + lambda I)^-1 V^T H, using the dual form
/// W = V^T (V V^T + lambda I)^-1 H when there are more voxels than samples.
fn ridge_fit(v: &Array2<f64>, h: &Array2<f64>, lambda: f64) -> (Array2<f64>, bool) {
    let (n, p) = (v.nrows(), v.ncols());
    let mut warned = false;
    let solve_reg = |a: &Array2<f64>, b: &Array2<f64>, warned: &mut bool| {
        match solve_multi(a, b) {
            Some(x) => x,
            None => {
                *warned = true;
                let n = a.nrows();
                let jitter = 1e-10 * (a.diag().sum() / n as f64).max(1e-10);
                let mut aj = a.clone();
                for i in 0..n {
                    aj[[i, i]] += jitter;
                }
                solve_multi(&aj, b).expect("jittered system still singular")
            }
        }
    };
    let w = if p <= n {
        let mut a = v.t().dot(v);
        for i in 0..p {
            a[[i, i]] += lambda;
        }
        let b = v.t().dot(h);
        solve_reg(&a, &b, &mut warned)
    } else {
        let mut a = v.dot(&v.t());
        for i in 0..n {
            a[[i, i]] += lambda;
        }
        let x = solve_reg(&a, h, &mut warned);
        v.t().dot(&x)
    };
    (w, warned)
}

/// Lasso by cyclic coordinate descent on ||Vw - h||^2 + lambda ||w||_1,
/// run per component to a duality-gap tolerance of 1e-6.
fn lasso_fit(v: &Array2<f64>, h: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let (n, p) = (v.nrows(), v.ncols());
    let k = h.ncols();
    let col_sq: Vec<f64> = (0..p).map(|j| v.column(j).dot(&v.column(j))).collect();
    let mut w = Array2::zeros((p, k));
    for comp in 0..k {
        let target = h.column(comp).to_owned();
        let mut wc = Array1::zeros(p);
        let mut residual = target.clone(); // h - V wc, with wc = 0
        for _iter in 0..10_000 {
            for j in 0..p {
                if col_sq[j] == 0.0 {
                    continue;
                }
                let old = wc[j];
                let rho = v.column(j).dot(&residual) + col_sq[j] * old;
                let new = soft_threshold(rho, lambda / 2.0) / col_sq[j];
                if new != old {
                    let vj = v.column(j);
                    for i in 0..n {
                        residual[i] -= vj[i] * (new - old);
                    }
                    wc[j] = new;
                }
            }
            if lasso_duality_gap(v, &target, &wc, &residual, lambda) <= 1e-6 {
                break;
            }
        }
        w.column_mut(comp).assign(&wc);
    }
    w
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

/// Fenchel duality gap for P(w) = ||Vw - h||^2 + lambda ||w||_1 with the
/// scaled residual as the dual candidate.
fn lasso_duality_gap(
    v: &Array2<f64>,
    h: &Array1<f64>,
    w: &Array1<f64>,
    residual: &Array1<f64>,
    lambda: f64,
) -> f64 {
    let primal = residual.dot(residual) + lambda * w.iter().map(|x| x.abs()).sum::<f64>();
    // Dual candidate u = -2 r, scaled into the feasible set ||V^T u||_inf <= lambda.
    let u = residual * -2.0;
    let vtu = v.t().dot(&u);
    let max_abs = vtu.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let s = if max_abs > lambda { lambda / max_abs } else { 1.0 };
    let us = &u * s;
    let dual = -us.dot(h) - us.dot(&us) / 4.0;
    primal - dual
}

fn r_squared(pred: &Array1<f64>, truth: &Array1<f64>) -> f64 {
    let mean = truth.mean().unwrap();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    if ss_tot <= 1e-300 {
        if ss_res <= 1e-300 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Fits W mapping voxel rows to reduced-feature rows. W is fit on all rows;
/// the reported per-component R-squared comes from a refit on a seeded 80/20
/// split (in-sample when fewer than 5 rows).
pub fn fit_regularized_regression(
    v: &Array2<f64>,
    h: &Array2<f64>,
    lambda: f64,
    penalty: Penalty,
    seed: u64,
) -> Result<RegressionResult> {
    let n = v.nrows();
    if n < 2 || h.nrows() != n {
        return Err(CndError::Input(format!(
            "need matching row counts >= 2, got {} and {}",
            n,
            h.nrows()
        )));
    }
    if lambda < 0.0 {
        return Err(CndError::Config("lambda must be non-negative".into()));
    }
    let fit = |vv: &Array2<f64>, hh: &Array2<f64>| -> (Array2<f64>, bool) {
        match penalty {
            Penalty::L2 => ridge_fit(vv, hh, lambda),
            Penalty::L1 => (lasso_fit(vv, hh, lambda), false),
        }
    };
    let (w, condition_warning) = fit(v, h);

    // Held-out R-squared on a seeded split.
    let per_component_r2 = if n >= 5 {
        let order = crate::synth_data::batch_indices(n, n, seed, false)
            .into_iter()
            .next()
            .unwrap();
        let n_eval = (n / 5).max(1);
        let (eval_idx, train_idx) = order.split_at(n_eval);
        let take = |m: &Array2<f64>, idx: &[usize]| m.select(Axis(0), idx);
        let (w_train, _) = fit(&take(v, train_idx), &take(h, train_idx));
        let pred = take(v, eval_idx).dot(&w_train);
        let truth = take(h, eval_idx);
        (0..h.ncols())
            .map(|c| r_squared(&pred.column(c).to_owned(), &truth.column(c).to_owned()))
            .collect()
    } else {
        let pred = v.dot(&w);
        (0..h.ncols())
            .map(|c| r_squared(&pred.column(c).to_owned(), &h.column(c).to_owned()))
            .collect()
    };
    Ok(RegressionResult { w, lambda, penalty, per_component_r2, condition_warning })
}

/// Column-wise z-scoring (constant columns stay zero).
pub fn zscore_columns(v: &Array2<f64>) -> Array2<f64> {
    let n = v.nrows() as f64;
    let mut out = v.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 {
            col.mapv_inplace(|x| (x - mean) / std);
        } else {
            col.fill(0.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Weight maps
// ---------------------------------------------------------------------------

/// Per-voxel contribution: mean of |W| over components and over the grouped
/// regression results.
pub fn weight_map(results: &[&RegressionResult]) -> Result<Array1<f64>> {
    if results.is_empty() {
        return Err(CndError::Config("empty weight-map grouping".into()));
    }
    let voxels = results[0].w.nrows();
    for r in results {
        if r.w.nrows() != voxels {
            return Err(CndError::Shape("grouped results disagree on voxel count".into()));
        }
    }
    let mut map = Array1::zeros(voxels);
    for r in results {
        let k = r.w.ncols() as f64;
        for (vx, row) in r.w.rows().into_iter().enumerate() {
            map[vx] += row.iter().map(|x| x.abs()).sum::<f64>() / k;
        }
    }
    Ok(map / results.len() as f64)
}

/// Writes the voxel scores as CSV and as a grayscale PNG heatmap. The voxel
/// vector is rasterized row-major into a square of side ceil(sqrt(V)),
/// padding unused cells with zero; intensities are scaled so the maximum
/// score maps to white.
pub fn export_weight_map(
    csv_path: &Path,
    png_path: &Path,
    results: &[&RegressionResult],
) -> Result<Array1<f64>> {
    let map = weight_map(results)?;
    let mut csv = String::from("voxel,score\n");
    for (i, v) in map.iter().enumerate() {
        csv.push_str(&format!("{i},{v:.9}\n"));
    }
    std::fs::write(csv_path, csv)?;

    let v = map.len();
    let side = (v as f64).sqrt().ceil() as u32;
    let max = map.iter().cloned().fold(0.0, f64::max);
    let mut img = image::GrayImage::new(side, side);
    for (i, val) in map.iter().enumerate() {
        let x = (i as u32) % side;
        let y = (i as u32) / side;
        let px = if max > 0.0 { (val / max * 255.0).round() as u8 } else { 0 };
        img.put_pixel(x, y, image::Luma([px]));
    }
    img.save(png_path)
        .map_err(|e| CndError::Io(std::io::Error::other(e.to_string())))?;
    Ok(map)
}
