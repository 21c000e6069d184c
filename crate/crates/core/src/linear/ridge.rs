use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::Mode;
use crate::autodiff::Tensor;
use crate::dataio::{Block, PreparedData, WindowBatch};
use crate::error::{shape_err, Error, Result};

/// Default cap on the number of local-mode weights (about 800 MB of `f64`).
pub const DEFAULT_LOCAL_BUDGET: usize = 100_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    /// `[p, H]`
    pub weights: Tensor,
    /// True when the system was singular and the minimum-norm solution was
    /// taken instead.
    pub pseudo_inverse: bool,
}

/// Minimizes `|X W - Y|^2 + lambda |W|^2` over `W`, leaving the rows listed in
/// `unpenalized` (e.g. an intercept column) out of the penalty.
pub fn fit_ridge(x: &Tensor, y: &Tensor, lambda: f64, unpenalized: &[usize]) -> Result<RidgeSolution> {
    let (xs, ys) = (x.shape(), y.shape());
    if xs.len() != 2 || ys.len() != 2 || xs[0] != ys[0] || xs[0] == 0 {
        return Err(shape_err("ridge", format!("design {xs:?} and targets {ys:?}")));
    }
    let xm = DMatrix::from_row_slice(xs[0], xs[1], x.data());
    let ym = DMatrix::from_row_slice(ys[0], ys[1], y.data());
    let gram = xm.transpose() * &xm;
    let xty = xm.transpose() * ym;
    solve_normal(gram, xty, lambda, unpenalized)
}

/// Solves `(G + lambda D) W = B` with `D` the identity minus the unpenalized
/// rows. Cholesky when the system is positive definite, otherwise the
/// pseudo-inverse of the symmetric matrix (minimum-norm least squares).
pub fn solve_normal(
    mut gram: DMatrix<f64>,
    xty: DMatrix<f64>,
    lambda: f64,
    unpenalized: &[usize],
) -> Result<RidgeSolution> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge penalty {lambda} must be finite and >= 0"
        )));
    }
    let p = gram.nrows();
    for i in 0..p {
        if !unpenalized.contains(&i) {
            gram[(i, i)] += lambda;
        }
    }
    let to_tensor = |w: DMatrix<f64>| -> Tensor {
        let (r, c) = w.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(w.row(i).iter());
        }
        Tensor::new(vec![r, c], data).expect("shape matches")
    };
    let scale = gram.diagonal().amax().max(1.0);
    if let Some(ch) = gram.clone().cholesky() {
        // reject numerically singular factors
        let dmin = ch
            .l_dirty()
            .diagonal()
            .iter()
            .fold(f64::INFINITY, |a, b| a.min(b.abs()));
        if dmin * dmin > scale * 1e-12 {
            return Ok(RidgeSolution {
                weights: to_tensor(ch.solve(&xty)),
                pseudo_inverse: false,
            });
        }
    }
    let eig = SymmetricEigen::new(gram);
    let tol = eig.eigenvalues.amax() * p as f64 * f64::EPSILON * 16.0;
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    let q = &eig.eigenvectors;
    let pinv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    Ok(RidgeSolution {
        weights: to_tensor(pinv * xty),
        pseudo_inverse: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeHeader {
    pub mode: Mode,
    pub window: usize,
    pub horizon: usize,
    pub channels: usize,
    pub n_series: usize,
    pub lambda: f64,
    pub intercept: bool,
    /// Shape of each stored matrix, in order.
    pub shapes: Vec<[usize; 2]>,
}

/// Closed-form linear forecaster on flattened windows.
///
/// The penalty `lambda` applies per pooled series.
///
/// Features per window: the `W * d_x` past values, then (hybrid) a one-hot
/// series indicator, then (with intercept) a constant 1. Targets: the
/// `H * d_x` future values.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeLinearModel {
    pub mode: Mode,
    pub window: usize,
    pub horizon: usize,
    pub channels: usize,
    pub n_series: usize,
    pub lambda: f64,
    pub intercept: bool,
    /// One matrix for global and hybrid, `N` for local.
    pub weights: Vec<Tensor>,
    pub pseudo_inverse: bool,
}

impl RidgeLinearModel {
    pub fn new(
        mode: Mode,
        window: usize,
        horizon: usize,
        channels: usize,
        n_series: usize,
        lambda: f64,
        intercept: bool,
    ) -> Result<Self> {
        if mode == Mode::Joint {
            return Err(Error::Config("ridge supports global, hybrid and local modes".into()));
        }
        let mut m = Self {
            mode,
            window,
            horizon,
            channels,
            n_series,
            lambda,
            intercept,
            weights: Vec::new(),
            pseudo_inverse: false,
        };
        let shape = vec![m.input_dim(), horizon * channels];
        let copies = if mode == Mode::Local { n_series } else { 1 };
        m.weights = vec![Tensor::zeros(shape); copies];
        Ok(m)
    }

    /// Columns of the design matrix.
    pub fn input_dim(&self) -> usize {
        let onehot = if self.mode == Mode::Hybrid { self.n_series } else { 0 };
        self.window * self.channels + onehot + usize::from(self.intercept)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    fn intercept_index(&self) -> Vec<usize> {
        if self.intercept {
            vec![self.input_dim() - 1]
        } else {
            Vec::new()
        }
    }

    fn features(&self, past: &[f64], series: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(past);
        if self.mode == Mode::Hybrid {
            out.extend((0..self.n_series).map(|j| if j == series { 1.0 } else { 0.0 }));
        }
        if self.intercept {
            out.push(1.0);
        }
    }

    /// Normal equations `(X^T X, X^T Y)` accumulated over the given rows of a
    /// batch; rows with any masked target are skipped.
    fn accumulate(&self, batch: &WindowBatch, rows: &[usize], gram: &mut DMatrix<f64>, xty: &mut DMatrix<f64>) {
        let (wd, hd) = (self.window * self.channels, self.horizon * self.channels);
        let mut f = Vec::with_capacity(self.input_dim());
        for &r in rows {
            if !batch.target_mask[r * hd..(r + 1) * hd].iter().all(|m| *m) {
                continue;
            }
            f.clear();
            self.features(&batch.past.data()[r * wd..(r + 1) * wd], batch.series[r], &mut f);
            let y = &batch.target.data()[r * hd..(r + 1) * hd];
            let x = nalgebra::DVectorView::from_slice(&f, f.len());
            gram.ger(1.0, &x, &x, 1.0);
            let yv = nalgebra::DVectorView::from_slice(y, y.len());
            xty.ger(1.0, &x, &yv, 1.0);
        }
    }

    /// Fits on every training window (stride 1). `budget` caps the total
    /// number of weights in local mode.
    pub fn fit(&mut self, data: &PreparedData, budget: usize) -> Result<()> {
        if data.window != self.window || data.horizon != self.horizon || data.channels() != self.channels {
            return Err(Error::Config("ridge shape does not match the prepared data".into()));
        }
        if self.mode == Mode::Local {
            let needed = self.n_series * self.input_dim() * self.horizon * self.channels;
            if needed > budget {
                return Err(Error::MemoryBudget { needed, budget });
            }
        }
        let starts = data.starts(Block::Train, 1)?;
        let (p, q) = (self.input_dim(), self.horizon * self.channels);
        let unpen = self.intercept_index();
        let fit_series = |series: &[usize]| -> Result<RidgeSolution> {
            let mut gram = DMatrix::zeros(p, p);
            let mut xty = DMatrix::zeros(p, q);
            for &s in series {
                let idx: Vec<_> = starts
                    .iter()
                    .map(|t| crate::dataio::WindowIndex { series: s, start: *t })
                    .collect();
                for chunk in idx.chunks(4096) {
                    let batch = data.batch(chunk);
                    let rows: Vec<usize> = (0..batch.len()).collect();
                    self.accumulate(&batch, &rows, &mut gram, &mut xty);
                }
            }
            // the penalty is per pooled series, so a global fit over copies of one
            // series matches that series' local fit
            solve_normal(gram, xty, self.lambda * series.len() as f64, &unpen)
        };
        let solutions: Vec<RidgeSolution> = if self.mode == Mode::Local {
            (0..self.n_series)
                .into_par_iter()
                .map(|s| fit_series(&[s]))
                .collect::<Result<_>>()?
        } else {
            let all: Vec<usize> = (0..self.n_series).collect();
            vec![fit_series(&all)?]
        };
        self.pseudo_inverse = solutions.iter().any(|s| s.pseudo_inverse);
        self.weights = solutions.into_iter().map(|s| s.weights).collect();
        Ok(())
    }

    /// Forecasts `[B, H, d_x]` for a batch.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Tensor> {
        let (wd, hd, p) = (
            self.window * self.channels,
            self.horizon * self.channels,
            self.input_dim(),
        );
        if batch.window() != self.window || batch.channels() != self.channels {
            return Err(shape_err(
                "ridge",
                format!("batch {:?} for window {}", batch.past.shape(), self.window),
            ));
        }
        let mut out = Vec::with_capacity(batch.len() * hd);
        let mut f = Vec::with_capacity(p);
        for r in 0..batch.len() {
            let s = batch.series[r];
            if s >= self.n_series {
                return Err(Error::UnknownSeries {
                    id: s,
                    n: self.n_series,
                });
            }
            f.clear();
            self.features(&batch.past.data()[r * wd..(r + 1) * wd], s, &mut f);
            let w = &self.weights[if self.mode == Mode::Local { s } else { 0 }];
            for j in 0..hd {
                out.push((0..p).map(|i| f[i] * w.data()[i * hd + j]).sum());
            }
        }
        Tensor::new(vec![batch.len(), self.horizon, self.channels], out)
    }

    pub fn header(&self) -> RidgeHeader {
        RidgeHeader {
            mode: self.mode,
            window: self.window,
            horizon: self.horizon,
            channels: self.channels,
            n_series: self.n_series,
            lambda: self.lambda,
            intercept: self.intercept,
            shapes: self.weights.iter().map(|w| [w.shape()[0], w.shape()[1]]).collect(),
        }
    }

    /// Layout: magic, `u32` header length, JSON header, then every matrix as
    /// little-endian `f64` in row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for m in &self.weights {
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let h: RidgeHeader = serde_json::from_slice(&header)?;
        let mut model = Self::new(
            h.mode,
            h.window,
            h.horizon,
            h.channels,
            h.n_series,
            h.lambda,
            h.intercept,
        )?;
        if h.shapes.len() != model.weights.len() {
            return Err(Error::Container(format!(
                "{} matrices for mode {:?}",
                h.shapes.len(),
                h.mode
            )));
        }
        for (slot, shape) in model.weights.iter_mut().zip(&h.shapes) {
            if slot.shape() != shape {
                return Err(Error::Container(format!(
                    "matrix shape {shape:?} != {:?}",
                    slot.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in slot.data_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Container("truncated payload".into()))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Container("trailing bytes".into()));
        }
        Ok(model)
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"TSRIDGE1";

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::{CovariateSet, SeriesCollection, SplitSpec};

    fn mat(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::new(vec![r, c], d.to_vec()).unwrap()
    }

    #[test]
    fn hand_solution() {
        let s = fit_ridge(&mat(2, 1, &[1.0, 2.0]), &mat(2, 1, &[2.0, 4.0]), 0.0, &[]).unwrap();
        assert!((s.weights.data()[0] - 2.0).abs() < 1e-12);
        assert!(!s.pseudo_inverse);
    }

    #[test]
    fn huge_penalty_shrinks_to_zero() {
        let s = fit_ridge(
            &mat(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            &mat(3, 1, &[1.0, 2.0, 3.0]),
            1e9,
            &[],
        )
        .unwrap();
        assert!(s.weights.data().iter().all(|w| w.abs() < 1e-8));
    }

    #[test]
    fn singular_system_takes_min_norm() {
        // duplicated column: any w1 + w2 = 2 fits, minimum norm is (1, 1)
        let s = fit_ridge(&mat(2, 2, &[1.0, 1.0, 2.0, 2.0]), &mat(2, 1, &[2.0, 4.0]), 0.0, &[]).unwrap();
        assert!(s.pseudo_inverse);
        assert!((s.weights.data()[0] - 1.0).abs() < 1e-10);
        assert!((s.weights.data()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn stationarity_of_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, p, h, lambda) = (30, 6, 3, 0.7);
        let x: Vec<f64> = (0..m * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = fit_ridge(&mat(m, p, &x), &mat(m, h, &y), lambda, &[p - 1]).unwrap();
        let xm = DMatrix::from_row_slice(m, p, &x);
        let ym = DMatrix::from_row_slice(m, h, &y);
        let w = DMatrix::from_row_slice(p, h, s.weights.data());
        let mut pen = w.clone();
        pen.row_mut(p - 1).fill(0.0);
        let grad = xm.transpose() * (&xm * &w - ym) + pen * lambda;
        assert!(grad.amax() < 1e-8);
    }

    fn collection(n: usize, t: usize, same: bool) -> SeriesCollection {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<f64> = (0..t)
            .map(|k| (k as f64 * 0.3).sin() + rng.random_range(-0.2..0.2))
            .collect();
        let values = (0..n)
            .flat_map(|i| {
                base.iter()
                    .map(|v| if same { *v } else { v * (1.0 + i as f64) })
                    .collect::<Vec<_>>()
            })
            .collect();
        SeriesCollection::new(n, t, 1, values, (0..t as i64).collect(), 1).unwrap()
    }

    #[test]
    fn global_on_identical_series_equals_local_fit() {
        let c = collection(3, 120, true);
        let d = PreparedData::new(&c, &SplitSpec::default(), false, CovariateSet::None, 5, 2).unwrap();
        let mut g = RidgeLinearModel::new(Mode::Global, 5, 2, 1, 3, 0.1, true).unwrap();
        g.fit(&d, DEFAULT_LOCAL_BUDGET).unwrap();
        let mut l = RidgeLinearModel::new(Mode::Local, 5, 2, 1, 3, 0.1, true).unwrap();
        l.fit(&d, DEFAULT_LOCAL_BUDGET).unwrap();
        for w in &l.weights {
            assert!(w.max_abs_diff(&g.weights[0]) < 1e-8);
        }
        assert_eq!(l.weights.len(), 3);
        assert_eq!(g.weights.len(), 1);
    }

    #[test]
    fn param_counts() {
        let g = RidgeLinearModel::new(Mode::Global, 96, 96, 1, 321, 1.0, false).unwrap();
        assert_eq!(g.param_count(), 9216);
        let l = RidgeLinearModel::new(Mode::Local, 96, 96, 1, 321, 1.0, false).unwrap();
        assert_eq!(l.param_count(), 321 * 9216);
        let h = RidgeLinearModel::new(Mode::Hybrid, 96, 96, 1, 321, 1.0, false).unwrap();
        assert_eq!(h.param_count(), 9216 + 321 * 96);
        let h = RidgeLinearModel::new(Mode::Hybrid, 96, 96, 1, 321, 1.0, true).unwrap();
        assert_eq!(h.input_dim(), 96 + 321 + 1);
    }

    #[test]
    fn memory_guard() {
        let c = collection(3, 120, false);
        let d = PreparedData::new(&c, &SplitSpec::default(), false, CovariateSet::None, 5, 2).unwrap();
        let mut l = RidgeLinearModel::new(Mode::Local, 5, 2, 1, 3, 0.1, true).unwrap();
        let err = l.fit(&d, 10).unwrap_err();
        assert!(matches!(err, Error::MemoryBudget { needed: 36, budget: 10 }));
    }

    #[test]
    fn container_round_trip() {
        let c = collection(3, 120, false);
        let d = PreparedData::new(&c, &SplitSpec::default(), false, CovariateSet::None, 5, 2).unwrap();
        let mut m = RidgeLinearModel::new(Mode::Hybrid, 5, 2, 1, 3, 0.1, true).unwrap();
        m.fit(&d, DEFAULT_LOCAL_BUDGET).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        m.save(f.path()).unwrap();
        assert_eq!(RidgeLinearModel::load(f.path()).unwrap(), m);
        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() - 3]).unwrap();
        assert!(RidgeLinearModel::load(f.path()).is_err());
    }

    #[test]
    fn predictions_use_the_right_copy() {
        let c = collection(3, 120, false);
        let d = PreparedData::new(&c, &SplitSpec::default(), false, CovariateSet::None, 5, 2).unwrap();
        let mut l = RidgeLinearModel::new(Mode::Local, 5, 2, 1, 3, 0.0, true).unwrap();
        l.fit(&d, DEFAULT_LOCAL_BUDGET).unwrap();
        let idx = d.windows(Block::Test, 1).unwrap();
        let b = d.batch(&idx);
        let pred = l.predict(&b).unwrap();
        assert_eq!(pred.shape(), &[idx.len(), 2, 1]);
        let r = 0;
        let s = b.series[r];
        let w = &l.weights[s];
        let manual: f64 = (0..5).map(|i| b.past.data()[i] * w.data()[i * 2]).sum::<f64>() + w.data()[5 * 2];
        assert!((pred.data()[0] - manual).abs() < 1e-12);
    }
}
