//! Diagnostics: attention spectra, TUR/CUR distributions and the two-sample z-test.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::{compute_cur, TurTable};
use crate::autodiff::Tape;
use crate::block::Mode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synth::{Modality, SequenceRecord};
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U·diag(s)·Vᵀ` with `s` sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// m × r
    pub u: Tensor,
    pub s: Vec<f64>,
    /// n × r
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut us = self.u.clone();
        let r = self.s.len();
        for i in 0..us.rows() {
            for j in 0..r {
                let x = us.get(i, j) * self.s[j];
                us.set(i, j, x);
            }
        }
        us.matmul(&self.v.transpose()?)
    }
}

/// One-sided (Hestenes) Jacobi on the columns of an m × n matrix, m >= n.
/// Returns the orthogonalized columns (as rows) and, optionally, V (as rows).
fn hestenes(cols: &mut [Vec<f64>], mut v: Option<&mut [Vec<f64>]>) {
    let n = cols.len();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (ci, cj) = {
                    let (a, b) = cols.split_at_mut(j);
                    (&mut a[i], &mut b[0])
                };
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in ci.iter().zip(cj.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                if let Some(v) = v.as_deref_mut() {
                    let (a, b) = v.split_at_mut(j);
                    for (x, y) in a[i].iter_mut().zip(b[0].iter_mut()) {
                        let (p, q) = (*x, *y);
                        *x = c * p - s * q;
                        *y = s * p + c * q;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

fn columns(a: &Tensor) -> Vec<Vec<f64>> {
    let (m, n) = (a.rows(), a.cols());
    (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect()
}

fn check_finite(a: &Tensor) -> Result<(usize, usize)> {
    let dims = a.matrix_dims()?;
    if !a.is_finite() {
        return Err(Error::Data("matrix has non-finite entries".into()));
    }
    Ok(dims)
}

pub fn jacobi_svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = check_finite(a)?;
    if m < n {
        let t = jacobi_svd(&a.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let mut cols = columns(a);
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect())
        .collect();
    hestenes(&mut cols, Some(&mut v));
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > 0.0 {
            for i in 0..m {
                u.set(i, k, cols[j][i] / norms[j]);
            }
        }
        for i in 0..n {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

/// Singular values only, sorted descending.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    check_finite(a)?;
    let a = if a.rows() < a.cols() {
        a.transpose()?
    } else {
        a.clone()
    };
    let mut cols = columns(&a);
    hestenes(&mut cols, None);
    let mut s: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Mean of the sorted singular values by rank (shorter spectra padded with 0).
    pub singular_values: Vec<f64>,
    /// Mean normalized cumulative curve (shorter curves padded with 1).
    pub curve: Vec<f64>,
    pub count: usize,
}

/// `cumsum(s) / sum(s)`.
pub fn cumulative_curve(s: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all singular values are zero".into()));
    }
    let mut acc = 0.0;
    let mut curve: Vec<f64> = s
        .iter()
        .map(|x| {
            acc += x;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    Ok(curve)
}

/// Per-matrix SVDs run on scoped threads; results are merged in input order.
pub fn svd_spectrum(matrices: &[Tensor]) -> Result<SpectrumReport> {
    if matrices.is_empty() {
        return Err(Error::Data("no matrices to analyze".into()));
    }
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(matrices.len());
    let per = matrices.len().div_ceil(workers);
    let spectra: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = matrices
            .chunks(per)
            .map(|part| scope.spawn(move || part.iter().map(singular_values).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("svd worker panicked"))
            .collect()
    });
    let spectra = spectra.into_iter().collect::<Result<Vec<_>>>()?;
    let len = spectra.iter().map(Vec::len).max().unwrap_or(0);
    let mut sv = vec![0.0; len];
    let mut curve = vec![0.0; len];
    for s in &spectra {
        let c = cumulative_curve(s)?;
        for i in 0..len {
            sv[i] += s.get(i).copied().unwrap_or(0.0);
            curve[i] += c.get(i).copied().unwrap_or(1.0);
        }
    }
    let n = spectra.len() as f64;
    sv.iter_mut().for_each(|x| *x /= n);
    curve.iter_mut().for_each(|x| *x = (*x / n).min(1.0));
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    Ok(SpectrumReport {
        singular_values: sv,
        curve,
        count: spectra.len(),
    })
}

/// First-layer, first-head softmax matrices of a baseline model, one per record.
pub fn baseline_attention(
    model: &Model,
    data: &[SequenceRecord],
    limit: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for r in data.iter().take(limit) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape)?;
        let (lip, hand) = model.inputs(r, Modality::Both)?;
        let tr = model.forward(
            &mut tape,
            &vars,
            &lip,
            &hand,
            Modality::Both,
            Mode::Eval,
            None,
        )?;
        let Some(&a) = tr.attention.first().and_then(|h| h.first()) else {
            return Err(Error::Parameter(
                "model has no softmax attention maps".into(),
            ));
        };
        out.push(tape.value(a).clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HistNorm {
    /// Values divided within each chunk (TUR).
    #[default]
    PerChunk,
    /// Values summing to 1 within each sequence (CUR).
    PerSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub norm: HistNorm,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; out-of-range values land in the edge bins.
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64, norm: HistNorm) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Parameter(format!(
                "histogram needs bins >= 1 and lo < hi, got {bins}, [{lo}, {hi}]"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite histogram value".into()));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v - lo) / width).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Ok(Self {
            edges,
            counts,
            norm,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TurNorm {
    /// Divide by the chunk maximum.
    #[default]
    Max,
    /// Divide by the chunk sum.
    Sum,
}

impl TurNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(TurNorm::Max),
            "sum" => Some(TurNorm::Sum),
            _ => None,
        }
    }
}

/// Normalized TUR of every real token of every chunk in `table`.
pub fn normalized_tur(table: &TurTable, norm: TurNorm) -> Vec<f64> {
    let mut out = Vec::new();
    for (row, &valid) in table.tur.iter().zip(&table.valid) {
        let real = &row[..valid];
        let denom = match norm {
            TurNorm::Max => real.iter().fold(0.0f64, |m, &x| m.max(x)),
            TurNorm::Sum => real.iter().sum(),
        };
        out.extend(
            real.iter()
                .map(|&x| if denom > 0.0 { x / denom } else { 0.0 }),
        );
    }
    out
}

fn eval_tables(
    model: &Model,
    r: &SequenceRecord,
    modality: Modality,
    topk: Option<usize>,
) -> Result<Vec<Vec<TurTable>>> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let (lip, hand) = model.inputs(r, modality)?;
    let tr = model.forward(&mut tape, &vars, &lip, &hand, modality, Mode::Eval, topk)?;
    if tr.layers.is_empty() {
        return Err(Error::Parameter(
            "model has no token-importance layers".into(),
        ));
    }
    Ok(tr.layers.into_iter().map(|l| l.tur).collect())
}

/// Normalized TUR values over every layer, stream and chunk of `data`.
pub fn collect_tur(model: &Model, data: &[SequenceRecord], norm: TurNorm) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for r in data {
        for layer in eval_tables(model, r, model.config.modality, None)? {
            for t in &layer {
                out.extend(normalized_tur(t, norm));
            }
        }
    }
    Ok(out)
}

pub fn tur_histogram(
    model: &Model,
    data: &[SequenceRecord],
    bins: usize,
    norm: TurNorm,
) -> Result<Histogram> {
    Histogram::build(
        &collect_tur(model, data, norm)?,
        bins,
        0.0,
        1.0,
        HistNorm::PerChunk,
    )
}

/// Last-layer CUR of every (record, stream). `selection = false` runs every
/// layer with k = C.
pub fn collect_cur(
    model: &Model,
    data: &[SequenceRecord],
    selection: bool,
) -> Result<Vec<Vec<f64>>> {
    let topk = (!selection).then_some(model.config.block.chunk);
    let mut out = Vec::new();
    for r in data {
        let layers = eval_tables(model, r, model.config.modality, topk)?;
        for t in layers.last().into_iter().flatten() {
            out.push(compute_cur(t)?);
        }
    }
    Ok(out)
}

pub fn cur_histogram(
    model: &Model,
    data: &[SequenceRecord],
    bins: usize,
    selection: bool,
) -> Result<Histogram> {
    let values: Vec<f64> = collect_cur(model, data, selection)?
        .into_iter()
        .flatten()
        .collect();
    Histogram::build(&values, bins, 0.0, 1.0, HistNorm::PerSequence)
}

/// Largest chunk share of each sequence; the per-sequence statistic compared
/// by the z-test (raw CUR values have mean 1/n in every condition).
pub fn peak_cur(curs: &[Vec<f64>]) -> Vec<f64> {
    curs.iter()
        .map(|c| c.iter().fold(0.0f64, |m, &x| m.max(x)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub const Z_MIN_SAMPLES: usize = 30;

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sample z-test with sample variances; two-tailed `p = erfc(|z|/√2)`.
pub fn z_test(a: &[f64], b: &[f64]) -> Result<ZTest> {
    if a.len() < Z_MIN_SAMPLES || b.len() < Z_MIN_SAMPLES {
        return Err(Error::Statistics(format!(
            "z-test needs at least {Z_MIN_SAMPLES} values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Statistics("non-finite sample value".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    let diff = ma - mb;
    let z = if diff == 0.0 {
        0.0
    } else if se > 0.0 {
        diff / se
    } else {
        return Err(Error::Statistics(
            "zero variance with different means".into(),
        ));
    };
    let p = libm::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(ZTest {
        z,
        p,
        n_a: a.len(),
        n_b: b.len(),
    })
}

pub fn write_spectrum_csv<W: Write>(mut w: W, report: &SpectrumReport) -> std::io::Result<()> {
    writeln!(w, "index,value")?;
    for (i, v) in report.curve.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    Ok(())
}

pub fn write_histogram_csv<W: Write>(mut w: W, h: &Histogram) -> std::io::Result<()> {
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(w, "{},{},{c}", h.edges[i], h.edges[i + 1])?;
    }
    Ok(())
}

pub fn write_ztest_csv<W: Write>(mut w: W, t: &ZTest) -> std::io::Result<()> {
    writeln!(w, "z,p,n_a,n_b")?;
    writeln!(w, "{},{},{},{}", t.z, t.p, t.n_a, t.n_b)
}

/// Median and mean of `values` (median of an even count averages the middle pair).
pub fn median_mean(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Some((median, v.iter().sum::<f64>() / n as f64))
}
