//! Browser demo. Each export takes plain numbers and returns a JSON string;
//! failures come back as `{"error": "..."}` so the page needs no exception
//! handling. The `*_report` functions are the native entry points.

use ecofuse::analysis::{cumulative_curve, singular_values};
use ecofuse::attention::{compute_tur, psi, Psi};
use ecofuse::bench::{attention_ratio, baseline_macs, shared_macs, specific_macs};
use ecofuse::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

const TUR_EPSILON: f64 = 1e-8;

#[derive(Debug, Serialize)]
pub struct SelectionReport {
    /// ψ-activated attention of the chunk, row-major.
    pub attention: Vec<Vec<f64>>,
    pub tur: Vec<f64>,
    /// TUR divided by the chunk max.
    pub normalized: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Random query/key chunk with scores penalized by `locality · |i − j|`.
pub fn selection_report(
    chunk: usize,
    k: usize,
    width: usize,
    locality: f64,
    seed: u32,
) -> Result<SelectionReport> {
    if chunk == 0 || width == 0 || k == 0 || k > chunk {
        return Err(ecofuse::Error::Parameter(
            "need chunk >= 1, width >= 1 and 1 <= k <= chunk".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let q = Tensor::randn(&[chunk, width], 1.0, &mut rng);
    let kt = Tensor::randn(&[width, chunk], 1.0, &mut rng);
    let mut scores = q.matmul(&kt)?.map(|x| x / (width as f64).sqrt());
    for i in 0..chunk {
        for j in 0..chunk {
            let v = scores.get(i, j) - locality * i.abs_diff(j) as f64;
            scores.set(i, j, v);
        }
    }
    let attention = psi(&scores, chunk, Psi::SquaredRelu)?;
    let table = compute_tur(std::slice::from_ref(&attention), &[chunk], TUR_EPSILON)?.select(k)?;
    let tur = table.tur[0].clone();
    let max = tur.iter().fold(0.0f64, |m, &x| m.max(x));
    let normalized = tur
        .iter()
        .map(|&x| if max > 0.0 { x / max } else { 0.0 })
        .collect();
    Ok(SelectionReport {
        attention: (0..chunk).map(|i| attention.row(i).to_vec()).collect(),
        tur,
        normalized,
        selected: table.selected[0].clone(),
    })
}

#[derive(Debug, Serialize)]
pub struct MacPoint {
    pub t: usize,
    pub baseline: u64,
    pub tiaa: u64,
    pub ratio: f64,
}

/// Attention MACs of both streams at T = chunk, 2·chunk, … up to `t_max`.
pub fn mac_report(chunk: usize, k: usize, width: usize, t_max: usize) -> Result<Vec<MacPoint>> {
    if chunk == 0 || width == 0 || k == 0 || k > chunk || t_max < chunk {
        return Err(ecofuse::Error::Parameter(
            "need 1 <= k <= chunk <= t_max and width >= 1".into(),
        ));
    }
    let mut out = Vec::new();
    let mut t = chunk;
    while t <= t_max {
        out.push(MacPoint {
            t,
            baseline: baseline_macs(t, width),
            tiaa: 2 * specific_macs(t, chunk, width, false) + shared_macs(t, chunk, k, width),
            ratio: attention_ratio(t, chunk, k, width),
        });
        t *= 2;
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SpectrumDemo {
    pub singular_values: Vec<f64>,
    pub curve: Vec<f64>,
}

/// Softmax attention of `len` tokens whose queries and keys live in a
/// `rank`-dimensional subspace, plus Gaussian `noise` on the logits.
pub fn spectrum_report(len: usize, rank: usize, noise: f64, seed: u32) -> Result<SpectrumDemo> {
    if len == 0 || rank == 0 || !(noise >= 0.0) {
        return Err(ecofuse::Error::Parameter(
            "need len >= 1, rank >= 1 and noise >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let q = Tensor::randn(&[len, rank], 1.0, &mut rng);
    let kt = Tensor::randn(&[rank, len], 1.0, &mut rng);
    let jitter = Tensor::randn(&[len, len], noise, &mut rng);
    let logits = q
        .matmul(&kt)?
        .zip_map(&jitter, |a, b| a / (rank as f64).sqrt() + b)?;
    let mut a = logits.clone();
    for i in 0..len {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for j in 0..len {
            a.set(i, j, (row[j] - m).exp() / z);
        }
    }
    let singular_values = singular_values(&a)?;
    let curve = cumulative_curve(&singular_values)?;
    Ok(SpectrumDemo {
        singular_values,
        curve,
    })
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("plain data serializes"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[wasm_bindgen]
pub fn select_tokens(chunk: usize, k: usize, width: usize, locality: f64, seed: u32) -> String {
    to_json(selection_report(chunk, k, width, locality, seed))
}

#[wasm_bindgen]
pub fn mac_curve(chunk: usize, k: usize, width: usize, t_max: usize) -> String {
    to_json(mac_report(chunk, k, width, t_max))
}

#[wasm_bindgen]
pub fn attention_spectrum(len: usize, rank: usize, noise: f64, seed: u32) -> String {
    to_json(spectrum_report(len, rank, noise, seed))
}
