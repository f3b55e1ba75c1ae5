//! Token-importance-aware attention: chunked modality-specific attention,
//! token utilization rates with per-chunk top-k selection, chunk-level
//! cross-modal fusion of the selected keys/values, and modality-shared
//! attention over the fused tokens.
//!
//! All sequence tensors are `T×d` with tokens as rows. A sequence is split
//! into `n = ceil(T / C)` chunks of `C` tokens; the last chunk is zero-padded
//! and the padding is tracked by [`Chunking`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Component, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const TUR_EPSILON: f64 = 1e-8;

/// The nonnegative score activation that stands in for softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Psi {
    /// `relu(x)^2 / attended`
    #[default]
    SquaredRelu,
    /// `relu(x) / attended`
    Relu,
    /// `x / attended`; no nonlinearity, so the product can be reassociated.
    Linear,
}

impl Psi {
    pub fn eval(self, x: f64, attended: usize) -> f64 {
        let n = attended as f64;
        match self {
            Psi::SquaredRelu => x.max(0.0).powi(2) / n,
            Psi::Relu => x.max(0.0) / n,
            Psi::Linear => x / n,
        }
    }

    /// Applies ψ to already-scaled scores on the tape.
    pub fn apply(self, tape: &mut Tape, scores: Var, attended: usize) -> Result<Var> {
        if attended == 0 {
            return Err(Error::Parameter("attended count must be at least 1".into()));
        }
        let inv = 1.0 / attended as f64;
        match self {
            Psi::SquaredRelu => {
                let r = tape.relu(scores)?;
                let s = tape.square(r)?;
                tape.scale(s, inv)
            }
            Psi::Relu => {
                let r = tape.relu(scores)?;
                tape.scale(r, inv)
            }
            Psi::Linear => tape.scale(scores, inv),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Psi::SquaredRelu => "squared_relu",
            Psi::Relu => "relu",
            Psi::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared_relu" | "squared-relu" | "relu2" => Some(Psi::SquaredRelu),
            "relu" => Some(Psi::Relu),
            "linear" | "identity" => Some(Psi::Linear),
            _ => None,
        }
    }
}

/// ψ applied elementwise to a plain tensor of scaled scores.
pub fn psi(scores: &Tensor, attended: usize, kind: Psi) -> Result<Tensor> {
    if attended == 0 {
        return Err(Error::Parameter("attended count must be at least 1".into()));
    }
    Ok(scores.map(|x| kind.eval(x, attended)))
}

/// How a length-`len` sequence is cut into chunks of `chunk` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunking {
    pub len: usize,
    pub chunk: usize,
    pub count: usize,
}

impl Chunking {
    pub fn new(len: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::Parameter("chunk size must be at least 1".into()));
        }
        if len == 0 {
            return dim_err("cannot chunk an empty sequence");
        }
        Ok(Self {
            len,
            chunk,
            count: len.div_ceil(chunk),
        })
    }

    pub fn padded_len(&self) -> usize {
        self.count * self.chunk
    }

    /// Number of real (unpadded) tokens in chunk `i`.
    pub fn valid(&self, i: usize) -> usize {
        self.chunk.min(self.len - i * self.chunk)
    }

    /// Validity mask over the padded sequence.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.padded_len()).map(|t| t < self.len).collect()
    }

    /// Selected tokens per modality when every chunk keeps its top `k`.
    pub fn selected_len(&self, k: usize) -> usize {
        (0..self.count).map(|i| k.min(self.valid(i))).sum()
    }
}

/// Rows of one stream cut into equal padded chunks.
#[derive(Clone, Debug)]
pub struct ChunkedRows {
    pub layout: Chunking,
    pub chunks: Vec<Var>,
}

/// Splits `x` (T×d) into `ceil(T/C)` chunks of `C` rows, zero-padding the last.
pub fn chunk(tape: &mut Tape, x: Var, chunk_size: usize) -> Result<ChunkedRows> {
    let (t, d) = tape.value(x).matrix_dims()?;
    let layout = Chunking::new(t, chunk_size)?;
    let padded = if layout.padded_len() > t {
        let zeros = tape.constant(Tensor::zeros(&[layout.padded_len() - t, d]))?;
        tape.concat_rows(&[x, zeros])?
    } else {
        x
    };
    let chunks = (0..layout.count)
        .map(|i| tape.slice_rows(padded, i * chunk_size, (i + 1) * chunk_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkedRows { layout, chunks })
}

/// Concatenates chunk outputs and drops padding rows.
pub fn unchunk(tape: &mut Tape, chunks: &[Var], layout: Chunking) -> Result<Var> {
    let all = tape.concat_rows(chunks)?;
    if layout.padded_len() == layout.len {
        Ok(all)
    } else {
        tape.slice_rows(all, 0, layout.len)
    }
}

/// Per-dimension scale and offset: `out[t, j] = gamma[j] * x[t, j] + beta[j]`.
pub fn scale_offset(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let t = tape.value(x).rows();
    let g = tape.broadcast_rows(gamma, t)?;
    let b = tape.broadcast_rows(beta, t)?;
    let scaled = tape.mul(x, g)?;
    tape.add(scaled, b)
}

/// Query, key and the two value streams derived from one hidden embedding.
#[derive(Clone, Copy, Debug)]
pub struct QkvStreams {
    pub q: Var,
    pub k: Var,
    pub v_spe: Var,
    pub v_sha: Var,
}

/// Output of the within-chunk branch for one modality.
#[derive(Clone, Debug)]
pub struct SpecificOutput {
    /// T×d
    pub output: Var,
    /// One C×C attention matrix per chunk; empty on the reassociated path.
    pub scores: Vec<Var>,
    pub layout: Chunking,
}

/// Within-chunk attention `ψ(Q_c K_cᵀ / √d) V_c`, chunks concatenated in order.
///
/// With [`Psi::Linear`], `C > d` and `need_scores == false` the product is
/// evaluated as `Q_c (K_cᵀ V_c)`.
pub fn modality_specific_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    chunk_size: usize,
    kind: Psi,
    need_scores: bool,
) -> Result<SpecificOutput> {
    let d = tape.value(q).cols();
    let prev = tape.set_component(Component::ModalitySpecific);
    let qc = chunk(tape, q, chunk_size)?;
    let kc = chunk(tape, k, chunk_size)?;
    let vc = chunk(tape, v, chunk_size)?;
    let layout = qc.layout;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let reorder = kind == Psi::Linear && chunk_size > d && !need_scores;
    let mut outs = Vec::with_capacity(layout.count);
    let mut scores = Vec::new();
    for i in 0..layout.count {
        let out = if reorder {
            let kv = tape.matmul_tn(kc.chunks[i], vc.chunks[i])?;
            let o = tape.matmul(qc.chunks[i], kv)?;
            tape.scale(o, inv_sqrt_d / chunk_size as f64)?
        } else {
            let s = tape.matmul_nt(qc.chunks[i], kc.chunks[i])?;
            let s = tape.scale(s, inv_sqrt_d)?;
            let a = kind.apply(tape, s, chunk_size)?;
            scores.push(a);
            tape.matmul(a, vc.chunks[i])?
        };
        outs.push(out);
    }
    let output = unchunk(tape, &outs, layout)?;
    tape.restore_component(prev);
    Ok(SpecificOutput {
        output,
        scores,
        layout,
    })
}

/// Token utilization rates of every chunk plus (after [`TurTable::select`])
/// the top-k token indices of each chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct TurTable {
    /// `tur[i][j]` for chunk `i`, token `j` (padded tokens score 0).
    pub tur: Vec<Vec<f64>>,
    /// Real tokens per chunk.
    pub valid: Vec<usize>,
    pub epsilon: f64,
    pub k: usize,
    /// Ascending local indices per chunk.
    pub selected: Vec<Vec<usize>>,
}

/// `TUR(i, j) = Σ_{m≠j} A_i(m, j) / (A_i(j, j) + ε)` for every chunk matrix.
pub fn compute_tur(chunks: &[Tensor], valid: &[usize], epsilon: f64) -> Result<TurTable> {
    if chunks.len() != valid.len() {
        return dim_err("one valid length per chunk");
    }
    let mut tur = Vec::with_capacity(chunks.len());
    for (a, &v) in chunks.iter().zip(valid) {
        let (r, c) = a.matrix_dims()?;
        if r != c || v > c {
            return dim_err(format!("chunk attention must be square, got {r}x{c}"));
        }
        let row: Vec<f64> = (0..c)
            .map(|j| {
                if j >= v {
                    return 0.0;
                }
                let off: f64 = (0..c).filter(|&m| m != j).map(|m| a.get(m, j)).sum();
                off / (a.get(j, j) + epsilon)
            })
            .collect();
        tur.push(row);
    }
    Ok(TurTable {
        tur,
        valid: valid.to_vec(),
        epsilon,
        k: 0,
        selected: Vec::new(),
    })
}

/// Indices of the `k` largest scores among the first `valid` entries, ties
/// going to the lower index, returned ascending.
pub fn topk_select(scores: &[f64], valid: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let valid = valid.min(scores.len());
    let mut order: Vec<usize> = (0..valid).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

impl TurTable {
    pub fn chunk_count(&self) -> usize {
        self.tur.len()
    }

    /// Fills `selected` with the per-chunk top-k (k clamped to the chunk's real length).
    pub fn select(mut self, k: usize) -> Result<Self> {
        self.selected = self
            .tur
            .iter()
            .zip(&self.valid)
            .map(|(t, &v)| topk_select(t, v, k))
            .collect::<Result<_>>()?;
        self.k = k;
        Ok(self)
    }

    /// Selected positions in sequence coordinates, chunk by chunk.
    pub fn global_indices(&self, chunk_size: usize) -> Vec<Vec<usize>> {
        self.selected
            .iter()
            .enumerate()
            .map(|(i, sel)| sel.iter().map(|j| i * chunk_size + j).collect())
            .collect()
    }

    /// All scores of real tokens, chunk-major.
    pub fn real_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.tur
            .iter()
            .zip(&self.valid)
            .flat_map(|(t, &v)| t[..v].iter().copied())
    }
}

/// `CUR(i) = Σ_j TUR(i, j) / Σ_i Σ_j TUR(i, j)`.
pub fn compute_cur(table: &TurTable) -> Result<Vec<f64>> {
    let mass: Vec<f64> = table.tur.iter().map(|t| t.iter().sum()).collect();
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("total TUR mass is zero".into()));
    }
    Ok(mass.iter().map(|m| m / total).collect())
}

/// Keys and values gathered from the selected tokens of every modality.
#[derive(Clone, Debug)]
pub struct FusedKv {
    /// S×d
    pub k: Var,
    /// S×d
    pub v: Var,
    /// `(modality, sequence position)` of every fused row, in row order.
    pub sources: Vec<(usize, usize)>,
}

impl FusedKv {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// One modality's contribution to the fused keys/values.
#[derive(Clone, Copy, Debug)]
pub struct FusionInput<'a> {
    pub k: Var,
    pub v_sha: Var,
    pub table: &'a TurTable,
}

/// Chunk-level fusion: for each chunk `c`, the selected rows of modality 0,
/// then of modality 1, and so on. Rows are copies of the selected tokens.
pub fn fuse_chunks(
    tape: &mut Tape,
    inputs: &[FusionInput<'_>],
    chunk_size: usize,
) -> Result<FusedKv> {
    let Some(first) = inputs.first() else {
        return dim_err("fusion needs at least one modality");
    };
    let (t, d) = tape.value(first.k).matrix_dims()?;
    let n = first.table.chunk_count();
    for inp in inputs {
        let kt = tape.value(inp.k).matrix_dims()?;
        let vt = tape.value(inp.v_sha).matrix_dims()?;
        if kt != (t, d) || vt != (t, d) || inp.table.chunk_count() != n {
            return Err(Error::Alignment(format!(
                "modalities disagree: keys {kt:?}, values {vt:?}, {} chunks vs ({t}, {d}), {n} chunks",
                inp.table.chunk_count()
            )));
        }
        if inp.table.selected.len() != n {
            return Err(Error::Parameter("TUR table has no selection".into()));
        }
    }
    let globals: Vec<Vec<Vec<usize>>> = inputs
        .iter()
        .map(|i| i.table.global_indices(chunk_size))
        .collect();
    let mut index = Vec::new();
    let mut sources = Vec::new();
    for c in 0..n {
        for (m, g) in globals.iter().enumerate() {
            for &pos in &g[c] {
                index.push(m * t + pos);
                sources.push((m, pos));
            }
        }
    }
    let (k_all, v_all) = if inputs.len() == 1 {
        (first.k, first.v_sha)
    } else {
        let ks: Vec<Var> = inputs.iter().map(|i| i.k).collect();
        let vs: Vec<Var> = inputs.iter().map(|i| i.v_sha).collect();
        (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
    };
    let k = tape.gather_rows(k_all, &index)?;
    let v = tape.gather_rows(v_all, &index)?;
    Ok(FusedKv { k, v, sources })
}

/// `ψ(Q K_fsnᵀ / √d) V_fsn` with the attended count set to the fused length.
/// Returns the output and the T×S attention matrix.
pub fn modality_shared_attention(
    tape: &mut Tape,
    q: Var,
    fused: &FusedKv,
    kind: Psi,
) -> Result<(Var, Var)> {
    let d = tape.value(q).cols();
    let prev = tape.set_component(Component::ModalityShared);
    let s = tape.matmul_nt(q, fused.k)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
    let a = kind.apply(tape, s, fused.len())?;
    let out = tape.matmul(a, fused.v)?;
    tape.restore_component(prev);
    Ok((out, a))
}

pub fn addition_merge(tape: &mut Tape, specific: Var, shared: Var) -> Result<Var> {
    tape.add(specific, shared)
}
