//! One fusion layer: gated hidden projection around the token-importance-aware
//! attention, followed by convolution-based aggregation (depthwise then
//! pointwise convolution, each normalized and passed through Swish).
//!
//! Both modalities run through the same [`LayerParams`]; the only place they
//! meet is the fused key/value set of the modality-shared branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    addition_merge, compute_tur, fuse_chunks, modality_shared_attention,
    modality_specific_attention, scale_offset, FusionInput, Psi, TurTable, TUR_EPSILON,
};
use crate::autodiff::{Component, RowStats, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Elementwise activation used by the projections.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Swish,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Swish => tape.swish(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    /// Per-channel statistics over time in training, running statistics in eval.
    #[default]
    Batch,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub chunk: usize,
    pub topk: usize,
    pub kernel: usize,
    pub psi: Psi,
    pub phi: Activation,
    pub fusion: bool,
    pub gate: bool,
    pub norm: NormMode,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_hidden: 32,
            chunk: 32,
            topk: 4,
            kernel: 3,
            psi: Psi::SquaredRelu,
            phi: Activation::Swish,
            fusion: true,
            gate: true,
            norm: NormMode::Batch,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.into()));
        if self.d_model == 0
            || self.d_hidden == 0
            || self.chunk == 0
            || self.topk == 0
            || self.kernel == 0
        {
            return bad("all sizes must be at least 1");
        }
        if self.d_hidden > self.d_model {
            return bad("d must not exceed d_m");
        }
        if self.topk > self.chunk {
            return bad("k must not exceed the chunk size");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("depthwise kernel size must be odd");
        }
        Ok(())
    }

    fn proj_width(&self) -> usize {
        if self.gate {
            2 * self.d_hidden
        } else {
            self.d_hidden
        }
    }
}

/// Learnable parameters of one layer plus its normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// d_m × 2d (gated) or d_m × d
    pub w_in: Tensor,
    /// d × d_m
    pub w_out: Tensor,
    /// gamma/beta pairs for Q, K, V^spe, V^sha, each `[d]`
    pub affine: [(Tensor, Tensor); 4],
    /// d_m × D
    pub dwc: Tensor,
    /// d_m × d_m, applied as `W · Z` on the channels×time layout
    pub pwc: Tensor,
    pub norm_dw: (Tensor, Tensor),
    pub norm_pw: (Tensor, Tensor),
    /// `[stream][dwc norm, pwc norm]`; the two modalities keep separate estimates.
    pub running: [[RowStats; 2]; 2],
}

pub const LAYER_PARAM_NAMES: [&str; 16] = [
    "w_in",
    "w_out",
    "q_gamma",
    "q_beta",
    "k_gamma",
    "k_beta",
    "vspe_gamma",
    "vspe_beta",
    "vsha_gamma",
    "vsha_beta",
    "dwc",
    "pwc",
    "norm_dw_gamma",
    "norm_dw_beta",
    "norm_pw_gamma",
    "norm_pw_beta",
];

fn unit_stats(n: usize) -> RowStats {
    RowStats {
        mean: vec![0.0; n],
        var: vec![1.0; n],
    }
}

impl LayerParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let (dm, d) = (cfg.d_model, cfg.d_hidden);
        let near_one = |rng: &mut R| {
            let mut g = Tensor::randn(&[d], 0.1, rng);
            g.data_mut().iter_mut().for_each(|x| *x += 1.0);
            (g, Tensor::zeros(&[d]))
        };
        let affine = [near_one(rng), near_one(rng), near_one(rng), near_one(rng)];
        let mut dwc = Tensor::randn(&[dm, cfg.kernel], 0.2, rng);
        let centre = cfg.kernel / 2;
        for c in 0..dm {
            let v = dwc.get(c, centre) + 1.0;
            dwc.set(c, centre, v);
        }
        Self {
            w_in: Tensor::randn(&[dm, cfg.proj_width()], 1.0 / (dm as f64).sqrt(), rng),
            w_out: Tensor::randn(&[d, dm], 1.0 / (d as f64).sqrt(), rng),
            affine,
            dwc,
            pwc: Tensor::randn(&[dm, dm], 1.0 / (dm as f64).sqrt(), rng),
            norm_dw: (Tensor::full(&[dm], 1.0), Tensor::zeros(&[dm])),
            norm_pw: (Tensor::full(&[dm], 1.0), Tensor::zeros(&[dm])),
            running: [
                [unit_stats(dm), unit_stats(dm)],
                [unit_stats(dm), unit_stats(dm)],
            ],
        }
    }

    /// All-zero learnable parameters; the layer then reduces to its residual path.
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let (dm, d) = (cfg.d_model, cfg.d_hidden);
        let pair = || (Tensor::zeros(&[d]), Tensor::zeros(&[d]));
        Self {
            w_in: Tensor::zeros(&[dm, cfg.proj_width()]),
            w_out: Tensor::zeros(&[d, dm]),
            affine: [pair(), pair(), pair(), pair()],
            dwc: Tensor::zeros(&[dm, cfg.kernel]),
            pwc: Tensor::zeros(&[dm, dm]),
            norm_dw: (Tensor::zeros(&[dm]), Tensor::zeros(&[dm])),
            norm_pw: (Tensor::zeros(&[dm]), Tensor::zeros(&[dm])),
            running: [
                [unit_stats(dm), unit_stats(dm)],
                [unit_stats(dm), unit_stats(dm)],
            ],
        }
    }

    /// Learnable tensors in [`LAYER_PARAM_NAMES`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let [(qg, qb), (kg, kb), (sg, sb), (hg, hb)] = &self.affine;
        vec![
            &self.w_in,
            &self.w_out,
            qg,
            qb,
            kg,
            kb,
            sg,
            sb,
            hg,
            hb,
            &self.dwc,
            &self.pwc,
            &self.norm_dw.0,
            &self.norm_dw.1,
            &self.norm_pw.0,
            &self.norm_pw.1,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [(qg, qb), (kg, kb), (sg, sb), (hg, hb)] = &mut self.affine;
        vec![
            &mut self.w_in,
            &mut self.w_out,
            qg,
            qb,
            kg,
            kb,
            sg,
            sb,
            hg,
            hb,
            &mut self.dwc,
            &mut self.pwc,
            &mut self.norm_dw.0,
            &mut self.norm_dw.1,
            &mut self.norm_pw.0,
            &mut self.norm_pw.1,
        ]
    }

    /// Records every learnable tensor as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<LayerVars> {
        let v = self
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        LayerVars::from_slice(&v)
    }

    /// Folds a training-mode batch statistic into the running estimate.
    pub fn update_running(&mut self, stream: usize, which: usize, batch: &RowStats) {
        let r = &mut self.running[stream][which];
        for (m, b) in r.mean.iter_mut().zip(&batch.mean) {
            *m = NORM_MOMENTUM * *m + (1.0 - NORM_MOMENTUM) * b;
        }
        for (v, b) in r.var.iter_mut().zip(&batch.var) {
            *v = NORM_MOMENTUM * *v + (1.0 - NORM_MOMENTUM) * b;
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerVars {
    pub w_in: Var,
    pub w_out: Var,
    pub affine: [(Var, Var); 4],
    pub dwc: Var,
    pub pwc: Var,
    pub norm_dw: (Var, Var),
    pub norm_pw: (Var, Var),
}

impl LayerVars {
    /// Inverse of [`LayerVars::vars`].
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != LAYER_PARAM_NAMES.len() {
            return dim_err(format!(
                "layer needs {} tensors, got {}",
                LAYER_PARAM_NAMES.len(),
                v.len()
            ));
        }
        Ok(Self {
            w_in: v[0],
            w_out: v[1],
            affine: [(v[2], v[3]), (v[4], v[5]), (v[6], v[7]), (v[8], v[9])],
            dwc: v[10],
            pwc: v[11],
            norm_dw: (v[12], v[13]),
            norm_pw: (v[14], v[15]),
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let [(a, b), (c, d), (e, f), (g, h)] = self.affine;
        vec![
            self.w_in,
            self.w_out,
            a,
            b,
            c,
            d,
            e,
            f,
            g,
            h,
            self.dwc,
            self.pwc,
            self.norm_dw.0,
            self.norm_dw.1,
            self.norm_pw.0,
            self.norm_pw.1,
        ]
    }
}

/// Columns `start..end` of a matrix, via transposes.
fn slice_cols(tape: &mut Tape, x: Var, start: usize, end: usize) -> Result<Var> {
    let xt = tape.transpose(x)?;
    let s = tape.slice_rows(xt, start, end)?;
    tape.transpose(s)
}

/// `[F_u | G_u] = φ(F W_u)`: one product, one activation, then a column split.
/// Without a gate the whole output is `F_u`.
pub fn gated_input_projection(
    tape: &mut Tape,
    x: Var,
    w_in: Var,
    phi: Activation,
    gate: bool,
) -> Result<(Var, Option<Var>)> {
    let prev = tape.set_component(Component::Projection);
    let h = tape.matmul(x, w_in)?;
    let h = phi.apply(tape, h)?;
    let out = if gate {
        let width = tape.value(h).cols();
        if !width.is_multiple_of(2) {
            return dim_err(format!("gated projection width {width} is odd"));
        }
        let d = width / 2;
        let f = slice_cols(tape, h, 0, d)?;
        let g = slice_cols(tape, h, d, width)?;
        (f, Some(g))
    } else {
        (h, None)
    };
    tape.restore_component(prev);
    Ok(out)
}

/// `φ((F_o ⊙ G_u) W_o)`, or `φ(F_o W_o)` without a gate.
pub fn gated_output_projection(
    tape: &mut Tape,
    f_o: Var,
    gate: Option<Var>,
    w_out: Var,
    phi: Activation,
) -> Result<Var> {
    let prev = tape.set_component(Component::Projection);
    let x = match gate {
        Some(g) => tape.mul(f_o, g)?,
        None => f_o,
    };
    let y = tape.matmul(x, w_out)?;
    let y = phi.apply(tape, y)?;
    tape.restore_component(prev);
    Ok(y)
}

/// Parameter handles ConAgg needs.
#[derive(Clone, Copy, Debug)]
pub struct ConAggVars {
    pub dwc: Var,
    pub pwc: Var,
    pub norm_dw: (Var, Var),
    pub norm_pw: (Var, Var),
}

impl From<&LayerVars> for ConAggVars {
    fn from(v: &LayerVars) -> Self {
        Self {
            dwc: v.dwc,
            pwc: v.pwc,
            norm_dw: v.norm_dw,
            norm_pw: v.norm_pw,
        }
    }
}

/// Convolution-based aggregation on a T×d_m input:
/// `x + (Swish(N(PWC(Swish(N(DWC(xᵀ)))))))ᵀ`.
///
/// In [`Mode::Train`] with [`NormMode::Batch`] the returned statistics are the
/// per-channel batch statistics of the two normalizations.
pub fn conagg(
    tape: &mut Tape,
    x: Var,
    p: ConAggVars,
    norm: NormMode,
    mode: Mode,
    running: &[RowStats; 2],
) -> Result<(Var, Option<[RowStats; 2]>)> {
    let prev = tape.set_component(Component::DepthwiseConv);
    let zt = tape.transpose(x)?;
    let zd = tape.depthwise_conv(zt, p.dwc)?;
    let (zd, s0) = normalize(tape, zd, p.norm_dw, norm, mode, &running[0])?;
    let zd = tape.swish(zd)?;
    tape.set_component(Component::PointwiseConv);
    let zp = tape.matmul(p.pwc, zd)?;
    let (zp, s1) = normalize(tape, zp, p.norm_pw, norm, mode, &running[1])?;
    let zp = tape.swish(zp)?;
    let zo = tape.transpose(zp)?;
    let out = tape.add(x, zo)?;
    tape.restore_component(prev);
    Ok((out, s0.zip(s1).map(|(a, b)| [a, b])))
}

fn normalize(
    tape: &mut Tape,
    z: Var,
    affine: (Var, Var),
    norm: NormMode,
    mode: Mode,
    running: &RowStats,
) -> Result<(Var, Option<RowStats>)> {
    match (norm, mode) {
        (NormMode::Identity, _) => Ok((z, None)),
        (NormMode::Batch, Mode::Train) => {
            let (y, s) = tape.norm_rows(z, affine.0, affine.1, None)?;
            Ok((y, Some(s)))
        }
        (NormMode::Batch, Mode::Eval) => {
            let (y, _) = tape.norm_rows(z, affine.0, affine.1, Some(running))?;
            Ok((y, None))
        }
    }
}

/// Everything one layer forward produces besides its outputs.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// T×d_m per modality
    pub outputs: Vec<Var>,
    /// TUR and selection per modality
    pub tur: Vec<TurTable>,
    /// Within-chunk attention matrices per modality
    pub specific_scores: Vec<Vec<Var>>,
    /// T×S shared attention per modality
    pub shared_scores: Vec<Var>,
    /// Fused length per modality (identical across modalities when fusing)
    pub fused_len: Vec<usize>,
    /// Per-modality ConAgg batch statistics in training mode
    pub batch_stats: Vec<[RowStats; 2]>,
}

/// One fusion layer over one or two modality streams sharing parameters.
/// `topk_override` replaces the configured k (used to switch selection off).
pub fn ecolayer_forward(
    tape: &mut Tape,
    inputs: &[Var],
    vars: &LayerVars,
    params: &LayerParams,
    cfg: &BlockConfig,
    mode: Mode,
    topk_override: Option<usize>,
) -> Result<LayerOutput> {
    let Some(&first) = inputs.first() else {
        return dim_err("layer needs at least one stream");
    };
    let t = tape.value(first).rows();
    for &x in inputs {
        let (tx, dx) = tape.value(x).matrix_dims()?;
        if tx != t {
            return Err(Error::Alignment(format!("stream lengths {tx} vs {t}")));
        }
        if dx != cfg.d_model {
            return dim_err(format!("stream width {dx}, expected {}", cfg.d_model));
        }
    }
    let k = topk_override.unwrap_or(cfg.topk);

    struct Stream {
        gate: Option<Var>,
        q: Var,
        k: Var,
        v_sha: Var,
        specific: Var,
        scores: Vec<Var>,
        table: TurTable,
    }

    let mut streams = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (f_u, gate) = gated_input_projection(tape, x, vars.w_in, cfg.phi, cfg.gate)?;
        let [q, kk, vspe, vsha] = vars.affine;
        let q = scale_offset(tape, f_u, q.0, q.1)?;
        let key = scale_offset(tape, f_u, kk.0, kk.1)?;
        let v_spe = scale_offset(tape, f_u, vspe.0, vspe.1)?;
        let v_sha = scale_offset(tape, f_u, vsha.0, vsha.1)?;
        let spe = modality_specific_attention(tape, q, key, v_spe, cfg.chunk, cfg.psi, true)?;
        let chunks: Vec<Tensor> = spe.scores.iter().map(|&a| tape.value(a).clone()).collect();
        let valid: Vec<usize> = (0..spe.layout.count).map(|i| spe.layout.valid(i)).collect();
        let table = compute_tur(&chunks, &valid, TUR_EPSILON)?.select(k)?;
        streams.push(Stream {
            gate,
            q,
            k: key,
            v_sha,
            specific: spe.output,
            scores: spe.scores,
            table,
        });
    }

    let fused = if cfg.fusion {
        let fin: Vec<FusionInput<'_>> = streams
            .iter()
            .map(|s| FusionInput {
                k: s.k,
                v_sha: s.v_sha,
                table: &s.table,
            })
            .collect();
        let f = fuse_chunks(tape, &fin, cfg.chunk)?;
        vec![f; streams.len()]
    } else {
        let mut out = Vec::with_capacity(streams.len());
        for s in &streams {
            out.push(fuse_chunks(
                tape,
                &[FusionInput {
                    k: s.k,
                    v_sha: s.v_sha,
                    table: &s.table,
                }],
                cfg.chunk,
            )?);
        }
        out
    };

    let cvars = ConAggVars::from(vars);
    let mut result = LayerOutput {
        outputs: Vec::new(),
        tur: Vec::new(),
        specific_scores: Vec::new(),
        shared_scores: Vec::new(),
        fused_len: Vec::new(),
        batch_stats: Vec::new(),
    };
    for (si, ((s, &x), fkv)) in streams.into_iter().zip(inputs).zip(&fused).enumerate() {
        let (shared, a_sha) = modality_shared_attention(tape, s.q, fkv, cfg.psi)?;
        let merged = addition_merge(tape, s.specific, shared)?;
        let projected = gated_output_projection(tape, merged, s.gate, vars.w_out, cfg.phi)?;
        let (agg, stats) = conagg(
            tape,
            projected,
            cvars,
            cfg.norm,
            mode,
            &params.running[si.min(1)],
        )?;
        let out = tape.add(x, agg)?;
        result.outputs.push(out);
        result.tur.push(s.table);
        result.specific_scores.push(s.scores);
        result.shared_scores.push(a_sha);
        result.fused_len.push(fkv.len());
        if let Some(st) = stats {
            result.batch_stats.push(st);
        }
    }
    Ok(result)
}
