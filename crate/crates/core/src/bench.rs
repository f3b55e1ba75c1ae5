//! Multiply-accumulate accounting and timing sweeps: one fusion layer over two
//! streams against full softmax attention over the concatenated sequence.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Chunking;
use crate::autodiff::{Component, Tape};
use crate::block::{ecolayer_forward, BlockConfig, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Baseline fused attention over length 2T: scores plus apply.
pub fn baseline_macs(t: usize, d: usize) -> u64 {
    let n = 2 * t as u64;
    2 * n * n * d as u64
}

/// Chunked attention of one stream; `reorder` is the `Q(KᵀV)` path.
pub fn specific_macs(t: usize, c: usize, d: usize, reorder: bool) -> u64 {
    let n = t.div_ceil(c) as u64;
    let (c, d) = (c as u64, d as u64);
    if reorder {
        n * 2 * c * d * d
    } else {
        n * 2 * c * c * d
    }
}

/// Fused length S of two streams: each chunk contributes `min(k, valid)`.
pub fn fused_len(t: usize, c: usize, k: usize) -> usize {
    let layout = Chunking::new(t, c).expect("chunk >= 1");
    2 * layout.selected_len(k)
}

/// Shared attention of both streams onto the fused tokens.
pub fn shared_macs(t: usize, c: usize, k: usize, d: usize) -> u64 {
    2 * 2 * t as u64 * fused_len(t, c, k) as u64 * d as u64
}

pub fn dwc_macs(t: usize, kernel: usize, dm: usize) -> u64 {
    (t * kernel * dm) as u64
}

pub fn pwc_macs(t: usize, dm: usize) -> u64 {
    (t * dm * dm) as u64
}

/// Input plus output projection of one stream.
pub fn projection_macs(t: usize, dm: usize, d: usize, gate: bool) -> u64 {
    let w = if gate { 2 * d } else { d };
    (t * dm * w + t * d * dm) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub t: usize,
    pub chunk: usize,
    pub topk: usize,
    pub d: usize,
    pub d_model: usize,
    pub kernel: usize,
    pub gate: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            t: 128,
            chunk: 32,
            topk: 4,
            d: 64,
            d_model: 256,
            kernel: 3,
            gate: true,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_hidden: self.d,
            chunk: self.chunk,
            topk: self.topk,
            kernel: self.kernel,
            gate: self.gate,
            ..BlockConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Parameter("T must be positive".into()));
        }
        self.block().validate()
    }
}

pub const REPORTED: [Component; 6] = [
    Component::ModalitySpecific,
    Component::ModalityShared,
    Component::DepthwiseConv,
    Component::PointwiseConv,
    Component::Projection,
    Component::Baseline,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub component: Component,
    pub measured: u64,
    pub analytic: u64,
    pub wall_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub config: BenchConfig,
    pub rows: Vec<ComponentCount>,
}

impl FlopReport {
    pub fn get(&self, c: Component) -> Option<&ComponentCount> {
        self.rows.iter().find(|r| r.component == c)
    }

    pub fn exact(&self) -> bool {
        self.rows.iter().all(|r| r.measured == r.analytic)
    }

    /// Modality-specific plus modality-shared MACs.
    pub fn tiaa_attention_macs(&self) -> u64 {
        [Component::ModalitySpecific, Component::ModalityShared]
            .iter()
            .filter_map(|&c| self.get(c))
            .map(|r| r.measured)
            .sum()
    }
}

/// Analytic MACs of one two-stream layer and the baseline.
pub fn analytic(cfg: &BenchConfig, c: Component) -> u64 {
    let (t, d, dm) = (cfg.t, cfg.d, cfg.d_model);
    match c {
        Component::ModalitySpecific => 2 * specific_macs(t, cfg.chunk, d, false),
        Component::ModalityShared => shared_macs(t, cfg.chunk, cfg.topk, d),
        Component::DepthwiseConv => 2 * dwc_macs(t, cfg.kernel, dm),
        Component::PointwiseConv => 2 * pwc_macs(t, dm),
        Component::Projection => 2 * projection_macs(t, dm, d, cfg.gate),
        Component::Baseline => baseline_macs(t, d),
        _ => 0,
    }
}

/// One instrumented pass: a fused two-stream layer plus a single-head
/// softmax attention over the 2T concatenation.
fn measure_once(cfg: &BenchConfig) -> Result<Tape> {
    let block = cfg.block();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = LayerParams::init(&block, &mut rng);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let a = tape.constant(Tensor::randn(&[cfg.t, cfg.d_model], 1.0, &mut rng))?;
    let b = tape.constant(Tensor::randn(&[cfg.t, cfg.d_model], 1.0, &mut rng))?;
    ecolayer_forward(&mut tape, &[a, b], &vars, &params, &block, Mode::Eval, None)?;

    let n = 2 * cfg.t;
    let q = tape.constant(Tensor::randn(&[n, cfg.d], 1.0, &mut rng))?;
    let k = tape.constant(Tensor::randn(&[n, cfg.d], 1.0, &mut rng))?;
    let v = tape.constant(Tensor::randn(&[n, cfg.d], 1.0, &mut rng))?;
    let prev = tape.set_component(Component::Baseline);
    let s = tape.matmul_nt(q, k)?;
    let s = tape.scale(s, 1.0 / (cfg.d as f64).sqrt())?;
    let p = tape.softmax_rows(s)?;
    tape.matmul(p, v)?;
    tape.restore_component(prev);
    Ok(tape)
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Counts every component of `cfg`; wall clock is the median of `repeats` runs.
pub fn count_flops(cfg: &BenchConfig, repeats: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let runs = (0..repeats.max(1))
        .map(|_| measure_once(cfg))
        .collect::<Result<Vec<_>>>()?;
    let rows = REPORTED
        .iter()
        .map(|&c| {
            let measured = runs[0].cost().macs(c);
            debug_assert!(runs.iter().all(|r| r.cost().macs(c) == measured));
            ComponentCount {
                component: c,
                measured,
                analytic: analytic(cfg, c),
                wall_ns: median(runs.iter().map(|r| r.cost().nanos(c)).collect()),
            }
        })
        .collect();
    Ok(FlopReport {
        config: cfg.clone(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub reports: Vec<FlopReport>,
    /// Least-squares slope of log(MACs) against log(T) per component.
    pub slopes: Vec<(Component, f64)>,
}

impl Sweep {
    pub fn slope(&self, c: Component) -> Option<f64> {
        self.slopes.iter().find(|(x, _)| *x == c).map(|(_, s)| *s)
    }
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Sweeps T over `t_values` (ascending) with every other field from `template`.
/// `parallel` runs the points on separate threads, which distorts wall clock.
pub fn sweep(
    t_values: &[usize],
    template: &BenchConfig,
    repeats: usize,
    parallel: bool,
) -> Result<Sweep> {
    if t_values.len() < 2 || t_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(
            "sweep needs at least two ascending T values".into(),
        ));
    }
    let configs: Vec<BenchConfig> = t_values
        .iter()
        .map(|&t| BenchConfig {
            t,
            ..template.clone()
        })
        .collect();
    let reports = if parallel {
        std::thread::scope(|s| {
            let hs: Vec<_> = configs
                .iter()
                .map(|c| s.spawn(move || count_flops(c, repeats)))
                .collect();
            hs.into_iter()
                .map(|h| h.join().expect("bench worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        configs
            .iter()
            .map(|c| count_flops(c, repeats))
            .collect::<Result<Vec<_>>>()?
    };
    let xs: Vec<f64> = t_values.iter().map(|&t| t as f64).collect();
    let slopes = REPORTED
        .iter()
        .map(|&c| {
            let ys: Vec<f64> = reports
                .iter()
                .map(|r| r.get(c).map_or(0, |x| x.measured) as f64)
                .collect();
            (c, loglog_slope(&xs, &ys))
        })
        .collect();
    Ok(Sweep { reports, slopes })
}

/// `T,C,k,d,dm,component,macs_measured,macs_analytic,wall_ns`; `flops`
/// doubles the MAC columns.
pub fn write_csv<W: Write>(mut w: W, reports: &[FlopReport], flops: bool) -> std::io::Result<()> {
    let f = if flops { 2 } else { 1 };
    writeln!(
        w,
        "T,C,k,d,dm,component,macs_measured,macs_analytic,wall_ns"
    )?;
    for r in reports {
        let c = &r.config;
        for row in &r.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.t,
                c.chunk,
                c.topk,
                c.d,
                c.d_model,
                row.component.name(),
                row.measured * f,
                row.analytic * f,
                row.wall_ns
            )?;
        }
    }
    Ok(())
}

/// Attention-only comparison as a ratio (TIAA over baseline) for fixed C, k.
pub fn attention_ratio(t: usize, c: usize, k: usize, d: usize) -> f64 {
    (2 * specific_macs(t, c, d, false) + shared_macs(t, c, k, d)) as f64
        / baseline_macs(t, d) as f64
}
