//! Stacked fusion layers with a frame classifier, the quadratic multi-head
//! baseline, Adam and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Component, RowStats, Tape, Var};
use crate::block::{
    ecolayer_forward, BlockConfig, LayerOutput, LayerParams, LayerVars, Mode, LAYER_PARAM_NAMES,
};
use crate::error::{Error, Result};
use crate::synth::{Modality, SequenceRecord};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[default]
    EcoCued,
    /// Full softmax self-attention over the concatenated streams.
    Mhsa,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eco" | "ecocued" => Some(Arch::EcoCued),
            "mhsa" | "baseline" => Some(Arch::Mhsa),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::EcoCued => "eco",
            Arch::Mhsa => "mhsa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub block: BlockConfig,
    pub phonemes: usize,
    /// Baseline heads; each has width `d_hidden / heads`.
    pub heads: usize,
    /// Streams seen in training.
    pub modality: Modality,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::EcoCued,
            layers: 2,
            block: BlockConfig::default(),
            phonemes: 40,
            heads: 4,
            modality: Modality::Both,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.layers == 0 || self.phonemes == 0 {
            return Err(Error::Parameter(
                "layers and phonemes must be positive".into(),
            ));
        }
        if self.arch == Arch::Mhsa
            && (self.heads == 0 || !self.block.d_hidden.is_multiple_of(self.heads))
        {
            return Err(Error::Parameter(format!(
                "{} heads do not divide d = {}",
                self.heads, self.block.d_hidden
            )));
        }
        Ok(())
    }

    /// Block configuration used for a forward pass over `modality`; single
    /// streams never fuse.
    pub fn block_for(&self, modality: Modality) -> BlockConfig {
        let mut b = self.block.clone();
        if modality != Modality::Both {
            b.fusion = false;
        }
        b
    }
}

/// One baseline layer: per head `[W_q, W_k, W_v, W_o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaLayer {
    pub heads: Vec<[Tensor; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Eco(Vec<LayerParams>),
    Mhsa(Vec<MhsaLayer>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub body: Body,
    /// d_m × P
    pub head_w: Tensor,
    /// `[P]`
    pub head_b: Tensor,
}

/// Tape handles for every learnable tensor, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub flat: Vec<Var>,
    layers: Vec<LayerVars>,
    mhsa: Vec<Vec<[Var; 4]>>,
    head_w: Var,
    head_b: Var,
}

/// Forward results beyond the logits.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// T × P
    pub logits: Var,
    pub layers: Vec<LayerOutput>,
    /// Baseline softmax matrices, `[layer][head]`, each 2T × 2T.
    pub attention: Vec<Vec<Var>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dm = config.block.d_model;
        let body = match config.arch {
            Arch::EcoCued => Body::Eco(
                (0..config.layers)
                    .map(|_| LayerParams::init(&config.block, &mut rng))
                    .collect(),
            ),
            Arch::Mhsa => {
                let dh = config.block.d_hidden / config.heads;
                let layer = |rng: &mut ChaCha8Rng| MhsaLayer {
                    heads: (0..config.heads)
                        .map(|_| {
                            let s_in = 1.0 / (dm as f64).sqrt();
                            [
                                Tensor::randn(&[dm, dh], s_in, rng),
                                Tensor::randn(&[dm, dh], s_in, rng),
                                Tensor::randn(&[dm, dh], s_in, rng),
                                Tensor::randn(
                                    &[dh, dm],
                                    1.0 / (config.block.d_hidden as f64).sqrt(),
                                    rng,
                                ),
                            ]
                        })
                        .collect(),
                };
                Body::Mhsa((0..config.layers).map(|_| layer(&mut rng)).collect())
            }
        };
        let head_w = Tensor::zeros(&[dm, config.phonemes]);
        let head_b = Tensor::zeros(&[config.phonemes]);
        Ok(Self {
            config,
            body,
            head_w,
            head_b,
        })
    }

    /// Learnable tensors with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.body {
            Body::Eco(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    for (name, t) in LAYER_PARAM_NAMES.iter().zip(l.tensors()) {
                        out.push((format!("layer{i}.{name}"), t));
                    }
                }
            }
            Body::Mhsa(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    for (h, w) in l.heads.iter().enumerate() {
                        for (name, t) in ["wq", "wk", "wv", "wo"].iter().zip(w) {
                            out.push((format!("mhsa{i}.head{h}.{name}"), t));
                        }
                    }
                }
            }
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.body {
            Body::Eco(layers) => layers.iter_mut().for_each(|l| out.extend(l.tensors_mut())),
            Body::Mhsa(layers) => layers
                .iter_mut()
                .for_each(|l| l.heads.iter_mut().for_each(|w| out.extend(w.iter_mut()))),
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let flat = self
            .params()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        self.vars_from_flat(flat)
    }

    /// Structures handles given in [`Model::params`] order, e.g. leaves made
    /// by a finite-difference harness.
    pub fn vars_from_flat(&self, flat: Vec<Var>) -> Result<ModelVars> {
        if flat.len() != self.params().len() {
            return Err(Error::Dimension(format!(
                "model has {} tensors, got {}",
                self.params().len(),
                flat.len()
            )));
        }
        let mut layers = Vec::new();
        let mut mhsa = Vec::new();
        let mut rest = flat.as_slice();
        match &self.body {
            Body::Eco(ls) => {
                for _ in ls {
                    let (head, tail) = rest.split_at(LAYER_PARAM_NAMES.len());
                    layers.push(LayerVars::from_slice(head)?);
                    rest = tail;
                }
            }
            Body::Mhsa(ls) => {
                for l in ls {
                    let mut heads = Vec::new();
                    for _ in &l.heads {
                        let (head, tail) = rest.split_at(4);
                        heads.push([head[0], head[1], head[2], head[3]]);
                        rest = tail;
                    }
                    mhsa.push(heads);
                }
            }
        }
        let (head_w, head_b) = (rest[0], rest[1]);
        Ok(ModelVars {
            flat,
            layers,
            mhsa,
            head_w,
            head_b,
        })
    }

    /// Streams fed to the body: the unseen stream of a single-modality pass is zero.
    pub fn inputs(&self, record: &SequenceRecord, modality: Modality) -> Result<(Tensor, Tensor)> {
        let lip = record.lip_tensor()?;
        let hand = record.hand_tensor()?;
        let dm = self.config.block.d_model;
        if lip.cols() != dm || hand.cols() != dm {
            return Err(Error::Data(format!(
                "record {} has width {}/{}, model expects {dm}",
                record.id,
                lip.cols(),
                hand.cols()
            )));
        }
        Ok(match modality {
            Modality::Both => (lip, hand),
            Modality::Lip => {
                let z = Tensor::zeros(hand.shape());
                (lip, z)
            }
            Modality::Hand => (Tensor::zeros(lip.shape()), hand),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        lip: &Tensor,
        hand: &Tensor,
        modality: Modality,
        mode: Mode,
        topk_override: Option<usize>,
    ) -> Result<ForwardTrace> {
        if lip.shape() != hand.shape() {
            return Err(Error::Alignment(format!(
                "lip {:?} vs hand {:?}",
                lip.shape(),
                hand.shape()
            )));
        }
        let t = lip.rows();
        let x0 = tape.constant(lip.clone())?;
        let x1 = tape.constant(hand.clone())?;
        let mut trace_layers = Vec::new();
        let mut attention = Vec::new();
        let (a, b) = match &self.body {
            Body::Eco(layers) => {
                let cfg = self.config.block_for(modality);
                let mut xs = vec![x0, x1];
                for (p, v) in layers.iter().zip(&vars.layers) {
                    let out = ecolayer_forward(tape, &xs, v, p, &cfg, mode, topk_override)?;
                    xs = out.outputs.clone();
                    trace_layers.push(out);
                }
                (xs[0], xs[1])
            }
            Body::Mhsa(_) => {
                let prev = tape.set_component(Component::Baseline);
                let mut x = tape.concat_rows(&[x0, x1])?;
                let dh = self.config.block.d_hidden / self.config.heads;
                for heads in &vars.mhsa {
                    let mut sum: Option<Var> = None;
                    let mut maps = Vec::new();
                    for w in heads {
                        let q = tape.matmul(x, w[0])?;
                        let k = tape.matmul(x, w[1])?;
                        let v = tape.matmul(x, w[2])?;
                        let s = tape.matmul_nt(q, k)?;
                        let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
                        let attn = tape.softmax_rows(s)?;
                        let o = tape.matmul(attn, v)?;
                        let o = tape.matmul(o, w[3])?;
                        maps.push(attn);
                        sum = Some(match sum {
                            Some(acc) => tape.add(acc, o)?,
                            None => o,
                        });
                    }
                    if let Some(s) = sum {
                        x = tape.add(x, s)?;
                    }
                    attention.push(maps);
                }
                let a = tape.slice_rows(x, 0, t)?;
                let b = tape.slice_rows(x, t, 2 * t)?;
                tape.restore_component(prev);
                (a, b)
            }
        };
        let prev = tape.set_component(Component::Head);
        let sum = tape.add(a, b)?;
        let avg = tape.scale(sum, 0.5)?;
        let z = tape.matmul(avg, vars.head_w)?;
        let bias = tape.broadcast_rows(vars.head_b, t)?;
        let logits = tape.add(z, bias)?;
        tape.restore_component(prev);
        Ok(ForwardTrace {
            logits,
            layers: trace_layers,
            attention,
        })
    }

    /// Eval-mode logits for one record.
    pub fn logits(&self, record: &SequenceRecord, modality: Modality) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let (lip, hand) = self.inputs(record, modality)?;
        let tr = self.forward(&mut tape, &vars, &lip, &hand, modality, Mode::Eval, None)?;
        Ok(tape.value(tr.logits).clone())
    }

    pub fn predict(&self, record: &SequenceRecord, modality: Modality) -> Result<Vec<usize>> {
        let logits = self.logits(record, modality)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Running normalization statistics, `[layer][stream][which]`; empty for the baseline.
    pub fn running_stats(&self) -> Vec<[[RowStats; 2]; 2]> {
        match &self.body {
            Body::Eco(layers) => layers.iter().map(|l| l.running.clone()).collect(),
            Body::Mhsa(_) => Vec::new(),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `peak · min(s / w, sqrt(w / s))` for step `s >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak;
        }
        let w = self.warmup as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            p.expect_same_shape(g)?;
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, &gi) in gd.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / c1;
                let vhat = v.data()[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step; gradients are averaged.
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Shuffle seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 1,
            peak_lr: 3e-3,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.peak_lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Parameter(
                "batch, lr and adam eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub schedule: Schedule,
    pub step: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(&model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Self {
            model,
            optimizer,
            schedule: Schedule {
                peak: cfg.peak_lr,
                warmup: cfg.warmup,
            },
            step: 0,
        }
    }

    /// Loss and gradients of one sequence; folds batch statistics into the
    /// running estimates.
    fn sequence_grads(&mut self, record: &SequenceRecord) -> Result<(f64, Vec<Tensor>)> {
        let modality = self.model.config.modality;
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape)?;
        let (lip, hand) = self.model.inputs(record, modality)?;
        let tr = self
            .model
            .forward(&mut tape, &vars, &lip, &hand, modality, Mode::Train, None)?;
        let loss = tape.cross_entropy(tr.logits, &record.labels)?;
        let grads = tape.backward(loss)?;
        let params = self.model.params();
        let g = vars
            .flat
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        if let Body::Eco(layers) = &mut self.model.body {
            for (l, out) in layers.iter_mut().zip(&tr.layers) {
                for (si, stats) in out.batch_stats.iter().enumerate() {
                    l.update_running(si, 0, &stats[0]);
                    l.update_running(si, 1, &stats[1]);
                }
            }
        }
        Ok((tape.value(loss).item(), g))
    }

    /// One optimizer step over `batch`; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&SequenceRecord]) -> Result<f64> {
        let step = self.step + 1;
        let diverged = |loss: f64| Error::Diverged { step, loss };
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for r in batch {
            let (loss, g) = self.sequence_grads(r).map_err(|e| match e {
                Error::NonFinite(_) => diverged(f64::NAN),
                e => e,
            })?;
            loss_sum += loss;
            match &mut total {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                None => total = Some(g),
            }
        }
        let Some(mut grads) = total else {
            return Ok(0.0);
        };
        let n = batch.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(loss));
        }
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|x| *x /= n);
        }
        let lr = self.schedule.lr(step);
        self.optimizer.step(self.model.params_mut(), &grads, lr)?;
        if self.model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged(loss));
        }
        self.step = step;
        Ok(loss)
    }
}

/// Trains a fresh model. Fully determined by the two configs and the data.
pub fn train(
    config: &ModelConfig,
    tc: &TrainConfig,
    data: &[SequenceRecord],
) -> Result<(TrainState, TrainLog)> {
    train_with(config, tc, data, |_, _| {})
}

/// [`train`] with a callback after every epoch (`epoch`, mean loss).
pub fn train_with(
    config: &ModelConfig,
    tc: &TrainConfig,
    data: &[SequenceRecord],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(TrainState, TrainLog)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut state = TrainState::new(Model::new(config.clone())?, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(tc.batch) {
            let batch: Vec<&SequenceRecord> = idx.iter().map(|&i| &data[i]).collect();
            sum += state.train_step(&batch)?;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    log.steps = state.step;
    Ok((state, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub frames: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Model, data: &[SequenceRecord], modality: Modality) -> Result<EvalReport> {
    let p = model.config.phonemes;
    let mut confusion = vec![vec![0usize; p]; p];
    let mut correct = 0;
    let mut frames = 0;
    for r in data {
        let pred = model.predict(r, modality)?;
        for (&y, &yhat) in r.labels.iter().zip(&pred) {
            if y >= p {
                return Err(Error::Data(format!(
                    "record {}: label {y} of {p} classes",
                    r.id
                )));
            }
            confusion[y][yhat] += 1;
            correct += usize::from(y == yhat);
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::Evaluation("no frames to evaluate".into()));
    }
    Ok(EvalReport {
        accuracy: correct as f64 / frames as f64,
        frames,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, TaskParams, TaskSpec};

    fn tiny() -> (ModelConfig, Vec<SequenceRecord>) {
        let spec = TaskSpec::new(TaskParams {
            d_model: 16,
            target_len: 20,
            ..TaskParams::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            layers: 1,
            block: BlockConfig {
                d_model: 16,
                d_hidden: 8,
                chunk: 8,
                topk: 2,
                ..BlockConfig::default()
            },
            ..ModelConfig::default()
        };
        (cfg, generate(&spec, 6, 3))
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = Schedule {
            peak: 1e-3,
            warmup: 100,
        };
        assert!((s.lr(100) - 1e-3).abs() < 1e-18);
        assert!((s.lr(50) - 5e-4).abs() < 1e-18);
        assert!((s.lr(400) - 5e-4).abs() < 1e-18);
        assert!(s.lr(99) < s.lr(100) && s.lr(101) < s.lr(100));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::full(&[2, 2], 0.7);
        let before = p.clone();
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Tensor::zeros(&[2, 2])], 0.1)
                .unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::zeros(&[3]);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        adam.step(
            vec![&mut p],
            &[Tensor::new(&[3], vec![2.0, -0.5, 1e3]).unwrap()],
            0.01,
        )
        .unwrap();
        for (x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn logits_have_frame_by_phoneme_shape() {
        let (cfg, data) = tiny();
        let m = Model::new(cfg).unwrap();
        let l = m.logits(&data[0], Modality::Both).unwrap();
        assert_eq!(l.shape(), &[data[0].len(), 40]);
        let mb = Model::new(ModelConfig {
            arch: Arch::Mhsa,
            heads: 2,
            ..m.config.clone()
        })
        .unwrap();
        assert_eq!(
            mb.logits(&data[0], Modality::Both).unwrap().shape(),
            l.shape()
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 2,
            batch: 2,
            ..TrainConfig::default()
        };
        let (a, la) = train(&cfg, &tc, &data).unwrap();
        let (b, lb) = train(&cfg, &tc, &data).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(la, lb);
        assert_eq!(la.steps, 6);
    }

    #[test]
    fn training_reduces_loss() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            epochs: 8,
            batch: 1,
            warmup: 10,
            ..TrainConfig::default()
        };
        let (_, log) = train(&cfg, &tc, &data).unwrap();
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
    }

    #[test]
    fn divergence_reports_the_step() {
        let (cfg, mut data) = tiny();
        let tc = TrainConfig {
            epochs: 1,
            batch: 1,
            ..TrainConfig::default()
        };
        for row in &mut data[0].lip {
            row.iter_mut().for_each(|x| *x *= 1e300);
        }
        let data = &data[..1];
        match train(&cfg, &tc, data) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("overflowing input did not diverge"),
        }
    }

    #[test]
    fn baseline_heads_must_divide_width() {
        let cfg = ModelConfig {
            arch: Arch::Mhsa,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(Model::new(cfg).is_err());
    }
}
