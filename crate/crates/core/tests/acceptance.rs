//! Acceptance suite: every criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::time::Instant;

use ecofuse::analysis::{
    collect_cur, collect_tur, jacobi_svd, median_mean, peak_cur, singular_values, svd_spectrum,
    z_test, TurNorm,
};
use ecofuse::attention::{
    compute_tur, fuse_chunks, modality_shared_attention, modality_specific_attention, FusionInput,
    Psi, TUR_EPSILON,
};
use ecofuse::bench::{count_flops, sweep, BenchConfig};
use ecofuse::block::{BlockConfig, Mode};
use ecofuse::checkpoint;
use ecofuse::model::{evaluate, train, Arch, Model, ModelConfig, TrainConfig};
use ecofuse::synth::{
    self, bayes_oracle_accuracy, generate, Modality, SequenceRecord, TaskParams, TaskSpec,
};
use ecofuse::{finite_diff_check, Component, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Suite {
    failures: Vec<&'static str>,
    total: usize,
}

impl Suite {
    fn record(&mut self, name: &'static str, ok: bool, detail: String, started: Instant) {
        self.total += 1;
        let tag = if ok { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {name}: {detail} ({:.2} s)",
            started.elapsed().as_secs_f64()
        );
        if !ok {
            self.failures.push(name);
        }
    }
}

fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Independent ψ-attention: plain loops over `ψ(q·k/√d)` with `attended` keys.
fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor, kind: Psi, attended: usize) -> Tensor {
    let (t, d) = (q.rows(), q.cols());
    let mut out = Tensor::zeros(&[t, v.cols()]);
    for i in 0..t {
        for j in 0..k.rows() {
            let s: f64 = (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt();
            let a = match kind {
                Psi::SquaredRelu => s.max(0.0).powi(2) / attended as f64,
                Psi::Relu => s.max(0.0) / attended as f64,
                Psi::Linear => s / attended as f64,
            };
            for c in 0..v.cols() {
                let x = out.get(i, c) + a * v.get(j, c);
                out.set(i, c, x);
            }
        }
    }
    out
}

fn degenerate_chunking(s: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let t = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let kind = [Psi::SquaredRelu, Psi::Relu, Psi::Linear][inst % 3];
        let (q, k, v) = (
            rand_t(&mut rng, t, d),
            rand_t(&mut rng, t, d),
            rand_t(&mut rng, t, d),
        );
        let mut tape = Tape::new();
        let (qv, kv, vv) = (
            tape.constant(q.clone()).unwrap(),
            tape.constant(k.clone()).unwrap(),
            tape.constant(v.clone()).unwrap(),
        );
        let out = modality_specific_attention(&mut tape, qv, kv, vv, t, kind, true).unwrap();
        worst = worst.max(
            tape.value(out.output)
                .max_abs_diff(&oracle_attention(&q, &k, &v, kind, t)),
        );
    }
    let ok = worst <= 1e-12 && started.elapsed().as_secs_f64() < 5.0;
    s.record(
        "degenerate chunking (C = T)",
        ok,
        format!("max |diff| {worst:.2e} over 50 instances, tol 1e-12"),
        started,
    );
}

fn degenerate_selection(s: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let c: usize = rng.random_range(1..=12);
        let t: usize = rng.random_range(1..=48);
        let d = rng.random_range(1..=16);
        let kind = [Psi::SquaredRelu, Psi::Relu, Psi::Linear][inst % 3];
        let n = t.div_ceil(c);
        let valid: Vec<usize> = (0..n).map(|i| (t - i * c).min(c)).collect();
        let q = rand_t(&mut rng, t, d);
        let ks = [rand_t(&mut rng, t, d), rand_t(&mut rng, t, d)];
        let vs = [rand_t(&mut rng, t, d), rand_t(&mut rng, t, d)];
        let tables: Vec<_> = (0..2)
            .map(|_| {
                let chunks: Vec<Tensor> = (0..n)
                    .map(|_| Tensor::randn(&[c, c], 1.0, &mut rng).map(f64::abs))
                    .collect();
                compute_tur(&chunks, &valid, TUR_EPSILON)
                    .unwrap()
                    .select(c)
                    .unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone()).unwrap();
        let kv: Vec<Var> = ks
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let vv: Vec<Var> = vs
            .iter()
            .map(|x| tape.constant(x.clone()).unwrap())
            .collect();
        let inputs: Vec<FusionInput<'_>> = (0..2)
            .map(|m| FusionInput {
                k: kv[m],
                v_sha: vv[m],
                table: &tables[m],
            })
            .collect();
        let fused = fuse_chunks(&mut tape, &inputs, c).unwrap();
        let (out, _) = modality_shared_attention(&mut tape, qv, &fused, kind).unwrap();

        // Chunk-major concatenation [c0m0 | c0m1 | c1m0 | ...] of every real row.
        let (mut krows, mut vrows) = (Vec::new(), Vec::new());
        for i in 0..n {
            for m in 0..2 {
                for j in 0..valid[i] {
                    krows.push(ks[m].row(i * c + j).to_vec());
                    vrows.push(vs[m].row(i * c + j).to_vec());
                }
            }
        }
        let (kf, vf) = (
            Tensor::from_rows(&krows).unwrap(),
            Tensor::from_rows(&vrows).unwrap(),
        );
        let expect = oracle_attention(&q, &kf, &vf, kind, krows.len());
        worst = worst.max(tape.value(out).max_abs_diff(&expect));
    }
    let ok = worst <= 1e-12 && started.elapsed().as_secs_f64() < 5.0;
    s.record(
        "degenerate selection (k = C)",
        ok,
        format!("max |diff| {worst:.2e} over 50 instances, tol 1e-12"),
        started,
    );
}

fn reordering(s: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let c = rng.random_range(d + 1..=64);
        let mut tape = Tape::new();
        let q = tape.constant(rand_t(&mut rng, c, d)).unwrap();
        let k = tape.constant(rand_t(&mut rng, c, d)).unwrap();
        let v = tape.constant(rand_t(&mut rng, c, d)).unwrap();
        let reordered =
            modality_specific_attention(&mut tape, q, k, v, c, Psi::Linear, false).unwrap();
        let direct = modality_specific_attention(&mut tape, q, k, v, c, Psi::Linear, true).unwrap();
        let (a, b) = (tape.value(reordered.output), tape.value(direct.output));
        worst = worst.max(a.max_abs_diff(b) / b.max_abs().max(f64::MIN_POSITIVE));
    }
    let ok = worst <= 1e-10 && started.elapsed().as_secs_f64() < 2.0;
    s.record(
        "reordering identity Q(KᵀV) = (QKᵀ)V",
        ok,
        format!("max rel err {worst:.2e} over 100 chunks, tol 1e-10"),
        started,
    );
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> ecofuse::Result<Var>>;

/// Values bounded away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng).map(|x| {
        if x.abs() < 0.2 {
            x.signum() * 0.2 + x
        } else {
            x
        }
    })
}

fn sum_of(tape: &mut Tape, x: Var) -> ecofuse::Result<Var> {
    // A fixed nonuniform weighting so every output entry matters differently.
    let (m, n) = tape.value(x).matrix_dims()?;
    let w = Tensor::new(
        &[m, n],
        (0..m * n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect(),
    )?;
    let w = tape.constant(w)?;
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

fn gradient_suite(s: &mut Suite) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let a34 = away_from_zero(&mut rng, &[3, 4]);
    let b34 = away_from_zero(&mut rng, &[3, 4]);
    let b45 = away_from_zero(&mut rng, &[4, 5]);
    let b54 = away_from_zero(&mut rng, &[5, 4]);
    let b35 = away_from_zero(&mut rng, &[3, 5]);
    let row4 = away_from_zero(&mut rng, &[1, 4]);
    let w_dw = away_from_zero(&mut rng, &[3, 3]);
    let g3 = away_from_zero(&mut rng, &[3]);
    let cases: Vec<(&str, Vec<Tensor>, Check)> = vec![
        (
            "matmul",
            vec![a34.clone(), b45.clone()],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "matmul_nt",
            vec![a34.clone(), b54.clone()],
            Box::new(|t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "matmul_tn",
            vec![a34.clone(), b35.clone()],
            Box::new(|t, v| {
                let y = t.matmul_tn(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "add",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "sub",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "mul",
            vec![a34.clone(), b34.clone()],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "scale",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7)?;
                sum_of(t, y)
            }),
        ),
        (
            "relu",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "square",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.square(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "sigmoid",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "swish",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.swish(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "transpose",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.transpose(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "concat_rows",
            vec![a34.clone(), row4.clone()],
            Box::new(|t, v| {
                let y = t.concat_rows(&[v[0], v[1], v[0]])?;
                sum_of(t, y)
            }),
        ),
        (
            "slice_rows",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.slice_rows(v[0], 1, 3)?;
                sum_of(t, y)
            }),
        ),
        (
            "gather_rows",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                sum_of(t, y)
            }),
        ),
        (
            "sum_axis(0)",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 0)?;
                sum_of(t, y)
            }),
        ),
        (
            "sum_axis(1)",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.sum_axis(v[0], 1)?;
                sum_of(t, y)
            }),
        ),
        (
            "sum_all",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.square(v[0])?;
                t.sum_all(y)
            }),
        ),
        (
            "broadcast_rows",
            vec![row4.clone()],
            Box::new(|t, v| {
                let y = t.broadcast_rows(v[0], 3)?;
                sum_of(t, y)
            }),
        ),
        (
            "softmax_rows",
            vec![a34.clone()],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0])?;
                sum_of(t, y)
            }),
        ),
        (
            "cross_entropy",
            vec![a34.clone()],
            Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 1])),
        ),
        (
            "depthwise_conv",
            vec![a34.clone(), w_dw.clone()],
            Box::new(|t, v| {
                let y = t.depthwise_conv(v[0], v[1])?;
                sum_of(t, y)
            }),
        ),
        (
            "norm_rows (batch)",
            vec![a34.clone(), g3.clone(), g3.map(|x| x * 0.5)],
            Box::new(|t, v| {
                let (y, _) = t.norm_rows(v[0], v[1], v[2], None)?;
                sum_of(t, y)
            }),
        ),
        (
            "norm_rows (running)",
            vec![a34.clone(), g3.clone(), g3.map(|x| x * 0.5)],
            Box::new(|t, v| {
                let stats = ecofuse::autodiff::RowStats {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![1.5, 0.7, 2.0],
                };
                let (y, _) = t.norm_rows(v[0], v[1], v[2], Some(&stats))?;
                sum_of(t, y)
            }),
        ),
    ];
    let mut worst_prim = 0.0f64;
    let mut worst_name = "";
    for (name, params, f) in &cases {
        let e = finite_diff_check(f, params, 1e-6).unwrap();
        if e > worst_prim {
            worst_prim = e;
            worst_name = name;
        }
    }

    // Whole two-layer model, frame cross-entropy, every learnable tensor.
    let spec = TaskSpec::new(TaskParams {
        d_model: 8,
        target_len: 10,
        seg_min: 3,
        seg_max: 5,
        phonemes: 12,
        lip_classes: 4,
        hand_classes: 4,
        ..TaskParams::default()
    })
    .unwrap();
    let rec = generate(&spec, 1, 5).remove(0);
    let cfg = ModelConfig {
        layers: 2,
        block: BlockConfig {
            d_model: 8,
            d_hidden: 4,
            chunk: 4,
            topk: 2,
            ..BlockConfig::default()
        },
        phonemes: 12,
        seed: 6,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).unwrap();
    model.head_w = Tensor::randn(&[8, 12], 0.3, &mut rng);
    let (lip, hand) = model.inputs(&rec, Modality::Both).unwrap();
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let loss = |t: &mut Tape, v: &[Var]| -> ecofuse::Result<Var> {
        let vars = model.vars_from_flat(v.to_vec())?;
        let tr = model.forward(t, &vars, &lip, &hand, Modality::Both, Mode::Train, None)?;
        t.cross_entropy(tr.logits, &rec.labels)
    };
    let worst_block = finite_diff_check(loss, &params, 1e-6).unwrap();
    let ok = worst_prim < 1e-6 && worst_block < 1e-4 && started.elapsed().as_secs_f64() < 60.0;
    s.record(
        "gradient suite",
        ok,
        format!(
            "{} primitives, worst {worst_prim:.2e} ({worst_name}), tol 1e-6; 2-layer model loss {worst_block:.2e}, tol 1e-4",
            cases.len()
        ),
        started,
    );
}

fn tur_tables(s: &mut Suite) {
    let started = Instant::now();
    let eps = TUR_EPSILON;
    let id = compute_tur(&[Tensor::eye(4)], &[4], eps).unwrap();
    let uni = compute_tur(&[Tensor::full(&[4, 4], 0.25)], &[4], eps).unwrap();
    let m = Tensor::from_rows(&[vec![0.5, 0.2], vec![0.5, 0.8]]).unwrap();
    let two = compute_tur(&[m], &[2], eps).unwrap();
    let mut worst = 0.0f64;
    for &x in &id.tur[0] {
        worst = worst.max(x.abs());
    }
    for &x in &uni.tur[0] {
        worst = worst.max((x - 0.75 / (0.25 + eps)).abs());
    }
    worst = worst.max((two.tur[0][0] - 0.5 / (0.5 + eps)).abs());
    worst = worst.max((two.tur[0][1] - 0.2 / (0.8 + eps)).abs());
    let nominal = (uni.tur[0][0] - 3.0)
        .abs()
        .max((two.tur[0][0] - 1.0).abs())
        .max((two.tur[0][1] - 0.25).abs());
    let ok = worst <= 1e-12 && nominal < 1e-6;
    s.record(
        "TUR tabulated matrices",
        ok,
        format!("identity 0, uniform 3, 2x2 [1.0, 0.25]: max err {worst:.1e} (guarded), {nominal:.1e} (nominal)"),
        started,
    );
}

fn flop_accounting(s: &mut Suite) {
    let started = Instant::now();
    let ts = [128, 256, 512, 1024, 2048];
    let template = BenchConfig {
        chunk: 32,
        topk: 4,
        d: 64,
        d_model: 256,
        ..BenchConfig::default()
    };
    let sw = sweep(&ts, &template, 5, false).unwrap();
    let mut exact = sw.reports.iter().all(|r| r.exact());
    for c in [8, 16, 32, 64] {
        for k in [1, 2, 4, 8] {
            let cfg = BenchConfig {
                t: 200,
                chunk: c,
                topk: k,
                d: 32,
                d_model: 64,
                ..BenchConfig::default()
            };
            exact &= count_flops(&cfg, 1).unwrap().exact();
        }
    }
    let base = sw.slope(Component::Baseline).unwrap();
    let spe = sw.slope(Component::ModalitySpecific).unwrap();
    let quarter = sw
        .reports
        .iter()
        .all(|r| 4 * r.tiaa_attention_macs() <= r.get(Component::Baseline).unwrap().measured);
    let worst_ratio = sw
        .reports
        .iter()
        .map(|r| {
            r.tiaa_attention_macs() as f64 / r.get(Component::Baseline).unwrap().measured as f64
        })
        .fold(0.0f64, f64::max);
    let ok = exact
        && (base - 2.0).abs() <= 0.05
        && (spe - 1.0).abs() <= 0.05
        && quarter
        && started.elapsed().as_secs_f64() < 60.0;
    s.record(
        "FLOP accounting",
        ok,
        format!(
            "counter == formula: {exact}; slopes baseline {base:.3}, modality-specific {spe:.3}; max TIAA/baseline {worst_ratio:.4} (<= 0.25)"
        ),
        started,
    );
}

struct Trained {
    spec: TaskSpec,
    train: Vec<SequenceRecord>,
    test: Vec<SequenceRecord>,
    full: Model,
    full_acc: f64,
}

fn model_config(modality: Modality) -> ModelConfig {
    ModelConfig {
        modality,
        ..ModelConfig::default()
    }
}

fn synthetic_task(s: &mut Suite) -> Trained {
    let started = Instant::now();
    let spec = TaskSpec::new(TaskParams::default()).unwrap();
    let train_set = generate(&spec, 500, 1);
    let test = generate(&spec, 100, 2);
    let tc = TrainConfig::default();
    let (full, _) = train(&model_config(Modality::Both), &tc, &train_set).unwrap();
    let full_acc = evaluate(&full.model, &test, Modality::Both)
        .unwrap()
        .accuracy;
    let (lip, _) = train(&model_config(Modality::Lip), &tc, &train_set).unwrap();
    let lip_acc = evaluate(&lip.model, &test, Modality::Lip).unwrap().accuracy;
    let (hand, _) = train(&model_config(Modality::Hand), &tc, &train_set).unwrap();
    let hand_acc = evaluate(&hand.model, &test, Modality::Hand)
        .unwrap()
        .accuracy;
    let lip_cap = bayes_oracle_accuracy(&spec, Modality::Lip) + 0.10;
    let hand_cap = bayes_oracle_accuracy(&spec, Modality::Hand) + 0.10;
    let gap = full_acc - lip_acc.max(hand_acc);
    let secs = started.elapsed().as_secs_f64();
    let ok = full_acc >= 0.90
        && lip_acc <= lip_cap
        && hand_acc <= hand_cap
        && gap >= 0.10
        && secs <= 600.0;
    s.record(
        "synthetic task",
        ok,
        format!(
            "fused {full_acc:.4} (>= 0.90), lip {lip_acc:.4} (<= {lip_cap:.2}), hand {hand_acc:.4} (<= {hand_cap:.2}), gap {gap:.4} (>= 0.10)"
        ),
        started,
    );
    Trained {
        spec,
        train: train_set,
        test,
        full: full.model,
        full_acc,
    }
}

fn ablations(s: &mut Suite, tr: &Trained) {
    let started = Instant::now();
    let tc = TrainConfig::default();
    let run = |f: fn(&mut BlockConfig)| {
        let mut cfg = model_config(Modality::Both);
        f(&mut cfg.block);
        let (st, _) = train(&cfg, &tc, &tr.train)?;
        evaluate(&st.model, &tr.test, Modality::Both).map(|r| r.accuracy)
    };
    let gate = run(|b| b.gate = false);
    let fusion = run(|b| b.fusion = false);
    let (ok, detail) = match (gate, fusion) {
        (Ok(g), Ok(f)) => (
            g < tr.full_acc && f < tr.full_acc,
            format!(
                "full {:.4}, gate-off {g:.4}, fusion-off {f:.4}",
                tr.full_acc
            ),
        ),
        (g, f) => (false, format!("run failed: gate {g:?}, fusion {f:?}")),
    };
    s.record("ablation flags", ok, detail, started);
}

fn low_rank_spectrum(s: &mut Suite, tr: &Trained) {
    let started = Instant::now();
    let cfg = ModelConfig {
        arch: Arch::Mhsa,
        ..model_config(Modality::Both)
    };
    let tc = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (base, _) = train(&cfg, &tc, &tr.train).unwrap();
    let maps = ecofuse::analysis::baseline_attention(&base.model, &tr.test, 100).unwrap();
    let report = svd_spectrum(&maps).unwrap();
    let c = &report.curve;
    let monotone =
        c.windows(2).all(|w| w[1] >= w[0]) && c.iter().all(|&x| (0.0..=1.0).contains(&x));
    let terminal = (c.last().unwrap() - 1.0).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut rank3 = true;
    for _ in 0..10 {
        let m = rand_t(&mut rng, 8, 3)
            .matmul(&rand_t(&mut rng, 8, 3).transpose().unwrap())
            .unwrap();
        rank3 &= singular_values(&m)
            .unwrap()
            .iter()
            .filter(|&&x| x > 1e-10)
            .count()
            == 3;
    }
    let mut worst = 0.0f64;
    let mut probes: Vec<Tensor> = maps.iter().take(3).cloned().collect();
    probes.extend((0..5).map(|i| rand_t(&mut rng, 20 + i, 30 - 3 * i)));
    for a in &probes {
        let r = jacobi_svd(a).unwrap().reconstruct().unwrap();
        worst = worst.max(r.zip_map(a, |x, y| x - y).unwrap().frobenius() / a.frobenius());
    }
    let top = |m: usize| c.get(m - 1).copied().unwrap_or(1.0);
    let ok = report.count == 100 && monotone && terminal && rank3 && worst < 1e-8;
    s.record(
        "low-rank spectrum",
        ok,
        format!(
            "{} matrices, curve monotone {monotone}, ends at 1 {terminal}, top-8 {:.3} top-32 {:.3}; rank-3 exact {rank3}; reconstruction {worst:.1e}",
            report.count,
            top(8),
            top(32)
        ),
        started,
    );
}

fn distributions(s: &mut Suite, tr: &Trained) {
    let started = Instant::now();
    let tur = collect_tur(&tr.full, &tr.test, TurNorm::Max).unwrap();
    let (median, mean) = median_mean(&tur).unwrap();
    let with = collect_cur(&tr.full, &tr.test, true).unwrap();
    let without = collect_cur(&tr.full, &tr.test, false).unwrap();
    let cur_sum = with
        .iter()
        .chain(&without)
        .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let zs: Vec<f64> = (0..20)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let mut draw = |mu: f64| -> Vec<f64> {
                (0..100)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + z
                    })
                    .collect()
            };
            let (a, b) = (draw(0.0), draw(1.0));
            z_test(&a, &b).unwrap().z
        })
        .collect();
    let zmean = zs.iter().sum::<f64>() / zs.len() as f64;
    let cur_z = z_test(&peak_cur(&with), &peak_cur(&without)).unwrap();
    let ok = median < mean && cur_sum <= 1e-12 && (zmean + 7.071).abs() <= 0.5;
    s.record(
        "distribution properties",
        ok,
        format!(
            "TUR median {median:.4} < mean {mean:.4}; max |sum CUR - 1| {cur_sum:.1e}; mean z over 20 seeds {zmean:.3}; peak-CUR z-test with/without selection z={:.3} p={:.3e}",
            cur_z.z, cur_z.p
        ),
        started,
    );
}

fn round_trips(s: &mut Suite, tr: &Trained) {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("train.jsonl");
    let meta = synth::DatasetMeta {
        task: tr.spec.params.clone(),
        seed: 1,
        count: tr.train.len(),
    };
    synth::save(&data_path, &tr.train, Some(&meta)).unwrap();
    let (meta_back, loaded) = synth::load(&data_path).unwrap();
    let copy = dir.path().join("copy.jsonl");
    synth::save(&copy, &loaded, meta_back.as_ref()).unwrap();
    let data_ok = loaded == tr.train
        && meta_back.as_ref() == Some(&meta)
        && std::fs::read(&data_path).unwrap() == std::fs::read(&copy).unwrap();

    let ck_path = dir.path().join("model.bin");
    checkpoint::save(&tr.full, &ck_path).unwrap();
    let back = checkpoint::load(&ck_path).unwrap();
    let ck_ok = back == tr.full && checkpoint::to_bytes(&back) == std::fs::read(&ck_path).unwrap();
    let preds_ok = tr.test[..3].iter().all(|r| {
        back.logits(r, Modality::Both).unwrap() == tr.full.logits(r, Modality::Both).unwrap()
    });

    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (first, log_a) = train(&model_config(Modality::Both), &tc, &tr.train[..100]).unwrap();
    let (second, log_b) = train(&model_config(Modality::Both), &tc, &tr.train[..100]).unwrap();
    let (la, lb) = (
        *log_a.epoch_loss.last().unwrap(),
        *log_b.epoch_loss.last().unwrap(),
    );
    let train_ok = la.to_bits() == lb.to_bits() && first.model == second.model;
    let ok = data_ok && ck_ok && preds_ok && train_ok;
    s.record(
        "round trips",
        ok,
        format!(
            "jsonl {data_ok}, checkpoint {ck_ok} (predictions {preds_ok}), same-seed retrain final loss {la:e} vs {lb:e} bitwise {train_ok}"
        ),
        started,
    );
}

fn main() {
    let started = Instant::now();
    let mut s = Suite {
        failures: Vec::new(),
        total: 0,
    };
    degenerate_chunking(&mut s);
    degenerate_selection(&mut s);
    reordering(&mut s);
    gradient_suite(&mut s);
    tur_tables(&mut s);
    flop_accounting(&mut s);
    let tr = synthetic_task(&mut s);
    ablations(&mut s, &tr);
    low_rank_spectrum(&mut s, &tr);
    distributions(&mut s, &tr);
    round_trips(&mut s, &tr);
    println!(
        "acceptance: {}/{} passed in {:.1} s",
        s.total - s.failures.len(),
        s.total,
        started.elapsed().as_secs_f64()
    );
    if !s.failures.is_empty() {
        println!("failed: {}", s.failures.join(", "));
        std::process::exit(1);
    }
}
