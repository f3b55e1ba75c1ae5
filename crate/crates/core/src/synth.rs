//! Two-stream synthetic sequence-labeling task.
//!
//! Every phoneme is an injective pair (lip class, hand class). Lip frames show
//! the lip-class embedding, hand frames the hand-class embedding, both plus
//! Gaussian noise, with the hand stream running `hand_lead` frames ahead of
//! the labels. Several phonemes share every lip class and every hand class, so
//! neither stream alone identifies the label but the pair always does.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which input streams a model sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[default]
    Both,
    Lip,
    Hand,
}

impl Modality {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" | "fused" => Some(Modality::Both),
            "lip" => Some(Modality::Lip),
            "hand" => Some(Modality::Hand),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::Lip => "lip",
            Modality::Hand => "hand",
        }
    }
}

/// Generator parameters; everything else in a [`TaskSpec`] derives from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub phonemes: usize,
    pub lip_classes: usize,
    pub hand_classes: usize,
    pub d_model: usize,
    /// Per-coordinate noise standard deviation; embeddings have unit RMS.
    pub noise: f64,
    pub hand_lead: usize,
    pub seg_min: usize,
    pub seg_max: usize,
    /// Segments are appended until a sequence reaches at least this length.
    pub target_len: usize,
    /// Seed of the embedding tables (shared by every split of one task).
    pub task_seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            phonemes: 40,
            lip_classes: 10,
            hand_classes: 8,
            d_model: 64,
            noise: 0.3,
            hand_lead: 2,
            seg_min: 8,
            seg_max: 16,
            target_len: 96,
            task_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub params: TaskParams,
    /// `(lip class, hand class)` of every phoneme
    pub phoneme_map: Vec<(usize, usize)>,
    /// L × d_m
    pub lip_table: Tensor,
    /// H × d_m
    pub hand_table: Tensor,
}

fn unit_rms_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[rows, d], 1.0, rng);
    let scale = (d as f64).sqrt();
    for i in 0..rows {
        let norm = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..d {
            let v = t.get(i, j) * scale / norm;
            t.set(i, j, v);
        }
    }
    t
}

impl TaskSpec {
    pub fn new(params: TaskParams) -> Result<Self> {
        let p = &params;
        let bad = |m: String| Err(Error::Parameter(m));
        if p.phonemes == 0 || p.lip_classes == 0 || p.hand_classes == 0 || p.d_model == 0 {
            return bad("class counts and width must be positive".into());
        }
        if p.lip_classes * p.hand_classes < p.phonemes {
            return bad(format!(
                "{} lip x {} hand classes cannot encode {} phonemes",
                p.lip_classes, p.hand_classes, p.phonemes
            ));
        }
        if p.phonemes <= p.lip_classes || p.phonemes <= p.hand_classes {
            return bad("each single stream must be ambiguous (P > L and P > H)".into());
        }
        if p.seg_min == 0 || p.seg_min > p.seg_max || p.target_len == 0 {
            return bad("segment lengths must satisfy 1 <= min <= max".into());
        }
        if !(p.noise >= 0.0) {
            return bad("noise must be nonnegative".into());
        }
        // p = q·L + r  ->  (r, (q + r) mod H); injective whenever P <= L·H.
        let phoneme_map: Vec<(usize, usize)> = (0..p.phonemes)
            .map(|ph| {
                let (q, r) = (ph / p.lip_classes, ph % p.lip_classes);
                (r, (q + r) % p.hand_classes)
            })
            .collect();
        let mut seen = std::collections::HashSet::new();
        if !phoneme_map.iter().all(|pair| seen.insert(*pair)) {
            return bad("phoneme map is not injective".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.task_seed);
        let lip_table = unit_rms_rows(p.lip_classes, p.d_model, &mut rng);
        let hand_table = unit_rms_rows(p.hand_classes, p.d_model, &mut rng);
        Ok(Self {
            params,
            phoneme_map,
            lip_table,
            hand_table,
        })
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.phoneme_map.iter().all(|pair| seen.insert(*pair))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: u64,
    /// T × d_m
    pub lip: Vec<Vec<f64>>,
    /// T × d_m
    pub hand: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Start frame of every label segment.
    #[serde(default)]
    pub boundaries: Vec<usize>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn lip_tensor(&self) -> Result<Tensor> {
        rows_to_tensor(&self.lip)
    }

    pub fn hand_tensor(&self) -> Result<Tensor> {
        rows_to_tensor(&self.hand)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.labels.len();
        if t == 0 || self.lip.len() != t || self.hand.len() != t {
            return Err(Error::Data(format!(
                "record {}: {} labels, {} lip frames, {} hand frames",
                self.id,
                t,
                self.lip.len(),
                self.hand.len()
            )));
        }
        Ok(())
    }
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows).map_err(|e| Error::Data(e.to_string()))
}

/// Generates `count` records; record `i` draws from its own ChaCha stream of `seed`.
pub fn generate(spec: &TaskSpec, count: usize, seed: u64) -> Vec<SequenceRecord> {
    (0..count)
        .map(|i| generate_one(spec, i as u64, seed))
        .collect()
}

fn generate_one(spec: &TaskSpec, id: u64, seed: u64) -> SequenceRecord {
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id + 1);
    let mut labels = Vec::new();
    let mut boundaries = Vec::new();
    while labels.len() < p.target_len {
        boundaries.push(labels.len());
        let len = rng.random_range(p.seg_min..=p.seg_max);
        let ph = rng.random_range(0..p.phonemes);
        labels.extend(std::iter::repeat_n(ph, len));
    }
    let t = labels.len();
    let frame = |table: &Tensor, class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let noise = Tensor::randn(&[p.d_model], p.noise, rng);
        table
            .row(class)
            .iter()
            .zip(noise.data())
            .map(|(e, n)| e + n)
            .collect()
    };
    let mut lip = Vec::with_capacity(t);
    let mut hand = Vec::with_capacity(t);
    for ti in 0..t {
        let (l, _) = spec.phoneme_map[labels[ti]];
        let (_, h) = spec.phoneme_map[labels[(ti + p.hand_lead).min(t - 1)]];
        lip.push(frame(&spec.lip_table, l, &mut rng));
        hand.push(frame(&spec.hand_table, h, &mut rng));
    }
    SequenceRecord {
        id,
        lip,
        hand,
        labels,
        boundaries,
    }
}

/// Frame-level Bayes accuracy of an ideal classifier seeing only `modality`
/// under a uniform phoneme prior: observed classes / P.
pub fn bayes_oracle_accuracy(spec: &TaskSpec, modality: Modality) -> f64 {
    let distinct = |f: fn(&(usize, usize)) -> usize| {
        spec.phoneme_map
            .iter()
            .map(f)
            .collect::<std::collections::HashSet<_>>()
            .len()
    };
    let observed = match modality {
        Modality::Both => spec.phoneme_map.len(),
        Modality::Lip => distinct(|p| p.0),
        Modality::Hand => distinct(|p| p.1),
    };
    observed as f64 / spec.params.phonemes as f64
}

/// Metadata echoed as the first line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskParams,
    pub seed: u64,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: DatasetMeta,
}

/// Writes JSON Lines: an optional `{"_meta": ...}` line, then one record per line.
pub fn save(path: &Path, records: &[SequenceRecord], meta: Option<&DatasetMeta>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(m) = meta {
        serde_json::to_writer(&mut w, &MetaLine { meta: m.clone() })
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Option<DatasetMeta>, Vec<SequenceRecord>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        };
        if i == 0 && line.trim_start().starts_with("{\"_meta\"") {
            let m: MetaLine = serde_json::from_str(&line).map_err(parse_err)?;
            meta = Some(m.meta);
            continue;
        }
        let mut r: SequenceRecord = serde_json::from_str(&line).map_err(parse_err)?;
        r.validate().map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if r.boundaries.is_empty() {
            r.boundaries = (0..r.labels.len())
                .filter(|&t| t == 0 || r.labels[t] != r.labels[t - 1])
                .collect();
        }
        records.push(r);
    }
    Ok((meta, records))
}
