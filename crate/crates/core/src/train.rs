//! Training loop, evaluation, checkpoints and throughput measurement.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{freeze, Vocab};
use crate::error::{Error, Result};
use crate::heads::DecodedSet;
use crate::matching::PaddedGold;
use crate::metrics::{per_type_report, resolve, MetricReport, ScoredPrediction, Task};
use crate::model::{build_vocab, Model};
use crate::params::{Adam, AdamConfig, Gradients, LinearSchedule, ParamStore};
use crate::types::{Example, Region};

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub dev_f1: Option<f64>,
}

impl Checkpoint {
    /// Atomic write: serialize to a sibling temporary file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
        let tmp = dir.join(format!(".{name}.tmp"));
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        ckpt.config
            .validate()
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Ok(ckpt)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.vocab.clone(), self.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_gmner_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the best dev GMNER F1 (the last epoch
    /// when there is no dev set).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_dev_f1(&self) -> Option<f64> {
        self.best.dev_f1
    }
}

struct Prepared<'a> {
    example: &'a Example,
    padded: PaddedGold,
}

fn prepare<'a>(model: &Model, data: &'a [Example]) -> Result<Vec<Prepared<'a>>> {
    let mut out = Vec::with_capacity(data.len());
    for (i, ex) in data.iter().enumerate() {
        ex.validate(model.config.p)
            .map_err(|e| Error::invalid(format!("training example {i}: {e}")))?;
        if ex.gold.len() > model.config.u {
            return Err(Error::Capacity {
                what: format!("training example {i}"),
                gold: ex.gold.len(),
                queries: model.config.u,
            });
        }
        let targets = match model.gold_targets(ex) {
            Ok(t) => t,
            Err(Error::UnmatchableRegion) => {
                warn!("skipping training example {i}: groundable entity without candidate regions");
                continue;
            }
            Err(e) => return Err(e),
        };
        out.push(Prepared {
            example: ex,
            padded: model.pad(&targets)?,
        });
    }
    Ok(out)
}

/// Train from scratch. With `config.paths.output_dir` set, `best.json` and
/// `last.json` are written there.
pub fn train(config: &RunConfig, train_set: &[Example], dev_set: &[Example]) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = build_vocab(train_set, &config.schema()?);
    let mut model = Model::new(config.clone(), vocab)?;
    let prepared = prepare(&model, train_set)?;
    if prepared.is_empty() {
        return Err(Error::invalid("no usable training examples"));
    }

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let schedule = LinearSchedule::new(steps_per_epoch * config.epochs, config.warmup_ratio);
    let mut optimizer = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        freeze(&mut model.store, epoch < config.freeze_epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&model.store);
            for &i in batch {
                let out = model.loss_and_grads(prepared[i].example, &prepared[i].padded)?;
                loss_sum += out.loss;
                grads.absorb(out.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut model.store, &grads, schedule.factor(step));
            step += 1;
        }
        freeze(&mut model.store, false);
        let mean_loss = loss_sum / prepared.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::invalid(format!("loss diverged in epoch {}", epoch + 1)));
        }

        let dev_f1 = if dev_set.is_empty() {
            None
        } else {
            let (report, _) = evaluate(&model, dev_set, false)?;
            Some(report.overall(Task::Gmner).f1)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss,
            dev_gmner_f1: dev_f1,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {:>3}  loss {:.5}  dev GMNER F1 {}  ({:.1}s)",
            log.epoch,
            log.mean_loss,
            dev_f1.map_or("-".to_string(), |f| format!("{f:.4}")),
            log.seconds
        );
        history.push(log);

        let ckpt = Checkpoint {
            config: config.clone(),
            vocab: model.vocab.clone(),
            params: model.store.clone(),
            optimizer: optimizer.clone(),
            epoch: epoch + 1,
            rng: rng.clone(),
            dev_f1,
        };
        let improved = match (&best, dev_f1) {
            (None, _) => true,
            (Some(b), Some(f)) => f > b.dev_f1.unwrap_or(f64::NEG_INFINITY),
            (Some(_), None) => true,
        };
        if improved {
            if let Some(dir) = &config.paths.output_dir {
                ckpt.save(&dir.join("best.json"))?;
            }
            best = Some(ckpt);
        }
    }

    let last = Checkpoint {
        config: config.clone(),
        vocab: model.vocab.clone(),
        params: model.store.clone(),
        optimizer,
        epoch: config.epochs,
        rng,
        dev_f1: history.last().and_then(|h| h.dev_gmner_f1),
    };
    if let Some(dir) = &config.paths.output_dir {
        last.save(&dir.join("last.json"))?;
    }
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

/// Decode every example and score it.
pub fn evaluate(model: &Model, data: &[Example], per_type: bool) -> Result<(MetricReport, Vec<DecodedSet>)> {
    let mut decoded = Vec::with_capacity(data.len());
    let mut scored: Vec<Vec<ScoredPrediction>> = Vec::with_capacity(data.len());
    for ex in data {
        let (_, d) = model.predict(ex)?;
        scored.push(resolve(&d, &ex.regions)?);
        decoded.push(d);
    }
    let golds: Vec<_> = data.iter().map(|e| e.gold.clone()).collect();
    let report = per_type_report(&scored, &golds, model.schema.names(), per_type)?;
    Ok((report, decoded))
}

#[derive(Debug, Serialize)]
struct PredictedEntity<'a> {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    type_name: &'a str,
    region_index: Option<usize>,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    confidence: f64,
}

#[derive(Debug, Serialize)]
struct PredictionLine<'a> {
    entities: Vec<PredictedEntity<'a>>,
}

/// One JSON line per example. `region_index` is the 0-based candidate
/// index, `null` for ungroundable predictions.
pub fn write_predictions(
    path: &Path,
    model: &Model,
    data: &[Example],
    decoded: &[DecodedSet],
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (ex, d) in data.iter().zip(decoded) {
        let entities = d
            .predictions
            .iter()
            .map(|p| {
                let slot = match p.quad.region {
                    Region::Candidate(i) if i > 0 => Some(i - 1),
                    _ => None,
                };
                PredictedEntity {
                    start: p.quad.start,
                    end: p.quad.end,
                    type_name: &model.schema.names()[p.quad.type_id],
                    region_index: slot,
                    bbox: slot.map(|i| ex.regions[i].bbox.to_array()),
                    confidence: p.confidence,
                }
            })
            .collect();
        serde_json::to_writer(&mut w, &PredictionLine { entities })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub batch_size: usize,
    pub batches: usize,
    pub u: usize,
    pub k: Summary,
    pub n: Summary,
    pub examples_per_sec: f64,
    /// Per-example latency across timed batches, in milliseconds.
    pub latency_ms: Summary,
    pub warmup_batches: usize,
    /// Examples inside a batch run one after another, so batch size only
    /// changes how timings are grouped, not per-example latency.
    pub note: String,
}

/// Time forward + decode over `data` in batches of `batch_size`; the first
/// `warmup` batches are not measured.
pub fn benchmark(model: &Model, data: &[Example], batch_size: usize, warmup: usize) -> Result<BenchmarkReport> {
    if data.is_empty() {
        return Err(Error::NothingToBenchmark);
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let batches: Vec<&[Example]> = data.chunks(batch_size).collect();
    for b in batches.iter().cycle().take(warmup) {
        for ex in *b {
            model.predict(ex)?;
        }
    }
    let mut per_example = Vec::with_capacity(batches.len());
    let mut total_time = 0.0;
    for b in &batches {
        let t = Instant::now();
        for ex in *b {
            std::hint::black_box(model.predict(ex)?);
        }
        let s = t.elapsed().as_secs_f64();
        total_time += s;
        per_example.push(1e3 * s / b.len() as f64);
    }
    let ks: Vec<f64> = data.iter().map(|e| e.regions.len() as f64).collect();
    let ns: Vec<f64> = data.iter().map(|e| e.tokens.len() as f64).collect();
    Ok(BenchmarkReport {
        batch_size,
        batches: batches.len(),
        u: model.config.u,
        k: Summary::of(&ks),
        n: Summary::of(&ns),
        examples_per_sec: data.len() as f64 / total_time.max(f64::MIN_POSITIVE),
        latency_ms: Summary::of(&per_example),
        warmup_batches: warmup,
        note: "examples within a batch are processed sequentially; per-example latency is not expected to fall with batch size".into(),
    })
}
