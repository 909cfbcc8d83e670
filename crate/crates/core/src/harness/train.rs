//! Training loops and evaluation for the text and digit tasks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, Progress};
use super::config::{ExperimentConfig, Task};
use super::metrics::{MetricsRecord, MetricsWriter, RecordKind};
use super::HarnessError;
use crate::cells::{stack_infer, Network};
use crate::data::{
    combo_from_indices, make_combo_sequence, sample_text_batch, Corpus, DataError, MnistSet, MnistSplit,
    Preprocess,
};
use crate::grad::{bptt, Sequence};
use crate::math::SeededRng;
use crate::optim::{argmax, xent_loss, AdamState};

/// Seed of the digit test-set generator; independent of the training seed so
/// every run is scored on the same sequences.
pub const TEST_SET_SEED: u64 = 0x07e5_75e7;
/// Rows of an MNIST image, i.e. the width of each input column.
pub const MNIST_SIDE: usize = 28;

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

// epoch accumulator slots
const ACC_BATCHES: usize = 0;
const ACC_LOSS: usize = 1;
const ACC_METRIC: usize = 2;
const ACC_CELL: usize = 3;
const ACC_CELL_PEN: usize = 4;
const ACC_WEIGHT_PEN: usize = 5;
const ACC_LEN: usize = 6;

enum TaskData {
    Text(Corpus),
    Digits { train: MnistSet, test: MnistSet },
}

fn load_task_data(cfg: &ExperimentConfig) -> Result<TaskData, HarnessError> {
    match cfg.task {
        Task::Text => {
            let path = cfg.corpus_path.as_ref().expect("validated");
            Ok(TaskData::Text(Corpus::load(path, cfg.corpus_bytes)?))
        }
        Task::Combo | Task::Digit => {
            let dir = cfg.mnist_dir.as_ref().expect("validated");
            let train = MnistSet::load(dir, MnistSplit::Train)?;
            let test = MnistSet::load(dir, MnistSplit::Test)?;
            for set in [&train, &test] {
                if set.rows != MNIST_SIDE || set.cols != MNIST_SIDE {
                    return Err(HarnessError::Shape(format!(
                        "images are {}x{}, network expects {MNIST_SIDE}x{MNIST_SIDE}",
                        set.rows, set.cols
                    )));
                }
            }
            Ok(TaskData::Digits { train, test })
        }
    }
}

/// Score of a digit-task evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DigitScore {
    /// Sequences whose every sum digit was predicted correctly.
    pub correct: usize,
    pub total: usize,
    pub digits_correct: usize,
    pub digits_total: usize,
    pub nats: f64,
}

/// Test sequence `i`: for one digit, the `i`-th test image; otherwise `k`
/// images drawn with a generator keyed on `i`.
pub fn digit_test_sequence(set: &MnistSet, i: usize, k: usize, pre: Preprocess) -> Result<Sequence, DataError> {
    let mut rng = SeededRng::with_stream(TEST_SET_SEED, i as u64);
    let combo = if k == 1 {
        combo_from_indices(set, &[i % set.len()], pre, &mut rng)?
    } else {
        make_combo_sequence(set, k, pre, &mut rng)?
    };
    Ok(combo.into_sequence())
}

pub fn score_digits(net: &Network, set: &MnistSet, k: usize, count: usize, pre: Preprocess) -> Result<DigitScore, HarnessError> {
    let mut score = DigitScore::default();
    for i in 0..count {
        let seq = digit_test_sequence(set, i, k, pre)?;
        let mut all = true;
        stack_infer(net, &seq.inputs, |t, logits| {
            if seq.mask.0[t] != 0.0 {
                let ok = argmax(logits) == seq.targets[t];
                score.digits_total += 1;
                score.digits_correct += ok as usize;
                score.nats += xent_loss(logits, seq.targets[t]);
                all &= ok;
            }
        })?;
        score.correct += all as usize;
        score.total += 1;
    }
    Ok(score)
}

/// Bits per character over the held-out region, read in consecutive chunks
/// of `chunk` predictions, each starting from a zero state.
pub fn text_test_bpc(net: &Network, corpus: &Corpus, chunk: usize) -> Result<(f64, usize), HarnessError> {
    let test = corpus.test();
    let mut nats = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 1 < test.len() {
        let end = (start + chunk + 1).min(test.len());
        let window = &test[start..end];
        let inputs = corpus.encode_symbols(&window[..window.len() - 1]);
        stack_infer(net, &inputs, |t, logits| {
            nats += xent_loss(logits, window[t + 1] as usize);
        })?;
        count += window.len() - 1;
        start = end - 1;
    }
    Ok((crate::optim::bpc(nats, count)?, count))
}

/// Dataset handed to [`evaluate`].
pub enum EvalData {
    /// Raw corpus bytes; the held-out 5% is scored.
    Text(Vec<u8>),
    /// MNIST test split.
    Digits(MnistSet),
}

/// Deterministic, read-only evaluation of a checkpoint.
pub fn evaluate(ck: &Checkpoint, data: &EvalData) -> Result<MetricsRecord, HarnessError> {
    let cfg = &ck.config;
    let mut rec = MetricsRecord::new(RecordKind::Epoch, ck.progress.step, ck.progress.epoch);
    match (cfg.task, data) {
        (Task::Text, EvalData::Text(bytes)) => {
            let corpus = Corpus::from_bytes(bytes)?;
            let ours = ck.alphabet().map(|a| a.len()).unwrap_or(0);
            if corpus.alphabet.symbols() != ck.alphabet.as_slice() {
                return Err(HarnessError::Shape(format!(
                    "vocabulary mismatch: checkpoint has {ours} symbols, corpus has {}",
                    corpus.alphabet.len()
                )));
            }
            let (bpc, _) = text_test_bpc(&ck.net, &corpus, cfg.main_len)?;
            rec.test_metric = Some(bpc);
        }
        (Task::Combo | Task::Digit, EvalData::Digits(set)) => {
            let expected = ck.net.spec.input_width;
            if set.rows != expected {
                return Err(HarnessError::Shape(format!(
                    "input width mismatch: network expects {expected}, dataset columns have {}",
                    set.rows
                )));
            }
            let score = score_digits(&ck.net, set, cfg.digit_count(), cfg.test_samples, cfg.preprocess())?;
            rec.test_metric = Some(score.correct as f64);
            rec.train_loss = Some(score.nats / score.digits_total.max(1) as f64);
        }
        (task, _) => {
            return Err(HarnessError::Config(format!(
                "checkpoint was trained on the {} task; dataset kind does not match",
                task.name()
            )))
        }
    }
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Finished,
    /// Stopped early at the requested step; a checkpoint was written.
    Stopped { step: u64 },
}

pub struct Trainer {
    cfg: ExperimentConfig,
    data: TaskData,
    alphabet: Vec<u8>,
    net: Network,
    adam: AdamState,
    rng: SeededRng,
    step: u64,
    epoch: u64,
    step_in_epoch: u64,
    ema: Option<(f64, f64)>,
    acc: Vec<f64>,
    metrics: MetricsWriter,
    out_dir: PathBuf,
    started: Instant,
    pub verbose: bool,
}

impl Trainer {
    /// Fresh run: validates the config, loads data, initializes parameters and
    /// writes the config echo and an empty metrics file.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let data = load_task_data(&cfg)?;
        let (alphabet, input, output) = match &data {
            TaskData::Text(c) => (c.alphabet.symbols().to_vec(), c.alphabet.len(), c.alphabet.len()),
            TaskData::Digits { .. } => (Vec::new(), MNIST_SIDE, 10),
        };
        let mut init_rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
        let net = Network::init(&cfg.network_spec(input, output), &mut init_rng)?;
        let adam = AdamState::new(cfg.adam(), &net);
        let out_dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| HarnessError::io(&out_dir, e))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| HarnessError::io(&cfg_path, e))?;
        let metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
        Ok(Self {
            rng: SeededRng::with_stream(cfg.seed, DATA_STREAM),
            cfg,
            data,
            alphabet,
            net,
            adam,
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
            ema: None,
            acc: vec![0.0; ACC_LEN],
            metrics,
            out_dir,
            started: Instant::now(),
            verbose: false,
        })
    }

    /// Continues from a checkpoint, writing into the checkpoint's directory.
    pub fn resume(path: &Path) -> Result<Self, HarnessError> {
        let ck = Checkpoint::load(path)?;
        let out_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_checkpoint(ck, out_dir)
    }

    pub fn from_checkpoint(ck: Checkpoint, out_dir: PathBuf) -> Result<Self, HarnessError> {
        ck.config.validate()?;
        let data = load_task_data(&ck.config)?;
        if let TaskData::Text(c) = &data {
            if c.alphabet.symbols() != ck.alphabet.as_slice() {
                return Err(HarnessError::Shape(format!(
                    "vocabulary mismatch: checkpoint has {} symbols, corpus has {}",
                    ck.alphabet.len(),
                    c.alphabet.len()
                )));
            }
        }
        let metrics = MetricsWriter::resume(&out_dir.join(METRICS_FILE), ck.progress.metric_rows)?;
        let mut acc = ck.progress.accumulators.clone();
        acc.resize(ACC_LEN, 0.0);
        Ok(Self {
            rng: SeededRng::from_state(ck.progress.rng),
            data,
            alphabet: ck.alphabet,
            net: ck.net,
            adam: ck.adam,
            step: ck.progress.step,
            epoch: ck.progress.epoch,
            step_in_epoch: ck.progress.step_in_epoch,
            ema: ck.progress.ema,
            acc,
            metrics,
            out_dir,
            started: Instant::now(),
            verbose: false,
            cfg: ck.config,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn output_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            alphabet: self.alphabet.clone(),
            net: self.net.clone(),
            adam: self.adam.clone(),
            progress: Progress {
                step: self.step,
                epoch: self.epoch,
                step_in_epoch: self.step_in_epoch,
                metric_rows: self.metrics.rows(),
                ema: self.ema,
                accumulators: self.acc.clone(),
                rng: self.rng.state(),
            },
        }
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf, HarnessError> {
        let path = self.out_dir.join(CHECKPOINT_FILE);
        self.checkpoint().save(&path)?;
        Ok(path)
    }

    /// Sequence length and input noise for epoch `epoch` of the text task.
    fn text_schedule(&self, epoch: u64) -> (usize, f64) {
        if epoch == 0 && self.cfg.pretrain_len > 0 {
            (self.cfg.pretrain_len, self.cfg.pretrain_noise)
        } else {
            (self.cfg.main_len, 0.0)
        }
    }

    pub fn batches_in_epoch(&self, epoch: u64) -> u64 {
        match &self.data {
            TaskData::Text(c) => c.batches_per_epoch(self.cfg.batch_size, self.text_schedule(epoch).0) as u64,
            TaskData::Digits { .. } => self.cfg.train_samples.div_ceil(self.cfg.batch_size) as u64,
        }
    }

    fn sample_batch(&mut self) -> Result<Vec<Sequence>, HarnessError> {
        let (len, noise) = self.text_schedule(self.epoch);
        match &self.data {
            TaskData::Text(c) => Ok(sample_text_batch(c, self.cfg.batch_size, len, noise, &mut self.rng)?),
            TaskData::Digits { train, .. } => (0..self.cfg.batch_size)
                .map(|_| {
                    make_combo_sequence(train, self.cfg.digit_count(), self.cfg.preprocess(), &mut self.rng)
                        .map(|c| c.into_sequence())
                        .map_err(HarnessError::from)
                })
                .collect(),
        }
    }

    /// Test metric: BPC for text, fully correct sequences for digits.
    pub fn test_metric(&self) -> Result<f64, HarnessError> {
        match &self.data {
            TaskData::Text(c) => Ok(text_test_bpc(&self.net, c, self.cfg.main_len)?.0),
            TaskData::Digits { test, .. } => {
                let n = self.cfg.test_samples;
                Ok(score_digits(&self.net, test, self.cfg.digit_count(), n, self.cfg.preprocess())?.correct as f64)
            }
        }
    }

    fn is_text(&self) -> bool {
        matches!(self.data, TaskData::Text(_))
    }

    fn emit(&mut self, mut rec: MetricsRecord) -> Result<(), HarnessError> {
        rec.wall_time = self.started.elapsed().as_secs_f64();
        if self.verbose {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "[{:>8.1}s] {:?} step {} epoch {} loss {} train {} test {} |c| {}",
                rec.wall_time,
                rec.kind,
                rec.step,
                rec.epoch,
                f(rec.train_loss),
                f(rec.train_metric),
                f(rec.test_metric),
                f(rec.mean_abs_cell)
            );
        }
        self.metrics.write(&rec)
    }

    /// Trains until all epochs are done, or until global step `stop_at`.
    pub fn run(&mut self, stop_at: Option<u64>) -> Result<RunOutcome, HarnessError> {
        if self.step == 0 && self.metrics.rows() == 0 && self.cfg.eval_at_start {
            let mut rec = MetricsRecord::new(RecordKind::Init, 0, 0);
            rec.test_metric = Some(self.test_metric()?);
            self.emit(rec)?;
        }
        let reg = self.cfg.reg();
        while self.epoch < self.cfg.epochs as u64 {
            let batches = self.batches_in_epoch(self.epoch);
            while self.step_in_epoch < batches {
                if stop_at.is_some_and(|s| self.step >= s) {
                    self.save_checkpoint()?;
                    return Ok(RunOutcome::Stopped { step: self.step });
                }
                let batch = self.sample_batch()?;
                let (loss, grads) = bptt(&self.net, &batch, reg)?;
                let update = if loss.total.is_finite() {
                    self.adam.step(&mut self.net, &grads.params).map_err(|e| e.to_string())
                } else {
                    Err(format!("non-finite loss {}", loss.total))
                };
                if let Err(detail) = update {
                    let path = self.save_checkpoint()?;
                    return Err(HarnessError::Diverged {
                        step: self.step,
                        detail,
                        checkpoint: path.display().to_string(),
                    });
                }
                self.step += 1;
                self.step_in_epoch += 1;

                let metric = if self.is_text() {
                    loss.task / std::f64::consts::LN_2
                } else {
                    loss.correct_sequences as f64 / batch.len() as f64
                };
                let beta = self.cfg.ema;
                self.ema = Some(match self.ema {
                    None => (loss.task, metric),
                    Some((l, m)) => (beta * l + (1.0 - beta) * loss.task, beta * m + (1.0 - beta) * metric),
                });
                self.acc[ACC_BATCHES] += 1.0;
                self.acc[ACC_LOSS] += loss.task;
                self.acc[ACC_METRIC] += metric;
                self.acc[ACC_CELL] += loss.mean_abs_cell;
                self.acc[ACC_CELL_PEN] += loss.cell_penalty;
                self.acc[ACC_WEIGHT_PEN] += loss.weight_penalty;

                if self.step.is_multiple_of(self.cfg.log_every) {
                    let (l, m) = self.ema.expect("set above");
                    let mut rec = MetricsRecord::new(RecordKind::Train, self.step, self.epoch);
                    rec.train_loss = Some(l);
                    rec.train_metric = Some(m);
                    rec.mean_abs_cell = Some(loss.mean_abs_cell);
                    rec.cell_penalty = Some(loss.cell_penalty);
                    rec.weight_penalty = Some(loss.weight_penalty);
                    self.emit(rec)?;
                }
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save_checkpoint()?;
                }
            }

            let n = self.acc[ACC_BATCHES].max(1.0);
            let mut rec = MetricsRecord::new(RecordKind::Epoch, self.step, self.epoch + 1);
            rec.train_loss = Some(self.acc[ACC_LOSS] / n);
            rec.train_metric = Some(self.acc[ACC_METRIC] / n);
            rec.mean_abs_cell = Some(self.acc[ACC_CELL] / n);
            rec.cell_penalty = Some(self.acc[ACC_CELL_PEN] / n);
            rec.weight_penalty = Some(self.acc[ACC_WEIGHT_PEN] / n);
            rec.test_metric = Some(self.test_metric()?);
            self.emit(rec)?;
            self.epoch += 1;
            self.step_in_epoch = 0;
            self.acc = vec![0.0; ACC_LEN];
            self.save_checkpoint()?;
        }
        Ok(RunOutcome::Finished)
    }
}
