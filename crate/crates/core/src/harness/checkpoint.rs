//! Versioned binary checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic "LSTWMCKP" | version u32 | config digest u64
//! config text (u32 length + UTF-8) | alphabet (u32 length + bytes)
//! progress: step u64, epoch u64, step_in_epoch u64, metric rows u64
//! running averages: flag u8, loss f64, metric f64
//! epoch accumulators: u32 count + f64 each
//! data rng: seed [u8; 32], stream u64, word position u128
//! adam: t u64
//! tensors: u32 count, then per tensor: u32 name length + name, u64 length, f64 values
//! ```
//!
//! Tensor names are `param/<name>`, `adam.m/<name>` and `adam.v/<name>` in
//! the network's fixed tensor order.

use std::path::Path;

use super::config::{ExperimentConfig, Task};
use super::HarnessError;
use crate::cells::Network;
use crate::data::Alphabet;
use crate::math::RngState;
use crate::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"LSTWMCKP";
pub const VERSION: u32 = 1;

/// Training progress beyond the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    pub step_in_epoch: u64,
    /// Rows already written to the metrics file.
    pub metric_rows: u64,
    pub ema: Option<(f64, f64)>,
    pub accumulators: Vec<f64>,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Text tasks only; empty otherwise.
    pub alphabet: Vec<u8>,
    pub net: Network,
    pub adam: AdamState,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn input_output_widths(config: &ExperimentConfig, alphabet: &[u8]) -> (usize, usize) {
        match config.task {
            Task::Text => (alphabet.len(), alphabet.len()),
            Task::Combo | Task::Digit => (28, 10),
        }
    }

    pub fn alphabet(&self) -> Option<Alphabet> {
        (!self.alphabet.is_empty()).then(|| Alphabet::from_symbols(self.alphabet.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&VERSION.to_le_bytes());
        w.extend_from_slice(&self.config.digest().to_le_bytes());
        put_bytes(&mut w, self.config.to_text().as_bytes());
        put_bytes(&mut w, &self.alphabet);

        let p = &self.progress;
        for v in [p.step, p.epoch, p.step_in_epoch, p.metric_rows] {
            w.extend_from_slice(&v.to_le_bytes());
        }
        let (flag, (a, b)) = match p.ema {
            Some(e) => (1u8, e),
            None => (0u8, (0.0, 0.0)),
        };
        w.push(flag);
        w.extend_from_slice(&a.to_le_bytes());
        w.extend_from_slice(&b.to_le_bytes());
        w.extend_from_slice(&(p.accumulators.len() as u32).to_le_bytes());
        for v in &p.accumulators {
            w.extend_from_slice(&v.to_le_bytes());
        }
        w.extend_from_slice(&p.rng.seed);
        w.extend_from_slice(&p.rng.stream.to_le_bytes());
        w.extend_from_slice(&p.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&self.adam.t.to_le_bytes());

        let tensors = self.net.tensors();
        w.extend_from_slice(&((tensors.len() * 3) as u32).to_le_bytes());
        for (prefix, values) in tensors
            .iter()
            .map(|t| ("param", t.values))
            .chain(self.adam.m.iter().map(|m| ("adam.m", m.as_slice())))
            .chain(self.adam.v.iter().map(|v| ("adam.v", v.as_slice())))
            .zip(tensors.iter().cycle())
            .map(|((prefix, values), t)| (format!("{prefix}/{}", t.name), values))
        {
            put_bytes(&mut w, prefix.as_bytes());
            w.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(HarnessError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let digest = r.u64()?;
        let text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("config text is not UTF-8".into()))?;
        let config = ExperimentConfig::parse(&text)?;
        if config.digest() != digest {
            return Err(HarnessError::Checkpoint("config digest mismatch".into()));
        }
        let alphabet = r.bytes()?.to_vec();

        let step = r.u64()?;
        let epoch = r.u64()?;
        let step_in_epoch = r.u64()?;
        let metric_rows = r.u64()?;
        let flag = r.take(1)?[0];
        let (a, b) = (r.f64()?, r.f64()?);
        let n_acc = r.u32()? as usize;
        let accumulators = (0..n_acc).map(|_| r.f64()).collect::<Result<_, _>>()?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let t = r.u64()?;

        let (input, output) = Self::input_output_widths(&config, &alphabet);
        let mut net = Network::zeros(&config.network_spec(input, output))?;
        let mut adam = AdamState::new(config.adam(), &net);
        adam.t = t;
        let count = r.u32()? as usize;
        let names: Vec<(String, usize)> = net.tensors().iter().map(|t| (t.name.clone(), t.values.len())).collect();
        if count != names.len() * 3 {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint holds {count} tensors, network expects {}",
                names.len() * 3
            )));
        }
        let mut params = net.tensors_mut();
        for slot in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| HarnessError::Checkpoint("tensor name is not UTF-8".into()))?;
            let len = r.u64()? as usize;
            let (expected_name, expected_len) = &names[slot % names.len()];
            let prefix = ["param", "adam.m", "adam.v"][slot / names.len()];
            if name != format!("{prefix}/{expected_name}") || len != *expected_len {
                return Err(HarnessError::Shape(format!(
                    "tensor {name} has {len} values, network expects {prefix}/{expected_name} with {expected_len}"
                )));
            }
            let dest: &mut [f64] = match prefix {
                "param" => params[slot % names.len()].values,
                "adam.m" => &mut adam.m[slot % names.len()],
                _ => &mut adam.v[slot % names.len()],
            };
            for d in dest.iter_mut() {
                *d = r.f64()?;
            }
        }
        drop(params);
        if r.at != bytes.len() {
            return Err(HarnessError::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            config,
            alphabet,
            net,
            adam,
            progress: Progress {
                step,
                epoch,
                step_in_epoch,
                metric_rows,
                ema: (flag == 1).then_some((a, b)),
                accumulators,
                rng: RngState {
                    seed,
                    stream,
                    word_pos,
                },
            },
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u32).to_le_bytes());
    w.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            HarnessError::Checkpoint(format!("truncated checkpoint at byte {}", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], HarnessError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
