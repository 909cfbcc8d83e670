//! Datasets and task construction: byte-level text with scaled one-hot
//! encoding, MNIST IDX parsing, and digit-sum sequences built from
//! horizontally concatenated MNIST images read column by column.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grad::{LossMask, Sequence};
use crate::math::{ActivationKind, SeededRng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("symbol index {index} out of range for alphabet of {size}")]
    SymbolOutOfRange { index: usize, size: usize },
    #[error("byte {0:#04x} is not in the alphabet")]
    UnknownByte(u8),
    #[error("sequence length {len} needs {needed} training symbols, training region has {available}")]
    WindowTooLong {
        len: usize,
        needed: usize,
        available: usize,
    },
    #[error("text windows need at least 2 symbols, got {0}")]
    WindowTooShort(usize),
    #[error("bad magic {0:#010x} (expected 0x00000803 images or 0x00000801 labels)")]
    BadMagic(u32),
    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("IDX dimensions overflow: {0:?}")]
    DimensionOverflow(Vec<u32>),
    #[error("label out of range: {value} at index {index}")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error("pixel out of range [0,1]: {value} at index {index}")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("expected an {expected} file, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("digit count must be at least 1")]
    ZeroDigits,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Distinct bytes of a corpus in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<u8>,
    index: [Option<u8>; 256],
}

impl Alphabet {
    pub fn build(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        Ok(Self::from_symbols((0..=255u8).filter(|&b| seen[b as usize]).collect()))
    }

    pub fn from_symbols(mut symbols: Vec<u8>) -> Self {
        symbols.sort_unstable();
        symbols.dedup();
        let mut index = [None; 256];
        for (i, &s) in symbols.iter().enumerate() {
            index[s as usize] = Some(i as u8);
        }
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn index_of(&self, byte: u8) -> Option<usize> {
        self.index[byte as usize].map(usize::from)
    }

    /// Value of the single non-zero input element: `ln(n) + 1`.
    pub fn encoding_value(&self) -> f64 {
        (self.len() as f64).ln() + 1.0
    }

    pub fn encode(&self, idx: usize) -> Result<Vec<f64>, DataError> {
        let mut v = vec![0.0; self.len()];
        self.encode_into(idx, &mut v)?;
        Ok(v)
    }

    pub fn encode_into(&self, idx: usize, out: &mut [f64]) -> Result<(), DataError> {
        if idx >= self.len() {
            return Err(DataError::SymbolOutOfRange {
                index: idx,
                size: self.len(),
            });
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        out[idx] = self.encoding_value();
        Ok(())
    }
}

pub fn build_alphabet(bytes: &[u8]) -> Result<Alphabet, DataError> {
    Alphabet::build(bytes)
}

pub fn encode_symbol(a: &Alphabet, idx: usize) -> Result<Vec<f64>, DataError> {
    a.encode(idx)
}

/// Symbol-index sequence split 95/5 into training and test regions.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub alphabet: Alphabet,
    symbols: Vec<u8>,
    split: usize,
}

pub const TRAIN_FRACTION: f64 = 0.95;

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let alphabet = Alphabet::build(bytes)?;
        Self::with_alphabet(bytes, alphabet)
    }

    /// Encodes `bytes` against an existing alphabet (e.g. from a checkpoint).
    pub fn with_alphabet(bytes: &[u8], alphabet: Alphabet) -> Result<Self, DataError> {
        if bytes.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let symbols = bytes
            .iter()
            .map(|&b| alphabet.index_of(b).map(|i| i as u8).ok_or(DataError::UnknownByte(b)))
            .collect::<Result<Vec<u8>, _>>()?;
        let split = (symbols.len() as f64 * TRAIN_FRACTION).floor() as usize;
        Ok(Self {
            alphabet,
            symbols,
            split,
        })
    }

    pub fn load(path: &Path, max_bytes: Option<usize>) -> Result<Self, DataError> {
        let mut bytes = read_file(path)?;
        if let Some(m) = max_bytes {
            bytes.truncate(m);
        }
        Self::from_bytes(&bytes)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn train(&self) -> &[u8] {
        &self.symbols[..self.split]
    }

    pub fn test(&self) -> &[u8] {
        &self.symbols[self.split..]
    }

    fn encode_window(&self, window: &[u8], noise_sd: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        let n = self.alphabet.len();
        let value = self.alphabet.encoding_value();
        window
            .iter()
            .map(|&s| {
                let mut v = vec![0.0; n];
                v[s as usize] = value;
                if noise_sd > 0.0 {
                    v.iter_mut().for_each(|e| *e += noise_sd * rng.gaussian());
                }
                v
            })
            .collect()
    }

    /// Encodes a symbol window without noise.
    pub fn encode_symbols(&self, window: &[u8]) -> Vec<Vec<f64>> {
        self.encode_window(window, 0.0, &mut SeededRng::new(0))
    }

    /// Start offset of a uniformly placed training window of `len` inputs
    /// (plus one target symbol past the end).
    pub fn sample_window_start(&self, len: usize, rng: &mut SeededRng) -> Result<usize, DataError> {
        if len < 2 {
            return Err(DataError::WindowTooShort(len));
        }
        let needed = len + 1;
        if needed > self.split {
            return Err(DataError::WindowTooLong {
                len,
                needed,
                available: self.split,
            });
        }
        Ok(rng.below(self.split - needed + 1))
    }

    /// Number of windows per epoch so one epoch covers the training region once.
    pub fn batches_per_epoch(&self, batch: usize, len: usize) -> usize {
        self.split.div_ceil(batch * len).max(1)
    }
}

/// `batch` independent training windows of `len` steps; the target at step t
/// is the symbol at t+1. Gaussian noise with standard deviation `noise_sd`
/// is added to the encoded inputs (0 disables it).
pub fn sample_text_batch(
    corpus: &Corpus,
    batch: usize,
    len: usize,
    noise_sd: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Sequence>, DataError> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        let start = corpus.sample_window_start(len, rng)?;
        let window = &corpus.symbols[start..start + len + 1];
        let inputs = corpus.encode_window(&window[..len], noise_sd, rng);
        out.push(Sequence {
            inputs,
            targets: window[1..].iter().map(|&s| s as usize).collect(),
            mask: LossMask::ones(len),
        });
    }
    Ok(out)
}

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxFile {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        /// Row-major per image, scaled to [0, 1].
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses a big-endian IDX image (magic 2051) or label (magic 2049) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile, DataError> {
    let magic = be_u32(bytes, 0)?;
    match magic {
        IMAGE_MAGIC => {
            let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?];
            let payload = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or_else(|| DataError::DimensionOverflow(dims.to_vec()))?;
            let expected = payload
                .checked_add(16)
                .ok_or_else(|| DataError::DimensionOverflow(dims.to_vec()))?;
            if bytes.len() < expected {
                return Err(DataError::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            Ok(IdxFile::Images {
                count: dims[0] as usize,
                rows: dims[1] as usize,
                cols: dims[2] as usize,
                pixels: bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect(),
            })
        }
        LABEL_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let expected = count + 8;
            if bytes.len() < expected {
                return Err(DataError::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            let labels = bytes[8..expected].to_vec();
            if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 9) {
                return Err(DataError::LabelOutOfRange { index, value });
            }
            Ok(IdxFile::Labels(labels))
        }
        other => Err(DataError::BadMagic(other)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Grayscale images in [0, 1] with digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet {
    pub rows: usize,
    pub cols: usize,
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl MnistSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self, DataError> {
        let images = pixels.len().checked_div(rows * cols).unwrap_or(0);
        if images != labels.len() || images * rows * cols != pixels.len() {
            return Err(DataError::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelOutOfRange { index, value });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v > 9) {
            return Err(DataError::LabelOutOfRange { index, value });
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn from_idx(images: IdxFile, labels: IdxFile) -> Result<Self, DataError> {
        let (rows, cols, pixels) = match images {
            IdxFile::Images {
                rows, cols, pixels, ..
            } => (rows, cols, pixels),
            IdxFile::Labels(_) => {
                return Err(DataError::WrongKind {
                    expected: "image",
                    found: "label",
                })
            }
        };
        let labels = match labels {
            IdxFile::Labels(l) => l,
            IdxFile::Images { .. } => {
                return Err(DataError::WrongKind {
                    expected: "label",
                    found: "image",
                })
            }
        };
        Self::new(rows, cols, pixels, labels)
    }

    /// Loads the standard file pair for `split` from `dir`.
    pub fn load(dir: &Path, split: MnistSplit) -> Result<Self, DataError> {
        let (img, lbl) = split.file_names();
        let images = parse_idx(&read_file(&dir.join(img))?)?;
        let labels = parse_idx(&read_file(&dir.join(lbl))?)?;
        Self::from_idx(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
}

/// Settings of the digit preprocessing pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    /// Standard-normal noise is multiplied by this before being added.
    pub noise_scale: f64,
    pub blur: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            noise_scale: 1e-5,
            blur: true,
        }
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Separable binomial `[1,2,1]/4` blur on both axes with reflected borders.
pub fn blur3(img: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const K: [f64; 3] = [0.25, 0.5, 0.25];
    let mut tmp = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = (0..3)
                .map(|k| K[k] * img[r * cols + reflect(c as isize + k as isize - 1, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (0..3)
                .map(|k| K[k] * tmp[reflect(r as isize + k as isize - 1, rows) * cols + c])
                .sum();
        }
    }
    out
}

/// Noise, blur, per-image mean subtraction, then LogAct, in that order.
pub fn preprocess_digit(img: &[f64], rows: usize, cols: usize, cfg: Preprocess, rng: &mut SeededRng) -> Vec<f64> {
    let mut v = img.to_vec();
    if cfg.noise_scale != 0.0 {
        v.iter_mut().for_each(|p| *p += cfg.noise_scale * rng.gaussian());
    }
    if cfg.blur {
        v = blur3(&v, rows, cols);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut()
        .for_each(|p| *p = ActivationKind::LogAct.apply(*p - mean));
    v
}

/// Decimal digits of the largest possible sum of `k` digits.
pub fn sum_digit_count(k: usize) -> usize {
    (9 * k).to_string().len()
}

/// One digit-sum sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboSequence {
    /// Column vectors: `cols·k` image columns then `P + 1` zero placeholders.
    pub columns: Vec<Vec<f64>>,
    /// Non-zero only on the final `P` steps.
    pub mask: LossMask,
    /// Decimal digits of the sum, most significant first, zero-padded to `P`.
    pub targets: Vec<usize>,
    pub sum: usize,
    pub labels: Vec<u8>,
}

impl ComboSequence {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Sum encoded by `targets`.
    pub fn decoded_sum(&self) -> usize {
        self.targets.iter().fold(0, |acc, &d| acc * 10 + d)
    }

    pub fn into_sequence(self) -> Sequence {
        let len = self.columns.len();
        let p = self.targets.len();
        let mut targets = vec![0; len];
        targets[len - p..].copy_from_slice(&self.targets);
        Sequence {
            inputs: self.columns,
            targets,
            mask: self.mask,
        }
    }
}

/// Builds a sample from the given image indices.
pub fn combo_from_indices(set: &MnistSet, indices: &[usize], cfg: Preprocess, rng: &mut SeededRng) -> Result<ComboSequence, DataError> {
    let k = indices.len();
    if k == 0 {
        return Err(DataError::ZeroDigits);
    }
    let (rows, cols) = (set.rows, set.cols);
    let p = sum_digit_count(k);
    let mut columns = Vec::with_capacity(cols * k + p + 1);
    let mut labels = Vec::with_capacity(k);
    for &i in indices {
        let img = preprocess_digit(set.image(i), rows, cols, cfg, rng);
        labels.push(set.label(i));
        for c in 0..cols {
            columns.push((0..rows).map(|r| img[r * cols + c]).collect());
        }
    }
    columns.extend(std::iter::repeat_n(vec![0.0; rows], p + 1));
    let sum: usize = labels.iter().map(|&l| l as usize).sum();
    let digits = format!("{sum:0p$}");
    let targets = digits.bytes().map(|b| (b - b'0') as usize).collect();
    let len = columns.len();
    Ok(ComboSequence {
        columns,
        mask: LossMask::tail(len, p),
        targets,
        sum,
        labels,
    })
}

/// `k` uniformly drawn images concatenated left to right.
pub fn make_combo_sequence(set: &MnistSet, k: usize, cfg: Preprocess, rng: &mut SeededRng) -> Result<ComboSequence, DataError> {
    if k == 0 {
        return Err(DataError::ZeroDigits);
    }
    let indices: Vec<usize> = (0..k).map(|_| rng.below(set.len())).collect();
    combo_from_indices(set, &indices, cfg, rng)
}
