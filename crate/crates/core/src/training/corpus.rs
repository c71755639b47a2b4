use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Batch;

use super::TrainPlan;

/// Vocabulary of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Validation(format!("token id {id} is not a byte")))
        })
        .collect()
}

/// Which disjoint slice of the validation split to sample from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeldOut {
    /// Validation loss during training.
    All,
    /// Phase-1 geometry measurement.
    Measurement,
    /// Phase-2 steering contexts.
    Steering,
}

/// A byte stream cut into fixed-size chunks, a seeded tenth of which is
/// held out. Training windows never cross a chunk boundary, so no byte of
/// a validation chunk is ever trained on.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sources: Vec<PathBuf>,
    tokens: Vec<usize>,
    train: Vec<Range<usize>>,
    valid: Vec<Range<usize>>,
}

impl Corpus {
    pub const DEFAULT_CHUNK: usize = 1024;
    pub const VALID_FRACTION: f64 = 0.1;

    pub fn from_bytes(bytes: &[u8], seed: u64, chunk: usize) -> Result<Self> {
        if chunk < 2 {
            return Err(Error::Validation(format!("chunk length {chunk} too small")));
        }
        let tokens = tokenize(bytes);
        let mut spans: Vec<Range<usize>> = (0..tokens.len())
            .step_by(chunk)
            .map(|s| s..(s + chunk).min(tokens.len()))
            .collect();
        let mut order: Vec<usize> = (0..spans.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de));
        let n_valid = if spans.len() >= 2 {
            ((spans.len() as f64 * Self::VALID_FRACTION).round() as usize).clamp(1, spans.len() - 1)
        } else {
            0
        };
        let mut is_valid = vec![false; spans.len()];
        for &i in &order[..n_valid] {
            is_valid[i] = true;
        }
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (i, s) in spans.drain(..).enumerate() {
            if is_valid[i] {
                valid.push(s);
            } else {
                train.push(s);
            }
        }
        Ok(Corpus {
            sources: Vec::new(),
            tokens,
            train,
            valid,
        })
    }

    pub fn from_files(paths: &[PathBuf], seed: u64, chunk: usize) -> Result<Self> {
        let mut bytes = Vec::new();
        for p in paths {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.clone()));
            }
            bytes.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        let mut c = Self::from_bytes(&bytes, seed, chunk)?;
        c.sources = paths.to_vec();
        Ok(c)
    }

    pub fn from_file(path: &Path, seed: u64) -> Result<Self> {
        Self::from_files(&[path.to_path_buf()], seed, Self::DEFAULT_CHUNK)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn train_spans(&self) -> &[Range<usize>] {
        &self.train
    }

    pub fn valid_spans(&self) -> &[Range<usize>] {
        &self.valid
    }

    pub fn held_out(&self, pool: HeldOut) -> Vec<Range<usize>> {
        self.valid
            .iter()
            .enumerate()
            .filter(|(i, _)| match pool {
                HeldOut::All => true,
                HeldOut::Measurement => i % 2 == 0,
                HeldOut::Steering => i % 2 == 1,
            })
            .map(|(_, s)| s.clone())
            .collect()
    }

    /// Windows of `len` tokens that fit inside a span, as start offsets.
    fn window_starts(spans: &[Range<usize>], len: usize) -> Vec<(usize, usize)> {
        spans
            .iter()
            .filter(|s| s.len() >= len)
            .map(|s| (s.start, s.len() - len + 1))
            .collect()
    }

    fn sample_window(starts: &[(usize, usize)], rng: &mut impl Rng) -> usize {
        let total: usize = starts.iter().map(|s| s.1).sum();
        let mut k = rng.random_range(0..total);
        for &(start, n) in starts {
            if k < n {
                return start + k;
            }
            k -= n;
        }
        unreachable!("k < total")
    }

    fn batch_from(&self, starts: &[(usize, usize)], n: usize, t: usize, rng: &mut impl Rng) -> Result<Batch> {
        let mut tokens = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let s = Self::sample_window(starts, rng);
            tokens.push(self.tokens[s..s + t].to_vec());
            targets.push(self.tokens[s + 1..s + t + 1].to_vec());
        }
        Batch::new(tokens, targets)
    }

    fn too_short(&self, what: &str, t: usize) -> Error {
        Error::Validation(format!(
            "corpus has no {what} chunk of at least context_length+1 = {} bytes ({} bytes total)",
            t + 1,
            self.len()
        ))
    }

    /// Training batch for `step`: a pure function of (corpus, seed, step).
    pub fn next_batch(&self, plan: &TrainPlan, context_length: usize, step: usize) -> Result<Batch> {
        if plan.steps > 0 && step >= plan.steps {
            return Err(Error::Contract(format!("step {step} beyond plan of {} steps", plan.steps)));
        }
        let starts = Self::window_starts(&self.train, context_length + 1);
        if starts.is_empty() {
            return Err(self.too_short("training", context_length));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(step as u64 + 1);
        self.batch_from(&starts, plan.batch_size, context_length, &mut rng)
    }

    /// Fixed held-out batches, seeded independently of training.
    pub fn held_out_batches(
        &self,
        pool: HeldOut,
        n_batches: usize,
        batch_size: usize,
        context_length: usize,
        seed: u64,
    ) -> Result<Vec<Batch>> {
        let starts = Self::window_starts(&self.held_out(pool), context_length + 1);
        if starts.is_empty() {
            return Err(self.too_short("held-out", context_length));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        (0..n_batches)
            .map(|_| self.batch_from(&starts, batch_size, context_length, &mut rng))
            .collect()
    }

    /// `n` uniformly drawn held-out windows of `len` tokens, each followed
    /// by the byte that comes next in the corpus.
    pub fn held_out_windows(&self, pool: HeldOut, n: usize, len: usize, seed: u64) -> Result<Vec<(Vec<usize>, usize)>> {
        let starts = Self::window_starts(&self.held_out(pool), len + 1);
        if starts.is_empty() {
            return Err(self.too_short("held-out", len));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Ok((0..n)
            .map(|_| {
                let s = Self::sample_window(&starts, &mut rng);
                (self.tokens[s..s + len].to_vec(), self.tokens[s + len])
            })
            .collect())
    }

    /// Every held-out window of `len` tokens whose next byte satisfies
    /// `pred`, in corpus order.
    pub fn held_out_windows_where(
        &self,
        pool: HeldOut,
        len: usize,
        pred: impl Fn(usize) -> bool,
    ) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for span in self.held_out(pool) {
            if span.len() < len + 1 {
                continue;
            }
            for s in span.start..span.end - len {
                if pred(self.tokens[s + len]) {
                    out.push(self.tokens[s..s + len].to_vec());
                }
            }
        }
        out
    }
}
