//! Byte-level task generators and the bundled default corpus.
//!
//! Three line formats teach the mechanisms the task sweeps later probe:
//!
//! ```text
//! rep kwbzqe|kwbzqe          induction: copy the block after '|'
//! set q=4; set q=9; get q=9  recency: the later binding wins
//! cap dorin Dorin            capitalization: repeat the word capitalized
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prose shipped with the crate.
pub const SAMPLE_TEXT: &str = include_str!("../../data/sample.txt");

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Induction,
    Recency,
    Capitalization,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Induction, Task::Recency, Task::Capitalization];

    pub fn name(self) -> &'static str {
        match self {
            Task::Induction => "induction",
            Task::Recency => "recency",
            Task::Capitalization => "capitalization",
        }
    }
}

/// A prompt whose next byte should be `correct`; `distractor` is the most
/// tempting wrong byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: Task,
    pub prompt: Vec<u8>,
    pub correct: u8,
    pub distractor: u8,
}

fn word(rng: &mut impl Rng) -> Vec<u8> {
    let syllables = rng.random_range(2..=3);
    let mut w = Vec::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    if rng.random_bool(0.5) {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
    }
    w
}

fn block(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.random_range(5..=8);
    (0..len).map(|_| rng.random_range(b'a'..=b'z')).collect()
}

fn digit_pair(rng: &mut impl Rng) -> (u8, u8) {
    let a = rng.random_range(b'0'..=b'9');
    let mut b = rng.random_range(b'0'..=b'9');
    while b == a {
        b = rng.random_range(b'0'..=b'9');
    }
    (a, b)
}

pub fn induction_line(rng: &mut impl Rng) -> Vec<u8> {
    let b = block(rng);
    [b"rep ".as_slice(), &b, b"|", &b, b"\n"].concat()
}

pub fn recency_line(rng: &mut impl Rng) -> Vec<u8> {
    let k = rng.random_range(b'a'..=b'z');
    let (old, new) = digit_pair(rng);
    format!(
        "set {k}={old}; set {k}={new}; get {k}={new}\n",
        k = k as char,
        old = old as char,
        new = new as char
    )
    .into_bytes()
}

pub fn capitalization_line(rng: &mut impl Rng) -> Vec<u8> {
    let w = word(rng);
    let mut cap = w.clone();
    cap[0] = cap[0].to_ascii_uppercase();
    [b"cap ".as_slice(), &w, b" ", &cap, b"\n"].concat()
}

/// One held-out probe for `task`.
pub fn task_instance(task: Task, rng: &mut impl Rng) -> TaskInstance {
    match task {
        Task::Induction => {
            let b = block(rng);
            let cut = rng.random_range(1..b.len());
            let mut prompt = [b"rep ".as_slice(), &b, b"|"].concat();
            prompt.extend_from_slice(&b[..cut]);
            let correct = b[cut];
            let mut distractor = rng.random_range(b'a'..=b'z');
            while distractor == correct {
                distractor = rng.random_range(b'a'..=b'z');
            }
            TaskInstance { task, prompt, correct, distractor }
        }
        Task::Recency => {
            let k = rng.random_range(b'a'..=b'z') as char;
            let (old, new) = digit_pair(rng);
            let prompt = format!("set {k}={}; set {k}={}; get {k}=", old as char, new as char);
            TaskInstance { task, prompt: prompt.into_bytes(), correct: new, distractor: old }
        }
        Task::Capitalization => {
            let w = word(rng);
            let prompt = [b"cap ".as_slice(), &w, b" "].concat();
            TaskInstance {
                task,
                prompt,
                correct: w[0].to_ascii_uppercase(),
                distractor: w[0],
            }
        }
    }
}

/// `n` distinct probes; fails when the generator cannot produce that many.
pub fn task_instances(task: Task, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<TaskInstance> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 100 * n.max(1) {
            return Err(Error::Config(format!(
                "{} generator exhausted after {} distinct prompts (wanted {n})",
                task.name(),
                out.len()
            )));
        }
        let inst = task_instance(task, &mut rng);
        if !out.iter().any(|o| o.prompt == inst.prompt) {
            out.push(inst);
        }
    }
    Ok(out)
}

/// The bundled training text: the prose sample repeated and interleaved
/// with `lines_per_task` synthetic lines of each kind, shuffled by `seed`.
pub fn default_corpus(seed: u64, lines_per_task: usize, prose_repeats: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units: Vec<Vec<u8>> = Vec::new();
    for _ in 0..prose_repeats {
        for para in SAMPLE_TEXT.split("\n\n").filter(|p| !p.trim().is_empty()) {
            units.push(format!("{}\n", para.trim_end()).into_bytes());
        }
    }
    for _ in 0..lines_per_task {
        units.push(induction_line(&mut rng));
        units.push(recency_line(&mut rng));
        units.push(capitalization_line(&mut rng));
    }
    units.shuffle(&mut rng);
    units.concat()
}
