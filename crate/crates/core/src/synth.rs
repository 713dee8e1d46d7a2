//! Synthetic parallel task corpora in toy languages.
//!
//! Token layout: digits `0..=9`, the shared symbols `+ = < > ? ;`, a
//! beginning-of-sequence token, then one block of word tokens per language and
//! finally the end token. Languages share digits and symbols and differ only in
//! their word tokens, so every prompt has an exact token-wise translation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::TaxonomyLabel;

pub const PLUS: u32 = 10;
pub const EQUALS: u32 = 11;
pub const LESS: u32 = 12;
pub const GREATER: u32 = 13;
pub const QUERY: u32 = 14;
pub const SEP: u32 = 15;
pub const BOS: u32 = 16;
pub const FIRST_WORD: u32 = 17;

/// Canonical words reserved for task instructions, per task kind.
const INSTRUCTION_POOL: u32 = 4;
const TEMPLATE_LEN: usize = 3;

pub fn is_digit(t: u32) -> bool {
    t < 10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_langs: usize,
    pub n_words: usize,
}

impl VocabLayout {
    pub fn vocab_size(&self) -> usize {
        FIRST_WORD as usize + self.n_langs * self.n_words + 1
    }

    pub fn eos(&self) -> u32 {
        (self.vocab_size() - 1) as u32
    }

    /// Number of canonical words available for general text.
    pub fn n_general_words(&self) -> usize {
        self.n_words.saturating_sub(3 * INSTRUCTION_POOL as usize)
    }
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self {
            n_langs: 2,
            n_words: 39,
        }
    }
}

/// A canonical (language-independent) token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Canon {
    Sym(u32),
    Word(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    /// Word tokens of this language, ascending.
    pub token_alphabet: Vec<u32>,
    pub answer_marker: u32,
    /// `bijection[w]` is this language's token for canonical word `w`.
    pub bijection: Vec<u32>,
}

impl LanguageSpec {
    /// `n_langs` languages with disjoint word blocks and seeded word orders.
    pub fn standard_set(layout: VocabLayout, seed: u64) -> Vec<LanguageSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a9e);
        (0..layout.n_langs)
            .map(|i| {
                let start = FIRST_WORD + (i * layout.n_words) as u32;
                let token_alphabet: Vec<u32> = (start..start + layout.n_words as u32).collect();
                let mut bijection = token_alphabet.clone();
                bijection.shuffle(&mut rng);
                LanguageSpec {
                    name: format!("lang{i}"),
                    token_alphabet,
                    answer_marker: SEP,
                    bijection,
                }
            })
            .collect()
    }

    pub fn encode_word(&self, w: u32) -> Result<u32> {
        self.bijection
            .get(w as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("canonical word {w} not in {}", self.name)))
    }

    pub fn encode(&self, canon: &[Canon]) -> Result<Vec<u32>> {
        canon
            .iter()
            .map(|c| match *c {
                Canon::Sym(s) => Ok(s),
                Canon::Word(w) => self.encode_word(w),
            })
            .collect()
    }

    pub fn decode_token(&self, t: u32) -> Result<Canon> {
        if t < FIRST_WORD {
            return Ok(Canon::Sym(t));
        }
        self.bijection
            .iter()
            .position(|&b| b == t)
            .map(|w| Canon::Word(w as u32))
            .ok_or_else(|| Error::Input(format!("token {t} is not mapped in {}", self.name)))
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<Canon>> {
        tokens.iter().map(|&t| self.decode_token(t)).collect()
    }

    fn validate(&self) -> Result<()> {
        let set: BTreeSet<u32> = self.bijection.iter().copied().collect();
        if set.len() != self.bijection.len() {
            return Err(Error::Config(format!(
                "{}: bijection is not injective",
                self.name
            )));
        }
        let alpha: BTreeSet<u32> = self.token_alphabet.iter().copied().collect();
        if set != alpha {
            return Err(Error::Config(format!(
                "{}: bijection image differs from alphabet",
                self.name
            )));
        }
        if alpha.iter().any(|&t| t < FIRST_WORD) {
            return Err(Error::Config(format!(
                "{}: alphabet overlaps shared symbols",
                self.name
            )));
        }
        Ok(())
    }
}

/// Token-wise translation of a sequence written in `from` into `to`.
pub fn translate(tokens: &[u32], from: &LanguageSpec, to: &LanguageSpec) -> Result<Vec<u32>> {
    to.encode(&from.decode(tokens)?)
}

pub fn validate_languages(langs: &[LanguageSpec]) -> Result<()> {
    if langs.len() < 2 {
        return Err(Error::Config("at least two languages are required".into()));
    }
    for l in langs {
        l.validate()?;
    }
    for (i, a) in langs.iter().enumerate() {
        for b in &langs[i + 1..] {
            if a.bijection.len() != b.bijection.len() {
                return Err(Error::Config(format!(
                    "{} and {} have different word counts",
                    a.name, b.name
                )));
            }
            if a.token_alphabet
                .iter()
                .any(|t| b.token_alphabet.contains(t))
            {
                return Err(Error::Config(format!(
                    "alphabets of {} and {} overlap",
                    a.name, b.name
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ModularAddition,
    SequenceCopy,
    Comparison,
}

impl TaskKind {
    fn pool_offset(self) -> u32 {
        match self {
            TaskKind::ModularAddition => 0,
            TaskKind::SequenceCopy => INSTRUCTION_POOL,
            TaskKind::Comparison => 2 * INSTRUCTION_POOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub task: TaskKind,
    pub n_pretrain_src: usize,
    /// Target-language pretraining size, per target language.
    pub n_pretrain_tgt: usize,
    pub n_task: usize,
    pub n_eval: usize,
    /// Held-out source-language general sentences (the general corpus for
    /// task-specificity scoring).
    pub n_general_eval: usize,
    pub modulus: u32,
    /// Fraction of source pretraining examples that are task examples.
    pub task_fraction: f64,
    /// Same for target-language pretraining. Low values model a language
    /// that is seen mostly in general text.
    pub task_fraction_tgt: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ModularAddition,
            n_pretrain_src: 20000,
            n_pretrain_tgt: 2000,
            n_task: 2000,
            n_eval: 500,
            n_general_eval: 500,
            modulus: 13,
            task_fraction: 0.5,
            task_fraction_tgt: 0.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.n_pretrain_src == 0
            || self.n_task == 0
            || self.n_eval == 0
            || self.n_general_eval == 0
        {
            return Err(Error::Config("corpus counts must be at least 1".into()));
        }
        if self.modulus < 2 {
            return Err(Error::Config("modulus must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.task_fraction)
            || !(0.0..=1.0).contains(&self.task_fraction_tgt)
        {
            return Err(Error::Config("task fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: String,
    pub prompt_src: Vec<u32>,
    pub prompt_tgt: Vec<u32>,
    pub gold_answer: Vec<u32>,
    /// Reference response (worked step, marker, answer, end token); identical in
    /// both languages because digits and symbols are shared.
    pub gold_response: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_src: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_tgt: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<TaxonomyLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_src: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_tgt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSeq {
    /// Index into the language list.
    pub lang: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub layout: VocabLayout,
    pub pretrain: Vec<PretrainSeq>,
    pub task_parallel: Vec<ParallelExample>,
    pub eval_parallel: Vec<ParallelExample>,
    /// Source-language general text, disjoint from pretraining draws.
    pub general: Vec<Vec<u32>>,
}

/// One task instance in canonical form.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct TaskKey {
    template: Vec<u32>,
    operands: Vec<u32>,
}

fn digits(n: u32) -> Vec<u32> {
    n.to_string().bytes().map(|b| (b - b'0') as u32).collect()
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    layout: VocabLayout,
    rng: ChaCha8Rng,
    successors: Vec<[u32; 3]>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a CorpusConfig, layout: VocabLayout) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g = layout.n_general_words() as u32;
        let successors = (0..g)
            .map(|_| {
                [
                    rng.random_range(0..g),
                    rng.random_range(0..g),
                    rng.random_range(0..g),
                ]
            })
            .collect();
        Self {
            cfg,
            layout,
            rng,
            successors,
        }
    }

    fn general_base(&self) -> u32 {
        3 * INSTRUCTION_POOL
    }

    fn sentence(&mut self) -> Vec<Canon> {
        let len = self.rng.random_range(6..=10);
        let g = self.layout.n_general_words() as u32;
        let mut w = self.rng.random_range(0..g);
        let mut out = vec![Canon::Sym(BOS)];
        for _ in 0..len {
            out.push(Canon::Word(self.general_base() + w));
            w = self.successors[w as usize][self.rng.random_range(0..3)];
        }
        out
    }

    fn random_key(&mut self) -> TaskKey {
        let mut pool: Vec<u32> = (0..INSTRUCTION_POOL).collect();
        pool.shuffle(&mut self.rng);
        let template = pool[..TEMPLATE_LEN].to_vec();
        let m = self.cfg.modulus;
        let operands = match self.cfg.task {
            TaskKind::ModularAddition | TaskKind::Comparison => {
                vec![self.rng.random_range(0..m), self.rng.random_range(0..m)]
            }
            TaskKind::SequenceCopy => {
                let len = self.rng.random_range(3..=5);
                (0..len).map(|_| self.rng.random_range(0..10)).collect()
            }
        };
        TaskKey { template, operands }
    }

    fn capacity(&self) -> Option<usize> {
        let templates = 24usize;
        match self.cfg.task {
            TaskKind::ModularAddition | TaskKind::Comparison => {
                Some(templates * (self.cfg.modulus as usize).pow(2))
            }
            TaskKind::SequenceCopy => None,
        }
    }

    /// Canonical prompt, answer and response of one task instance.
    fn render(&self, key: &TaskKey) -> (Vec<Canon>, Vec<u32>, Vec<u32>) {
        let eos = self.layout.eos();
        let mut prompt = vec![Canon::Sym(BOS)];
        let off = self.cfg.task.pool_offset();
        prompt.extend(key.template.iter().map(|&w| Canon::Word(off + w)));
        let sym = |v: Vec<u32>| v.into_iter().map(Canon::Sym).collect::<Vec<_>>();
        let (answer, mut response) = match self.cfg.task {
            TaskKind::ModularAddition => {
                let (a, b) = (key.operands[0], key.operands[1]);
                prompt.extend(sym(digits(a)));
                prompt.push(Canon::Sym(PLUS));
                prompt.extend(sym(digits(b)));
                let ans = digits((a + b) % self.cfg.modulus);
                let mut resp = digits(a + b);
                resp.push(SEP);
                resp.extend(&ans);
                (ans, resp)
            }
            TaskKind::Comparison => {
                let (a, b) = (key.operands[0], key.operands[1]);
                prompt.extend(sym(digits(a)));
                prompt.push(Canon::Sym(LESS));
                prompt.extend(sym(digits(b)));
                prompt.push(Canon::Sym(QUERY));
                let ans = vec![u32::from(a < b)];
                let mut resp = vec![SEP];
                resp.extend(&ans);
                (ans, resp)
            }
            TaskKind::SequenceCopy => {
                prompt.extend(sym(key.operands.clone()));
                let mut resp = vec![SEP];
                resp.extend(&key.operands);
                (key.operands.clone(), resp)
            }
        };
        prompt.push(Canon::Sym(EQUALS));
        response.push(eos);
        (prompt, answer, response)
    }

    fn distinct_keys(&mut self, n: usize, exclude: &BTreeSet<TaskKey>) -> Vec<TaskKey> {
        let mut seen = exclude.clone();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let k = self.random_key();
            if seen.insert(k.clone()) {
                out.push(k);
            }
        }
        out
    }
}

/// Generates pretraining text, the parallel task split and the held-out
/// parallel eval split. `langs[0]` is the source language and `langs[1]` the
/// target of the parallel splits; further languages receive pretraining text.
pub fn gen_corpus(config: &CorpusConfig, langs: &[LanguageSpec]) -> Result<Corpus> {
    config.validate()?;
    validate_languages(langs)?;
    let layout = VocabLayout {
        n_langs: langs.len(),
        n_words: langs[0].bijection.len(),
    };
    if layout.n_general_words() == 0 {
        return Err(Error::Config("not enough words for general text".into()));
    }
    let mut gen = Generator::new(config, layout);
    if let Some(cap) = gen.capacity() {
        if config.n_task + config.n_eval > cap {
            return Err(Error::Config(format!(
                "{} task + {} eval prompts exceed the {cap} distinct prompts available",
                config.n_task, config.n_eval
            )));
        }
    }

    let keys = gen.distinct_keys(config.n_task + config.n_eval, &BTreeSet::new());
    let (task_keys, eval_keys) = keys.split_at(config.n_task);
    let eval_set: BTreeSet<TaskKey> = eval_keys.iter().cloned().collect();

    let (src, tgt) = (&langs[0], &langs[1]);
    let make =
        |gen: &Generator, prefix: &str, i: usize, key: &TaskKey| -> Result<ParallelExample> {
            let (prompt, answer, response) = gen.render(key);
            Ok(ParallelExample {
                id: format!("{prefix}{i:06}"),
                prompt_src: src.encode(&prompt)?,
                prompt_tgt: tgt.encode(&prompt)?,
                gold_answer: answer,
                gold_response: response,
                response_src: None,
                response_tgt: None,
                label: None,
                ppl_src: None,
                ppl_tgt: None,
            })
        };
    let task_parallel = task_keys
        .iter()
        .enumerate()
        .map(|(i, k)| make(&gen, "task-", i, k))
        .collect::<Result<Vec<_>>>()?;
    let eval_parallel = eval_keys
        .iter()
        .enumerate()
        .map(|(i, k)| make(&gen, "eval-", i, k))
        .collect::<Result<Vec<_>>>()?;

    let draw = |gen: &mut Generator, task_fraction: f64| -> Vec<Canon> {
        if gen.rng.random_bool(task_fraction) {
            let key = loop {
                let k = gen.random_key();
                if !eval_set.contains(&k) {
                    break k;
                }
            };
            let (mut prompt, _, response) = gen.render(&key);
            prompt.extend(response.into_iter().map(Canon::Sym));
            prompt
        } else {
            let mut s = gen.sentence();
            s.push(Canon::Sym(layout.eos()));
            s
        }
    };

    let mut pretrain = Vec::new();
    let mut src_tokens = 0usize;
    for _ in 0..config.n_pretrain_src {
        let seq = src.encode(&draw(&mut gen, config.task_fraction))?;
        src_tokens += seq.len();
        pretrain.push(PretrainSeq {
            lang: 0,
            tokens: seq,
        });
    }
    // Each target language receives a token budget proportional to its share,
    // filled until the next draw would overshoot.
    let budget = (src_tokens as f64 * config.n_pretrain_tgt as f64 / config.n_pretrain_src as f64)
        .round() as usize;
    for (li, lang) in langs.iter().enumerate().skip(1) {
        let mut used = 0usize;
        loop {
            let seq = lang.encode(&draw(&mut gen, config.task_fraction_tgt))?;
            if used + seq.len() > budget {
                break;
            }
            used += seq.len();
            pretrain.push(PretrainSeq {
                lang: li,
                tokens: seq,
            });
        }
    }
    pretrain.shuffle(&mut gen.rng);

    let general = (0..config.n_general_eval)
        .map(|_| src.encode(&gen.sentence()))
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        layout,
        pretrain,
        task_parallel,
        eval_parallel,
        general,
    })
}
