//! Self-supervised plugin learning: recurring span prediction (RSP) and
//! next sentence generation (NSG), mixed per document.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::apply_gradients;
use crate::model::{Backbone, Ctx, LayerPrefixes, Trainable, MAX_QUERY_LEN, MAX_TARGET_LEN};
use crate::tensor::Adam;
use crate::text::{sentinel, Corpus, Document, Vocabulary, EOS, FIRST_WORD_ID, NUM_SENTINELS};
use crate::{Error, Result};

pub const MIN_SPAN_LEN: usize = 2;
pub const MAX_SPAN_LEN: usize = 10;
pub const MAX_SPANS: usize = 15;
pub const RSP_QUERY_SENTENCES: usize = 5;
pub const RSP_PROBABILITY: f64 = 0.7;

const STOPWORDS: &str = include_str!("../data/stopwords.txt");
const PRONOUNS: &[&str] = &[
    "i",
    "me",
    "my",
    "mine",
    "myself",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "he",
    "him",
    "his",
    "himself",
    "she",
    "her",
    "hers",
    "herself",
    "it",
    "its",
    "itself",
    "we",
    "us",
    "our",
    "ours",
    "ourselves",
    "they",
    "them",
    "their",
    "theirs",
    "themselves",
];

/// Words a recurring span may not consist of entirely.
#[derive(Debug, Clone)]
pub struct FillerWords {
    words: HashSet<String>,
}

impl Default for FillerWords {
    fn default() -> Self {
        Self::from_list(STOPWORDS)
    }
}

impl FillerWords {
    /// Stopwords from a one-per-line list, plus personal pronouns.
    pub fn from_list(list: &str) -> Self {
        let mut words: HashSet<String> = list
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        words.extend(PRONOUNS.iter().map(|p| p.to_string()));
        Self { words }
    }

    /// Stopword, pronoun, or punctuation-only token.
    pub fn is_filler(&self, word: &str) -> bool {
        self.words.contains(word) || !word.chars().any(char::is_alphanumeric)
    }

    /// Ids in `vocab` whose words are fillers.
    pub fn ids(&self, vocab: &Vocabulary) -> HashSet<u32> {
        vocab
            .words()
            .iter()
            .enumerate()
            .filter(|(_, w)| self.is_filler(w))
            .map(|(i, _)| FIRST_WORD_ID + i as u32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurringSpan {
    pub tokens: Vec<u32>,
    /// Non-overlapping `(sentence, offset)` occurrences in reading order.
    pub occurrences: Vec<(usize, usize)>,
}

impl RecurringSpan {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn countable(t: u32) -> bool {
    t >= FIRST_WORD_ID
}

/// Occurrences of every `n`-gram of word tokens, kept left to right
/// without overlap.
fn ngram_occurrences(doc: &Document, n: usize) -> HashMap<&[u32], Vec<(usize, usize)>> {
    let mut map: HashMap<&[u32], Vec<(usize, usize)>> = HashMap::new();
    for (si, s) in doc.sentences.iter().enumerate() {
        for (off, w) in s.windows(n).enumerate() {
            if !w.iter().all(|&t| countable(t)) {
                continue;
            }
            let occ = map.entry(w).or_default();
            match occ.last() {
                Some(&(ls, lo)) if ls == si && off < lo + n => {}
                _ => occ.push((si, off)),
            }
        }
    }
    map
}

/// Maximal word n-grams (length 2..=10) occurring at least twice. A gram
/// is dropped when a one-longer gram containing it recurs equally often,
/// or when all its words are fillers. Longest first, then earliest.
pub fn mine_recurring_spans(doc: &Document, filler: &HashSet<u32>) -> Vec<RecurringSpan> {
    let mut by_len: Vec<HashMap<&[u32], Vec<(usize, usize)>>> =
        vec![HashMap::new(); MAX_SPAN_LEN + 2];
    for (n, slot) in by_len
        .iter_mut()
        .enumerate()
        .take(MAX_SPAN_LEN + 2)
        .skip(MIN_SPAN_LEN)
    {
        *slot = ngram_occurrences(doc, n);
        slot.retain(|_, occ| occ.len() >= 2);
    }
    let mut spans = Vec::new();
    for n in MIN_SPAN_LEN..=MAX_SPAN_LEN {
        for (gram, occ) in &by_len[n] {
            if gram.iter().all(|t| filler.contains(t)) {
                continue;
            }
            let absorbed = n < MAX_SPAN_LEN
                && by_len[n + 1]
                    .iter()
                    .any(|(g, o)| o.len() == occ.len() && (&g[..n] == *gram || &g[1..] == *gram));
            if !absorbed {
                spans.push(RecurringSpan {
                    tokens: gram.to_vec(),
                    occurrences: occ.clone(),
                });
            }
        }
    }
    spans.sort_by(|a, b| {
        b.len()
            .cmp(&a.len())
            .then(a.occurrences[0].cmp(&b.occurrences[0]))
    });
    spans.truncate(MAX_SPANS);
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rsp,
    Nsg,
    Downstream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: Task,
    pub query: Vec<u32>,
    pub target: Vec<u32>,
    pub context: Document,
    /// Source sentence indices of the query and of the context.
    pub query_sentences: Vec<usize>,
    pub context_sentences: Vec<usize>,
}

fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| !taken.contains(i)).collect()
}

/// Masks recurring spans in up to five sampled sentences. `None` when no
/// sentence holds a span or nothing would be left as context.
pub fn build_rsp_example(
    doc: &Document,
    spans: &[RecurringSpan],
    seed: u64,
) -> Option<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qualifying: Vec<usize> = spans
        .iter()
        .flat_map(|s| s.occurrences.iter().map(|o| o.0))
        .collect();
    qualifying.sort_unstable();
    qualifying.dedup();
    if qualifying.is_empty() {
        return None;
    }
    let mut chosen: Vec<usize> = qualifying
        .choose_multiple(&mut rng, RSP_QUERY_SENTENCES)
        .copied()
        .collect();
    chosen.sort_unstable();
    while chosen.len() > 1
        && chosen
            .iter()
            .map(|&i| doc.sentences[i].len())
            .sum::<usize>()
            > MAX_QUERY_LEN
    {
        chosen.pop();
    }
    let context_sentences = complement(doc.sentences.len(), &chosen);
    if context_sentences.is_empty() {
        return None;
    }

    let mut assigned: Vec<usize> = Vec::new();
    let mut target_len = 1;
    let mut query = Vec::new();
    for &si in &chosen {
        let s = &doc.sentences[si][..doc.sentences[si].len().min(MAX_QUERY_LEN)];
        let mut i = 0;
        while i < s.len() {
            let hit = spans.iter().position(|sp| s[i..].starts_with(&sp.tokens));
            let slot = hit.and_then(|k| match assigned.iter().position(|&a| a == k) {
                Some(slot) => Some(slot),
                None if assigned.len() < NUM_SENTINELS as usize
                    && target_len + 1 + spans[k].len() <= MAX_TARGET_LEN =>
                {
                    assigned.push(k);
                    target_len += 1 + spans[k].len();
                    Some(assigned.len() - 1)
                }
                None => None,
            });
            match slot {
                Some(slot) => {
                    query.push(sentinel(slot as u32));
                    i += spans[assigned[slot]].len();
                }
                None => {
                    query.push(s[i]);
                    i += 1;
                }
            }
        }
    }
    if assigned.is_empty() {
        return None;
    }
    query.truncate(MAX_QUERY_LEN);
    let mut target = Vec::with_capacity(target_len);
    for (slot, &k) in assigned.iter().enumerate() {
        target.push(sentinel(slot as u32));
        target.extend_from_slice(&spans[k].tokens);
    }
    target.push(EOS);
    Some(TrainingExample {
        task: Task::Rsp,
        query,
        target,
        context: doc.subset(&context_sentences),
        query_sentences: chosen,
        context_sentences,
    })
}

/// Query is one sentence, target the next two. `None` for documents with
/// fewer than four sentences.
pub fn build_nsg_example(doc: &Document, seed: u64) -> Option<TrainingExample> {
    let n = doc.sentences.len();
    if n < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = rng.random_range(0..=n - 3);
    let mut query = doc.sentences[i].clone();
    query.truncate(MAX_QUERY_LEN);
    let mut target = [doc.sentences[i + 1].as_slice(), &doc.sentences[i + 2]].concat();
    target.truncate(MAX_TARGET_LEN - 1);
    target.push(EOS);
    let taken = [i, i + 1, i + 2];
    let context_sentences = complement(n, &taken);
    Some(TrainingExample {
        task: Task::Nsg,
        query,
        target,
        context: doc.subset(&context_sentences),
        query_sentences: taken.to_vec(),
        context_sentences,
    })
}

/// Endless stream of RSP/NSG examples over shuffled passes of a corpus.
/// Each document draws RSP with probability 0.7, else NSG; a document
/// that cannot produce the drawn task is skipped. The stream is empty
/// when no document can produce either task.
pub struct MixStream<'c> {
    corpus: &'c Corpus,
    spans: Vec<Vec<RecurringSpan>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    viable: bool,
}

impl<'c> MixStream<'c> {
    pub fn new(corpus: &'c Corpus, filler: &HashSet<u32>, seed: u64) -> Self {
        let spans: Vec<Vec<RecurringSpan>> = corpus
            .documents
            .iter()
            .map(|d| mine_recurring_spans(d, filler))
            .collect();
        let viable = corpus.documents.iter().zip(&spans).any(|(d, s)| {
            build_nsg_example(d, 0).is_some() || build_rsp_example(d, s, 0).is_some()
        });
        Self {
            corpus,
            spans,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
            viable,
        }
    }
}

impl Iterator for MixStream<'_> {
    type Item = TrainingExample;

    fn next(&mut self) -> Option<TrainingExample> {
        if !self.viable {
            return None;
        }
        loop {
            if self.pos == self.order.len() {
                self.order = (0..self.corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let di = self.order[self.pos];
            self.pos += 1;
            let rsp = self.rng.random_bool(RSP_PROBABILITY);
            let seed = self.rng.random::<u64>();
            let doc = &self.corpus.documents[di];
            let ex = if rsp {
                build_rsp_example(doc, &self.spans[di], seed)
            } else {
                build_nsg_example(doc, seed)
            };
            if ex.is_some() {
                return ex;
            }
        }
    }
}

/// One optimizer step on the summed per-example NLL. Each context is
/// encoded in the same graph, so gradients also flow through document
/// encoding. Returns the loss before the update.
pub fn pretrain_step(
    model: &mut Backbone,
    opt: &mut Adam,
    batch: &[TrainingExample],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty pretraining batch".into()));
    }
    let (value, grads) = {
        let mut ctx = Ctx::new(model, Trainable::Everything);
        let mut losses = Vec::with_capacity(batch.len());
        let max_doc = ctx.config().max_doc_len();
        let n_layers = ctx.config().n_enc_layers;
        for ex in batch {
            let mut doc = ex.context.tokens();
            doc.truncate(max_doc);
            let prefixes = if doc.is_empty() {
                LayerPrefixes::none(n_layers)
            } else {
                let h = ctx.encode(&doc, &LayerPrefixes::none(n_layers))?;
                ctx.map_plugin(h)?
            };
            let enc = ctx.encode(&ex.query, &prefixes)?;
            losses.push(ctx.decode_loss(enc, &ex.target)?);
        }
        let loss = ctx.g.add_all(&losses)?;
        ctx.g.backward(loss)?;
        (ctx.g.value(loss).item(), ctx.gradients())
    };
    apply_gradients(model, opt, &grads);
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 2e-4,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean per-example loss of every step.
    pub losses: Vec<f64>,
    pub rsp_examples: usize,
    pub nsg_examples: usize,
}

/// Runs `opts.steps` pretraining steps over a mix stream of `corpus`.
pub fn pretrain(
    model: &mut Backbone,
    corpus: &Corpus,
    filler: &HashSet<u32>,
    opts: &PretrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    let mut stream = MixStream::new(corpus, filler, opts.seed);
    let mut opt = Adam::new(opts.lr);
    let mut report = PretrainReport::default();
    for step in 0..opts.steps {
        let batch: Vec<TrainingExample> = stream.by_ref().take(opts.batch_size).collect();
        if batch.is_empty() {
            return Err(Error::Data("corpus yields no pretraining examples".into()));
        }
        for ex in &batch {
            match ex.task {
                Task::Rsp => report.rsp_examples += 1,
                _ => report.nsg_examples += 1,
            }
        }
        let loss = pretrain_step(model, &mut opt, &batch)? / batch.len() as f64;
        on_step(step, loss);
        report.losses.push(loss);
    }
    Ok(report)
}
