//! Synthetic key-value tasks over a shared document set, and evaluation
//! in three modes: no plugin, plugged, and coupled (document and query
//! concatenated into one input).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{classify, infer, TaskExample};
use crate::model::{Backbone, MAX_QUERY_LEN, MAX_TARGET_LEN};
use crate::store::PluginStore;
use crate::text::{split_words, tokenize, Corpus, CorpusRecord, Document, Vocabulary, EOS};
use crate::{Error, Result};

pub const VALUE_ALPHABET: usize = 128;
pub const VALUE_LEN: usize = 2;
/// Each value position draws from its own alphabet.
const VALUE_PREFIXES: [&str; VALUE_LEN] = ["v", "w"];
pub const YES: &str = "yes";
pub const NO: &str = "no";
/// Keys shared by all documents.
pub const KEY_POOL: usize = 16;

const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "small", "large", "old", "new", "quiet", "bright", "dark",
];
const NOUNS: &[&str] = &[
    "river", "tower", "garden", "market", "bridge", "forest", "station", "harbor", "valley",
    "castle",
];
const VERBS: &[&str] = &[
    "stands", "rests", "waits", "shines", "sleeps", "grows", "fades", "turns",
];
const FIXED: &[&str] = &[
    "the", "code", "of", "is", "maps", "to", "what", "near", "?", ".", YES, NO,
];

/// One task row as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub query: String,
    pub doc_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<TaskRow>,
    pub dev: Vec<TaskRow>,
    pub test: Vec<TaskRow>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &TaskRow> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Generate the value of a key.
    Qa,
    /// Answer yes/no to a claimed key-value pair.
    Verify,
}

impl TaskKind {
    /// Accuracy of the best query-only predictor. QA answers are drawn
    /// uniformly from all `128²` value sequences; verification is balanced.
    pub fn chance(self) -> f64 {
        match self {
            TaskKind::Qa => 1.0 / (VALUE_ALPHABET.pow(VALUE_LEN as u32)) as f64,
            TaskKind::Verify => 0.5,
        }
    }
}

/// Documents with key-value statements and distractors, plus two tasks
/// over them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub documents: Vec<CorpusRecord>,
    pub qa: Split,
    pub verify: Split,
    pub n_keys: usize,
}

fn key(i: usize) -> String {
    format!("k{i}")
}

/// Word `i` of the alphabet for position `pos` of a value.
fn value_word(pos: usize, i: usize) -> String {
    format!("{}{i}", VALUE_PREFIXES[pos])
}

/// Builds a task over `n_docs` documents. Every document binds
/// `pairs_per_doc` distinct keys from a shared pool of [`KEY_POOL`] to
/// values that are unique across the task, stating each binding twice in different phrasings,
/// interleaved with `distractors` unrelated sentences. The same key
/// means something different in every document, so the query alone
/// carries no information about the answer. Rows are split 80/10/10 by
/// document.
pub fn gen_task(
    n_docs: usize,
    pairs_per_doc: usize,
    distractors: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    let space = VALUE_ALPHABET.pow(VALUE_LEN as u32);
    if pairs_per_doc > KEY_POOL {
        return Err(Error::Config(format!(
            "{pairs_per_doc} pairs per document exceed the {KEY_POOL} keys"
        )));
    }
    if n_docs == 0 || pairs_per_doc == 0 {
        return Err(Error::Config("task needs at least one pair".into()));
    }
    let n_pairs = n_docs * pairs_per_doc;
    if n_pairs > space {
        return Err(Error::Config(format!(
            "{n_pairs} pairs exceed the {space} distinct values"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value_text = |v: usize| {
        format!(
            "{} {}",
            value_word(0, v / VALUE_ALPHABET),
            value_word(1, v % VALUE_ALPHABET)
        )
    };

    let values = rand::seq::index::sample(&mut rng, space, n_pairs).into_vec();
    let mut documents = Vec::with_capacity(n_docs);
    let mut pairs: Vec<Vec<(String, usize)>> = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let doc_id = format!("doc{d:04}");
        let keys = rand::seq::index::sample(&mut rng, KEY_POOL, pairs_per_doc);
        let mut sentences = Vec::new();
        let mut doc_pairs = Vec::with_capacity(pairs_per_doc);
        for (k, &v) in keys
            .iter()
            .zip(&values[d * pairs_per_doc..(d + 1) * pairs_per_doc])
        {
            let k = key(k);
            sentences.push(format!("the code of {k} is {} .", value_text(v)));
            sentences.push(format!("{k} maps to {} .", value_text(v)));
            doc_pairs.push((k, v));
        }
        for _ in 0..distractors {
            let adj = ADJECTIVES.choose(&mut rng).unwrap();
            let n1 = NOUNS.choose(&mut rng).unwrap();
            let verb = VERBS.choose(&mut rng).unwrap();
            let n2 = NOUNS.choose(&mut rng).unwrap();
            sentences.push(format!("the {adj} {n1} {verb} near the {n2} ."));
        }
        sentences.shuffle(&mut rng);
        documents.push(CorpusRecord {
            id: doc_id,
            text: sentences.join(" "),
        });
        pairs.push(doc_pairs);
    }

    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut rng);
    let n_train = n_docs * 8 / 10;
    let n_dev = n_docs / 10;
    let mut qa = Split::default();
    let mut verify = Split::default();
    let mut rank = 0usize;
    for (pos, &d) in order.iter().enumerate() {
        let doc_id = &documents[d].id;
        for (k, v) in &pairs[d] {
            let truthful = rank.is_multiple_of(2);
            rank += 1;
            let claimed = if truthful {
                *v
            } else {
                let other = rng.random_range(0..space - 1);
                if other >= *v {
                    other + 1
                } else {
                    other
                }
            };
            let qa_row = TaskRow {
                query: format!("what is the code of {k} ?"),
                doc_id: doc_id.clone(),
                answer: value_text(*v),
            };
            let verify_row = TaskRow {
                query: format!("is the code of {k} {} ?", value_text(claimed)),
                doc_id: doc_id.clone(),
                answer: if truthful { YES } else { NO }.to_string(),
            };
            let (qs, vs) = if pos < n_train {
                (&mut qa.train, &mut verify.train)
            } else if pos < n_train + n_dev {
                (&mut qa.dev, &mut verify.dev)
            } else {
                (&mut qa.test, &mut verify.test)
            };
            qs.push(qa_row);
            vs.push(verify_row);
        }
    }
    Ok(SyntheticTask {
        documents,
        qa,
        verify,
        n_keys: KEY_POOL,
    })
}

impl SyntheticTask {
    pub fn split(&self, kind: TaskKind) -> &Split {
        match kind {
            TaskKind::Qa => &self.qa,
            TaskKind::Verify => &self.verify,
        }
    }

    /// Every word the task can produce, so nothing maps to UNK.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: BTreeSet<String> = FIXED.iter().map(|s| s.to_string()).collect();
        words.extend(
            ADJECTIVES
                .iter()
                .chain(NOUNS)
                .chain(VERBS)
                .map(|s| s.to_string()),
        );
        words.extend((0..self.n_keys).map(key));
        words.extend(
            (0..VALUE_LEN).flat_map(|p| (0..VALUE_ALPHABET).map(move |i| value_word(p, i))),
        );
        let texts = self.documents.iter().map(|d| d.text.as_str());
        let rows = self
            .qa
            .all()
            .chain(self.verify.all())
            .flat_map(|r| [r.query.as_str(), r.answer.as_str()]);
        for t in texts.chain(rows) {
            words.extend(split_words(t));
        }
        Vocabulary::from_tokens(words)
    }

    pub fn corpus(&self, vocab: &Vocabulary) -> Result<Corpus> {
        let docs = self
            .documents
            .iter()
            .map(|r| Document::from_text(r.id.clone(), &r.text, vocab))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Corpus::new(docs))
    }
}

/// Tokenizes rows; answers get a trailing EOS.
pub fn tokenize_rows(rows: &[TaskRow], vocab: &Vocabulary) -> Vec<TaskExample> {
    rows.iter()
        .map(|r| {
            let mut answer = tokenize(&r.answer, vocab);
            answer.truncate(MAX_TARGET_LEN - 1);
            answer.push(EOS);
            TaskExample {
                query: tokenize(&r.query, vocab),
                doc_id: r.doc_id.clone(),
                answer,
            }
        })
        .collect()
}

/// Rewrites each query as `query ++ document` for the coupled baseline.
pub fn couple(rows: &[TaskExample], corpus: &Corpus, max_len: usize) -> Result<Vec<TaskExample>> {
    let limit = max_len.min(MAX_QUERY_LEN);
    rows.iter()
        .map(|r| {
            let doc = corpus
                .get(&r.doc_id)
                .ok_or_else(|| Error::Data(format!("doc_id {:?} not in corpus", r.doc_id)))?;
            let mut query = r.query.clone();
            query.extend(doc.tokens());
            if query.len() > limit {
                return Err(Error::Data(format!(
                    "coupled input for {:?} has {} tokens, limit {limit}",
                    r.doc_id,
                    query.len()
                )));
            }
            Ok(TaskExample {
                query,
                doc_id: r.doc_id.clone(),
                answer: r.answer.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    None,
    Plugged,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Greedy output, capped at the gold length, equals the gold answer.
    pub exact_match: f64,
    /// Verification: yes/no logit comparison is right. QA: fraction of
    /// gold answer tokens reproduced at their position.
    pub accuracy: f64,
    pub n: usize,
}

/// Scores `model` on already tokenized rows. For `Coupled`, rows must
/// come from [`couple`].
pub fn evaluate(
    model: &Backbone,
    store: Option<&PluginStore>,
    rows: &[TaskExample],
    kind: TaskKind,
    mode: EvalMode,
    vocab: &Vocabulary,
) -> Result<Metrics> {
    if rows.is_empty() {
        return Err(Error::Data("no rows to evaluate".into()));
    }
    let plug = mode == EvalMode::Plugged;
    let (yes, no) = (vocab.id_or_unk(YES), vocab.id_or_unk(NO));
    let mut em = 0usize;
    let mut acc = 0.0;
    for r in rows {
        let gold = &r.answer[..r.answer.len() - 1];
        let out = infer(model, store, &r.query, Some(&r.doc_id), plug, gold.len())?;
        if out == gold {
            em += 1;
        }
        acc += match kind {
            TaskKind::Qa => {
                gold.iter().zip(&out).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64
            }
            TaskKind::Verify => {
                let said_yes = classify(model, store, &r.query, Some(&r.doc_id), plug, yes, no)?;
                f64::from(u8::from(said_yes == (gold.first() == Some(&yes))))
            }
        };
    }
    let n = rows.len();
    Ok(Metrics {
        exact_match: em as f64 / n as f64,
        accuracy: acc / n as f64,
        n,
    })
}

/// Report over several named evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<(String, Metrics)>,
    pub chance: HashMap<String, f64>,
}

impl BenchReport {
    pub fn push(&mut self, name: impl Into<String>, m: Metrics) {
        self.entries.push((name.into(), m));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut s = format!(
            "{:<w$}  {:>11}  {:>8}  {:>5}\n",
            "name", "exact_match", "accuracy", "n"
        );
        for (name, m) in &self.entries {
            let _ = writeln!(
                s,
                "{name:<w$}  {:>11.4}  {:>8.4}  {:>5}",
                m.exact_match, m.accuracy, m.n
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn counts_and_determinism() {
        let t = gen_task(10, 5, 2, 1).unwrap();
        assert_eq!(t.qa.len(), 50);
        assert_eq!(
            (t.qa.train.len(), t.qa.dev.len(), t.qa.test.len()),
            (40, 5, 5)
        );
        assert_eq!(t, gen_task(10, 5, 2, 1).unwrap());
        assert_ne!(t, gen_task(10, 5, 2, 2).unwrap());
        assert!(gen_task(10, KEY_POOL + 1, 0, 1).is_err());
        assert!(gen_task(2000, 9, 0, 1).is_err());
    }

    #[test]
    fn answers_live_in_exactly_one_document() {
        let t = gen_task(40, 4, 3, 5).unwrap();
        for row in t.qa.all() {
            let holders: Vec<_> = t
                .documents
                .iter()
                .filter(|d| d.text.contains(&format!(" {} .", row.answer)))
                .collect();
            assert_eq!(holders.len(), 1);
            assert_eq!(holders[0].id, row.doc_id);
        }
    }

    #[test]
    fn answers_are_stated_in_their_document() {
        let t = gen_task(20, 4, 3, 5).unwrap();
        for row in t.qa.all() {
            let k = row.query.split_whitespace().nth(5).unwrap();
            let doc = t.documents.iter().find(|d| d.id == row.doc_id).unwrap();
            assert!(doc
                .text
                .contains(&format!("the code of {k} is {} .", row.answer)));
            assert!(doc.text.contains(&format!("{k} maps to {} .", row.answer)));
            assert!(!row.query.contains(&row.answer));
        }
    }

    #[test]
    fn keys_are_shared_and_splits_hold_whole_documents() {
        let t = gen_task(40, 4, 1, 3).unwrap();
        let docs = |rows: &[TaskRow]| {
            rows.iter()
                .map(|r| r.doc_id.clone())
                .collect::<BTreeSet<_>>()
        };
        let (a, b, c) = (docs(&t.qa.train), docs(&t.qa.dev), docs(&t.qa.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!((a.len(), b.len(), c.len()), (32, 4, 4));
        let queries: BTreeSet<_> = t.qa.train.iter().map(|r| r.query.clone()).collect();
        assert!(t.qa.test.iter().all(|r| queries.contains(&r.query)));
        let yes = t.verify.all().filter(|r| r.answer == YES).count();
        assert_eq!(yes, t.verify.len().div_ceil(2));
        for r in t.verify.all().filter(|r| r.answer == NO) {
            let k = r.query.split_whitespace().nth(4).unwrap();
            let gold =
                t.qa.all()
                    .find(|q| q.doc_id == r.doc_id && q.query.ends_with(&format!("{k} ?")))
                    .unwrap();
            assert!(!r.query.contains(&gold.answer));
        }
    }

    #[test]
    fn vocabulary_covers_everything() {
        let t = gen_task(5, 3, 2, 0).unwrap();
        let v = t.vocabulary();
        let corpus = t.corpus(&v).unwrap();
        assert!(corpus
            .documents
            .iter()
            .all(|d| !d.tokens().contains(&crate::text::UNK)));
        let rows = tokenize_rows(&t.verify.train, &v);
        assert!(rows.iter().all(|r| !r.query.contains(&crate::text::UNK)));
    }

    #[test]
    fn untrained_model_scores_near_zero_and_rigged_model_scores_one() {
        let t = gen_task(6, 2, 1, 0).unwrap();
        let v = t.vocabulary();
        let mut m = Backbone::new(ModelConfig::toy(v.len()), 0).unwrap();
        let rows = tokenize_rows(&t.qa.train, &v);
        let metrics = evaluate(&m, None, &rows, TaskKind::Qa, EvalMode::None, &v).unwrap();
        assert_eq!(metrics.exact_match, 0.0);

        // echo model: every row answers the same one-token sequence
        let gold = v.id("v0").unwrap();
        let d = m.config.d_model;
        m.params
            .get_mut("dec.final_norm.gamma")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
        m.params.get_mut("dec.final_norm.beta").unwrap().data_mut()[0] = 1.0;
        let head = m.params.get_mut("lm_head").unwrap();
        head.data_mut().iter_mut().for_each(|x| *x = 0.0);
        head.data_mut()[gold as usize] = 5.0;
        assert!(d > 0);
        let echo = vec![TaskExample {
            query: vec![gold],
            doc_id: "doc0000".into(),
            answer: vec![gold, gold, EOS],
        }];
        let metrics = evaluate(&m, None, &echo, TaskKind::Qa, EvalMode::None, &v).unwrap();
        assert_eq!((metrics.exact_match, metrics.accuracy), (1.0, 1.0));
    }

    #[test]
    fn coupled_rows_prepend_nothing_and_fit() {
        let t = gen_task(4, 3, 3, 0).unwrap();
        let v = t.vocabulary();
        let corpus = t.corpus(&v).unwrap();
        let rows = tokenize_rows(&t.qa.train, &v);
        let c = couple(&rows, &corpus, 256).unwrap();
        assert!(c
            .iter()
            .zip(&rows)
            .all(|(c, r)| c.query.starts_with(&r.query) && c.query.len() > r.query.len()));
        assert!(couple(&rows, &corpus, 10).is_err());
    }

    #[test]
    fn report_formats() {
        let mut r = BenchReport::default();
        r.push(
            "qa/plugged",
            Metrics {
                exact_match: 1.0,
                accuracy: 1.0,
                n: 3,
            },
        );
        assert!(r.to_table().contains("qa/plugged"));
        assert!(r.to_json().contains("exact_match"));
    }
}
