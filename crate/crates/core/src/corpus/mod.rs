//! Synthetic factor-annotated sentence corpus.
//!
//! A template grammar turns every assignment of the configured generative
//! factors into one English sentence; a table-driven extractor recovers the
//! factors from surface text. The on-disk layout of a corpus directory is
//!
//! * `corpus.tsv`: `words<TAB>factor-csv`, one sentence per line, `?` marks
//!   a factor the surface leaves undetermined;
//! * `vocab.tsv`: `token<TAB>id`;
//! * `grammar.toml`: the [`GrammarConfig`] the corpus was generated from.

mod grammar;
pub mod lexicon;

pub use grammar::{FactorKind, FactorSpec, GrammarConfig, GrammarSpec};

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid grammar: {0}")]
    InvalidSpec(String),
    #[error("assignment has {got} entries, grammar has {expected} factors")]
    AssignmentLength { expected: usize, got: usize },
    #[error("value {value} out of range for factor `{factor}` (cardinality {cardinality})")]
    OutOfRange {
        factor: String,
        value: usize,
        cardinality: usize,
    },
    #[error("assignments {first:?} and {second:?} both realize \"{sentence}\"")]
    DuplicateSentence {
        first: Vec<Option<usize>>,
        second: Vec<Option<usize>>,
        sentence: String,
    },
    #[error("sentence \"{sentence}\" has {len} tokens, limit is {max}")]
    TooLong { sentence: String, len: usize, max: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Dense token/id map. Ids 0..4 are the reserved markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved markers followed by `words` in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sorted: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(sorted).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// `BOS words EOS`, unknown words mapped to UNK.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Words that are not in the vocabulary.
    pub fn misses<'a, S: AsRef<str>>(&self, words: &'a [S]) -> Vec<&'a str> {
        words
            .iter()
            .map(AsRef::as_ref)
            .filter(|w| self.id(w).is_none())
            .collect()
    }

    /// Surface words of an id sequence: markers and padding are dropped and
    /// decoding stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str, path: &str) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| CorpusError::Parse {
                path: path.to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| err("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| err("bad id"))?;
            if id != tokens.len() {
                return Err(err("ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::Parse {
                path: path.to_string(),
                line: 1,
                msg: "reserved tokens must occupy ids 0..4".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// One sentence: token ids (with BOS/EOS) and its surface factor vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub factors: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: GrammarSpec,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn words(&self, i: usize) -> Vec<String> {
        self.vocab.decode(&self.examples[i].tokens)
    }

    pub fn max_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut body = String::new();
        for (i, ex) in self.examples.iter().enumerate() {
            body.push_str(&self.words(i).join(" "));
            body.push('\t');
            body.push_str(&format_factors(&ex.factors));
            body.push('\n');
        }
        fs::write(dir.join("corpus.tsv"), body)?;
        fs::write(dir.join("vocab.tsv"), self.vocab.to_tsv())?;
        fs::write(dir.join("grammar.toml"), grammar_file(self.spec.config()))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        let gpath = dir.join("grammar.toml");
        let config: GrammarConfig = toml::from_str(&fs::read_to_string(&gpath)?).map_err(|e| CorpusError::Parse {
            path: gpath.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        let spec = GrammarSpec::from_config(config)?;
        let vpath = dir.join("vocab.tsv");
        let vocab = Vocabulary::from_tsv(&fs::read_to_string(&vpath)?, &vpath.display().to_string())?;
        let cpath = dir.join("corpus.tsv");
        let cname = cpath.display().to_string();
        let mut examples = Vec::new();
        for (n, line) in fs::read_to_string(&cpath)?.lines().enumerate() {
            let err = |msg: String| CorpusError::Parse {
                path: cname.clone(),
                line: n + 1,
                msg,
            };
            let (text, factors) = line
                .split_once('\t')
                .ok_or_else(|| err("expected words<TAB>factors".into()))?;
            let words: Vec<&str> = text.split_whitespace().collect();
            let factors = parse_factors(factors).map_err(err)?;
            if factors.len() != spec.factors().len() {
                return Err(err(format!(
                    "{} factors, grammar has {}",
                    factors.len(),
                    spec.factors().len()
                )));
            }
            examples.push(Example {
                tokens: vocab.encode(&words),
                factors,
            });
        }
        Ok(Corpus { spec, vocab, examples })
    }
}

pub fn format_factors(factors: &[Option<usize>]) -> String {
    factors
        .iter()
        .map(|f| f.map_or("?".to_string(), |v| v.to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_factors(s: &str) -> Result<Vec<Option<usize>>, String> {
    s.trim()
        .split(',')
        .map(|f| match f.trim() {
            "?" => Ok(None),
            v => v.parse().map(Some).map_err(|_| format!("bad factor value `{v}`")),
        })
        .collect()
}

fn grammar_file(config: &GrammarConfig) -> String {
    let body = toml::to_string(config).expect("grammar config serializes");
    format!(
        "# Grammar of a generated corpus.\n\
         # factors: active generative factors, in latent order. Known factors:\n\
         #   verb_object gender negation tense subject_number object_number\n\
         #   sentence_type person_number verb_style\n\
         # verb_object_count: size of the verb/object inventory\n\
         # max_tokens: sentence length limit including begin/end markers\n\
         {body}"
    )
}

/// Surface words for a full factor assignment.
pub fn realize_sentence(assignment: &[usize], spec: &GrammarSpec) -> Result<Vec<String>, CorpusError> {
    spec.realize(assignment)
}

/// Rule-based inverse of [`realize_sentence`]; `None` marks a factor the
/// words do not determine.
pub fn extract_factors<S: AsRef<str>>(words: &[S], spec: &GrammarSpec) -> Vec<Option<usize>> {
    spec.extract(words)
}

/// One example per distinguishable factor assignment, shuffled by `seed`.
///
/// Assignments that differ only in a factor the template does not surface
/// (gender outside third-person singular) are realized once, with that
/// factor recorded as unknown.
pub fn generate_corpus(spec: &GrammarSpec, seed: u64) -> Result<Corpus, CorpusError> {
    let mut by_sentence: HashMap<String, Vec<Option<usize>>> = HashMap::new();
    let mut rows: Vec<(Vec<String>, Vec<Option<usize>>)> = Vec::new();
    let mut seen_observable = std::collections::HashSet::new();
    for i in 0..spec.assignment_count() {
        let assignment = spec.assignment_at(i);
        let observable = spec.observable(&assignment)?;
        if !seen_observable.insert(observable.clone()) {
            continue;
        }
        let words = spec.realize(&assignment)?;
        let sentence = words.join(" ");
        if words.len() + 2 > spec.config().max_tokens {
            return Err(CorpusError::TooLong {
                len: words.len() + 2,
                max: spec.config().max_tokens,
                sentence,
            });
        }
        if let Some(first) = by_sentence.insert(sentence.clone(), observable.clone()) {
            return Err(CorpusError::DuplicateSentence {
                first,
                second: observable,
                sentence,
            });
        }
        rows.push((words, observable));
    }
    let vocab = Vocabulary::from_words(rows.iter().flat_map(|(w, _)| w.iter()));
    let mut examples: Vec<Example> = rows
        .into_iter()
        .map(|(words, factors)| Example {
            tokens: vocab.encode(&words),
            factors,
        })
        .collect();
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        examples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn desk_corpus_covers_product_space_once() {
        let spec = GrammarSpec::desk();
        let corpus = generate_corpus(&spec, 0).unwrap();
        assert_eq!(corpus.len(), 288);
        let set: HashSet<_> = corpus.examples.iter().map(|e| e.factors.clone()).collect();
        assert_eq!(set.len(), 288);
        assert!(corpus.examples.iter().all(|e| e.factors.iter().all(Option::is_some)));
        for ex in &corpus.examples {
            assert!(ex.tokens.iter().all(|&t| t < corpus.vocab.len()));
            assert_eq!(ex.tokens[0], BOS);
            assert_eq!(*ex.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = GrammarSpec::desk();
        let a = generate_corpus(&spec, 3).unwrap();
        let b = generate_corpus(&spec, 3).unwrap();
        let c = generate_corpus(&spec, 4).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_ne!(a.examples, c.examples);
        assert_eq!(a.vocab, c.vocab);
    }

    #[test]
    fn extraction_round_trips_every_example() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(4)).unwrap();
        let corpus = generate_corpus(&spec, 1).unwrap();
        for i in 0..corpus.len() {
            assert_eq!(spec.extract(&corpus.words(i)), corpus.examples[i].factors);
        }
    }

    #[test]
    fn full_schema_corpus_size() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(2)).unwrap();
        let corpus = generate_corpus(&spec, 0).unwrap();
        // gender is visible only for 3rd-person singular subjects: of the six
        // person/number cells one doubles.
        let rest = 2 * 2 * 3 * 2 * 2 * 2;
        assert_eq!(corpus.len(), rest * 7);
    }

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::from_words(["b", "a", "a"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.encode(&["a", "zzz"]), vec![BOS, 4, UNK, EOS]);
        assert_eq!(v.decode(&[BOS, 5, 4, EOS, 4]), vec!["b", "a"]);
        let back = Vocabulary::from_tsv(&v.to_tsv(), "mem").unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(2)).unwrap();
        let corpus = generate_corpus(&spec, 11).unwrap();
        corpus.write_dir(dir.path()).unwrap();
        let back = Corpus::read_dir(dir.path()).unwrap();
        assert_eq!(back.examples, corpus.examples);
        assert_eq!(back.vocab, corpus.vocab);
        assert_eq!(back.spec, corpus.spec);
        let text = fs::read_to_string(dir.path().join("corpus.tsv")).unwrap();
        assert!(text.lines().all(|l| l.contains('\t')));
    }

    #[test]
    fn factor_csv() {
        assert_eq!(format_factors(&[Some(1), None, Some(0)]), "1,?,0");
        assert_eq!(parse_factors("1,?,0").unwrap(), vec![Some(1), None, Some(0)]);
        assert!(parse_factors("1,x").is_err());
    }
}
