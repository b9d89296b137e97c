use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::lexicon::{self, Noun, Verb, NOUNS, VERBS};
use super::CorpusError;

/// The generative factors the template grammar knows how to realize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    VerbObject,
    Gender,
    Negation,
    Tense,
    SubjectNumber,
    ObjectNumber,
    SentenceType,
    PersonNumber,
    VerbStyle,
}

impl FactorKind {
    pub const ALL: [FactorKind; 9] = [
        FactorKind::VerbObject,
        FactorKind::Gender,
        FactorKind::Negation,
        FactorKind::Tense,
        FactorKind::SubjectNumber,
        FactorKind::ObjectNumber,
        FactorKind::SentenceType,
        FactorKind::PersonNumber,
        FactorKind::VerbStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FactorKind::VerbObject => "verb_object",
            FactorKind::Gender => "gender",
            FactorKind::Negation => "negation",
            FactorKind::Tense => "tense",
            FactorKind::SubjectNumber => "subject_number",
            FactorKind::ObjectNumber => "object_number",
            FactorKind::SentenceType => "sentence_type",
            FactorKind::PersonNumber => "person_number",
            FactorKind::VerbStyle => "verb_style",
        }
    }

    pub fn from_name(name: &str) -> Option<FactorKind> {
        FactorKind::ALL.into_iter().find(|k| k.name() == name)
    }

    fn fixed_labels(self) -> &'static [&'static str] {
        match self {
            FactorKind::VerbObject => &[],
            FactorKind::Gender => &["male", "female"],
            FactorKind::Negation => &["affirmative", "negative"],
            FactorKind::Tense => &["present", "future", "past"],
            FactorKind::SubjectNumber => &["singular", "plural"],
            FactorKind::ObjectNumber => &["singular", "plural"],
            FactorKind::SentenceType => &["interrogative", "declarative"],
            FactorKind::PersonNumber => &["1st", "2nd", "3rd"],
            FactorKind::VerbStyle => &["gerund", "infinitive"],
        }
    }

    /// Value used when the factor is not part of the active spec.
    fn default_value(self) -> usize {
        match self {
            FactorKind::PersonNumber => 2,
            FactorKind::SentenceType | FactorKind::VerbStyle => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub cardinality: usize,
    pub value_labels: Vec<String>,
}

impl FactorSpec {
    pub fn value_index(&self, label: &str) -> Option<usize> {
        self.value_labels.iter().position(|l| l == label)
    }
}

/// Human-editable description of a grammar; see `GrammarSpec::from_config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    /// Active factors in latent order.
    pub factors: Vec<FactorKind>,
    /// Size of the verb/object inventory.
    pub verb_object_count: usize,
    /// Upper bound on sentence length including the begin/end markers.
    pub max_tokens: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig::desk()
    }
}

impl GrammarConfig {
    /// Five factors, 288 sentences.
    pub fn desk() -> Self {
        GrammarConfig {
            factors: vec![
                FactorKind::Tense,
                FactorKind::Negation,
                FactorKind::SubjectNumber,
                FactorKind::PersonNumber,
                FactorKind::VerbObject,
            ],
            verb_object_count: 8,
            max_tokens: 16,
        }
    }

    /// All nine factors in the order of the dSentences schema.
    pub fn full_table(verb_object_count: usize) -> Self {
        GrammarConfig {
            factors: FactorKind::ALL.to_vec(),
            verb_object_count,
            max_tokens: 16,
        }
    }
}

/// Factor schema plus the verb/object inventory. Realization rules live in
/// [`GrammarSpec::realize`] and are inverted by [`GrammarSpec::extract`].
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    config: GrammarConfig,
    factors: Vec<FactorSpec>,
    inventory: Vec<(usize, usize)>,
    pair_index: HashMap<(usize, usize), usize>,
}

/// Full assignment of all nine factors, active or not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Clause {
    verb_object: usize,
    gender: usize,
    negation: usize,
    tense: usize,
    subject_number: usize,
    object_number: usize,
    sentence_type: usize,
    person: usize,
    verb_style: usize,
}

impl Clause {
    fn set(&mut self, kind: FactorKind, value: usize) {
        let slot = match kind {
            FactorKind::VerbObject => &mut self.verb_object,
            FactorKind::Gender => &mut self.gender,
            FactorKind::Negation => &mut self.negation,
            FactorKind::Tense => &mut self.tense,
            FactorKind::SubjectNumber => &mut self.subject_number,
            FactorKind::ObjectNumber => &mut self.object_number,
            FactorKind::SentenceType => &mut self.sentence_type,
            FactorKind::PersonNumber => &mut self.person,
            FactorKind::VerbStyle => &mut self.verb_style,
        };
        *slot = value;
    }

    fn defaults() -> Clause {
        let mut c = Clause {
            verb_object: 0,
            gender: 0,
            negation: 0,
            tense: 0,
            subject_number: 0,
            object_number: 0,
            sentence_type: 0,
            person: 0,
            verb_style: 0,
        };
        for kind in FactorKind::ALL {
            c.set(kind, kind.default_value());
        }
        c
    }

    /// Gender only surfaces on third-person singular subjects.
    fn gender_visible(&self) -> bool {
        self.person == 2 && self.subject_number == 0
    }
}

// Value indices, matching `FactorKind::fixed_labels`.
const PRESENT: usize = 0;
const FUTURE: usize = 1;
const PAST: usize = 2;
const NEGATIVE: usize = 1;
const PLURAL: usize = 1;
const INTERROGATIVE: usize = 0;
const GERUND: usize = 0;

impl GrammarSpec {
    pub fn from_config(config: GrammarConfig) -> Result<Self, CorpusError> {
        if config.factors.is_empty() {
            return Err(CorpusError::InvalidSpec("no factors".into()));
        }
        for (i, k) in config.factors.iter().enumerate() {
            if config.factors[..i].contains(k) {
                return Err(CorpusError::InvalidSpec(format!("factor {k} listed twice")));
            }
        }
        if config.verb_object_count == 0 || config.verb_object_count > lexicon::MAX_VERB_OBJECTS {
            return Err(CorpusError::InvalidSpec(format!(
                "verb_object_count must be in 1..={}, got {}",
                lexicon::MAX_VERB_OBJECTS,
                config.verb_object_count
            )));
        }
        if config.max_tokens < 4 {
            return Err(CorpusError::InvalidSpec("max_tokens must be at least 4".into()));
        }
        let inventory = lexicon::verb_object_inventory(config.verb_object_count);
        let pair_index = inventory.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let factors = config
            .factors
            .iter()
            .map(|&kind| {
                let value_labels: Vec<String> = if kind == FactorKind::VerbObject {
                    inventory
                        .iter()
                        .map(|&(v, n)| format!("{}/{}", VERBS[v].base, NOUNS[n].singular))
                        .collect()
                } else {
                    kind.fixed_labels().iter().map(|s| s.to_string()).collect()
                };
                FactorSpec {
                    name: kind.name().to_string(),
                    kind,
                    cardinality: value_labels.len(),
                    value_labels,
                }
            })
            .collect();
        Ok(GrammarSpec {
            config,
            factors,
            inventory,
            pair_index,
        })
    }

    pub fn desk() -> Self {
        Self::from_config(GrammarConfig::desk()).expect("desk grammar is valid")
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.cardinality).collect()
    }

    pub fn factor_position(&self, kind: FactorKind) -> Option<usize> {
        self.factors.iter().position(|f| f.kind == kind)
    }

    pub fn factor_by_name(&self, name: &str) -> Option<(usize, &FactorSpec)> {
        self.factors.iter().enumerate().find(|(_, f)| f.name == name)
    }

    /// Size of the factor-assignment product space.
    pub fn assignment_count(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality).product()
    }

    /// Assignment number `index` in mixed-radix order (last factor fastest).
    pub fn assignment_at(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for (slot, f) in out.iter_mut().zip(&self.factors).rev() {
            *slot = index % f.cardinality;
            index /= f.cardinality;
        }
        out
    }

    fn clause(&self, assignment: &[usize]) -> Result<Clause, CorpusError> {
        if assignment.len() != self.factors.len() {
            return Err(CorpusError::AssignmentLength {
                expected: self.factors.len(),
                got: assignment.len(),
            });
        }
        let mut c = Clause::defaults();
        for (f, &value) in self.factors.iter().zip(assignment) {
            if value >= f.cardinality {
                return Err(CorpusError::OutOfRange {
                    factor: f.name.clone(),
                    value,
                    cardinality: f.cardinality,
                });
            }
            c.set(f.kind, value);
        }
        Ok(c)
    }

    /// The factor vector a sentence carries on its surface: factors that the
    /// template leaves invisible (gender outside third-person singular) are
    /// reported as unknown.
    pub fn observable(&self, assignment: &[usize]) -> Result<Vec<Option<usize>>, CorpusError> {
        let c = self.clause(assignment)?;
        Ok(self
            .factors
            .iter()
            .zip(assignment)
            .map(|(f, &v)| {
                if f.kind == FactorKind::Gender && !c.gender_visible() {
                    None
                } else {
                    Some(v)
                }
            })
            .collect())
    }

    /// Surface words of the sentence realizing `assignment`.
    pub fn realize(&self, assignment: &[usize]) -> Result<Vec<String>, CorpusError> {
        let c = self.clause(assignment)?;
        let (verb_idx, noun_idx) = self.inventory[c.verb_object];
        let verb: &Verb = &VERBS[verb_idx];
        let noun: &Noun = &NOUNS[noun_idx];
        let plural = c.subject_number == PLURAL;
        let subject: &[&str] = match (c.person, plural) {
            (0, false) => &["i"],
            (0, true) => &["we"],
            (1, false) => &["you"],
            (1, true) => &["you", "all"],
            (_, false) => {
                if c.gender == 0 {
                    &["he"]
                } else {
                    &["she"]
                }
            }
            (_, true) => &["they"],
        };
        let third_singular = c.person == 2 && !plural;
        let first_singular = c.person == 0 && !plural;
        let negative = c.negation == NEGATIVE;
        let question = c.sentence_type == INTERROGATIVE;

        // (auxiliary, main verb group)
        let (aux, main): (Option<&str>, Vec<&str>) = if c.verb_style == GERUND {
            match c.tense {
                PRESENT => {
                    let be = if first_singular {
                        "am"
                    } else if third_singular {
                        "is"
                    } else {
                        "are"
                    };
                    (Some(be), vec![verb.gerund])
                }
                PAST => {
                    let be = if first_singular || third_singular {
                        "was"
                    } else {
                        "were"
                    };
                    (Some(be), vec![verb.gerund])
                }
                _ => (Some("will"), vec!["be", verb.gerund]),
            }
        } else {
            match c.tense {
                FUTURE => (Some("will"), vec![verb.base]),
                PAST if negative || question => (Some("did"), vec![verb.base]),
                PAST => (None, vec![verb.past]),
                _ if negative || question => (Some(if third_singular { "does" } else { "do" }), vec![verb.base]),
                _ => (None, vec![if third_singular { verb.third } else { verb.base }]),
            }
        };

        let object = if c.object_number == PLURAL {
            noun.plural
        } else {
            noun.singular
        };
        let mut words: Vec<&str> = Vec::with_capacity(10);
        if question {
            words.push(aux.expect("questions always carry an auxiliary"));
            words.extend_from_slice(subject);
        } else {
            words.extend_from_slice(subject);
            words.extend(aux);
        }
        if negative {
            words.push("not");
        }
        words.extend(main);
        words.push(lexicon::DETERMINER);
        words.push(object);
        if question {
            words.push(lexicon::QUESTION_MARK);
        }
        Ok(words.into_iter().map(String::from).collect())
    }

    /// Rule-based inverse of [`GrammarSpec::realize`]. Each factor that the
    /// surface does not determine comes back as `None`.
    pub fn extract<S: AsRef<str>>(&self, words: &[S]) -> Vec<Option<usize>> {
        let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
        let ann = annotate(&words, &self.pair_index);
        self.factors
            .iter()
            .map(|f| {
                let v = ann.get(f.kind)?;
                (v < f.cardinality).then_some(v)
            })
            .collect()
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Annotation {
    verb_object: Option<usize>,
    gender: Option<usize>,
    negation: Option<usize>,
    tense: Option<usize>,
    subject_number: Option<usize>,
    object_number: Option<usize>,
    sentence_type: Option<usize>,
    person: Option<usize>,
    verb_style: Option<usize>,
}

impl Annotation {
    fn get(&self, kind: FactorKind) -> Option<usize> {
        match kind {
            FactorKind::VerbObject => self.verb_object,
            FactorKind::Gender => self.gender,
            FactorKind::Negation => self.negation,
            FactorKind::Tense => self.tense,
            FactorKind::SubjectNumber => self.subject_number,
            FactorKind::ObjectNumber => self.object_number,
            FactorKind::SentenceType => self.sentence_type,
            FactorKind::PersonNumber => self.person,
            FactorKind::VerbStyle => self.verb_style,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum VerbForm {
    Base,
    Third,
    Past,
    Gerund,
}

fn lookup_verb(word: &str) -> Option<(usize, VerbForm)> {
    VERBS.iter().enumerate().find_map(|(i, v)| {
        let form = if word == v.base {
            VerbForm::Base
        } else if word == v.third {
            VerbForm::Third
        } else if word == v.past {
            VerbForm::Past
        } else if word == v.gerund {
            VerbForm::Gerund
        } else {
            return None;
        };
        Some((i, form))
    })
}

fn lookup_noun(word: &str) -> Option<(usize, usize)> {
    NOUNS.iter().enumerate().find_map(|(i, n)| {
        if word == n.singular {
            Some((i, 0))
        } else if word == n.plural {
            Some((i, PLURAL))
        } else {
            None
        }
    })
}

const FRONTING_AUX: [&str; 9] = ["do", "does", "did", "will", "am", "is", "are", "was", "were"];

fn annotate(words: &[&str], pairs: &HashMap<(usize, usize), usize>) -> Annotation {
    let mut ann = Annotation::default();

    // subject: (person, number, gender)
    let subject = words.iter().enumerate().find_map(|(i, &w)| {
        let next_all = words.get(i + 1) == Some(&"all");
        match w {
            "i" => Some((0, 0, None)),
            "we" => Some((0, PLURAL, None)),
            "you" if next_all => Some((1, PLURAL, None)),
            "you" => Some((1, 0, None)),
            "he" => Some((2, 0, Some(0))),
            "she" => Some((2, 0, Some(1))),
            "they" => Some((2, PLURAL, None)),
            _ => None,
        }
    });
    if let Some((person, number, gender)) = subject {
        ann.person = Some(person);
        ann.subject_number = Some(number);
        ann.gender = gender;
    }

    let first = words.first().copied();
    let last = words.last().copied();
    if first.is_some_and(|w| FRONTING_AUX.contains(&w)) && last == Some(lexicon::QUESTION_MARK) {
        ann.sentence_type = Some(INTERROGATIVE);
    } else if subject.is_some() && first.is_some_and(|w| lexicon::PRONOUNS.contains(&w)) {
        ann.sentence_type = Some(1);
    }

    let verb = words.iter().find_map(|w| lookup_verb(w));
    if let Some((verb_idx, form)) = verb {
        ann.negation = Some(usize::from(words.contains(&"not")));
        let has = |w: &str| words.contains(&w);
        if form == VerbForm::Gerund {
            ann.verb_style = Some(GERUND);
            ann.tense = if has("will") {
                Some(FUTURE)
            } else if has("was") || has("were") {
                Some(PAST)
            } else if has("am") || has("is") || has("are") {
                Some(PRESENT)
            } else {
                None
            };
        } else {
            ann.verb_style = Some(1);
            ann.tense = if has("will") {
                Some(FUTURE)
            } else if has("did") || form == VerbForm::Past {
                Some(PAST)
            } else {
                Some(PRESENT)
            };
        }
        let object = words
            .iter()
            .position(|&w| w == lexicon::DETERMINER)
            .and_then(|i| words.get(i + 1))
            .and_then(|w| lookup_noun(w));
        if let Some((noun_idx, number)) = object {
            ann.object_number = Some(number);
            ann.verb_object = pairs.get(&(verb_idx, noun_idx)).copied();
        }
    }
    ann
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn joined(spec: &GrammarSpec, a: &[usize]) -> String {
        spec.realize(a).unwrap().join(" ")
    }

    #[test]
    fn table_three_surface_forms() {
        let spec = GrammarSpec::desk();
        // tense=future, negation=negative, singular, 2nd person, attend/party
        assert_eq!(joined(&spec, &[1, 1, 0, 1, 0]), "you will not attend the party");
        assert_eq!(joined(&spec, &[2, 1, 0, 1, 0]), "you did not attend the party");
        assert_eq!(joined(&spec, &[0, 1, 0, 1, 0]), "you do not attend the party");
        assert_eq!(joined(&spec, &[1, 1, 1, 0, 0]), "we will not attend the party");
        assert_eq!(joined(&spec, &[1, 1, 0, 0, 0]), "i will not attend the party");
        assert_eq!(joined(&spec, &[1, 1, 0, 1, 1]), "you will not sign the paper");
    }

    #[test]
    fn agreement() {
        let spec = GrammarSpec::desk();
        assert_eq!(joined(&spec, &[0, 0, 0, 2, 0]), "he attends the party");
        assert_eq!(joined(&spec, &[0, 1, 0, 2, 0]), "he does not attend the party");
        assert_eq!(joined(&spec, &[2, 0, 1, 2, 3]), "they wrote the letter");
        assert_eq!(joined(&spec, &[0, 0, 1, 1, 0]), "you all attend the party");
    }

    #[test]
    fn full_schema_forms() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(24)).unwrap();
        // verb_object, gender, negation, tense, subj, obj, type, person, style
        let s = joined(&spec, &[0, 1, 1, 2, 0, 1, 0, 2, 0]);
        assert_eq!(s, "was she not attending the parties ?");
        let s = joined(&spec, &[1, 0, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(s, "i will be signing the paper");
        let s = joined(&spec, &[0, 0, 0, 0, 1, 0, 0, 1, 1]);
        assert_eq!(s, "do you all attend the party ?");
    }

    #[test]
    fn extraction_of_table_three_input() {
        let spec = GrammarSpec::desk();
        let f = spec.extract(&words("you will not attend the party"));
        assert_eq!(f, vec![Some(1), Some(1), Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn unknown_tokens_extract_to_unknown() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(24)).unwrap();
        let f = spec.extract(&words("<unk> <unk> <unk> <unk>"));
        assert!(f.iter().all(Option::is_none));
        assert!(spec.extract::<&str>(&[]).iter().all(Option::is_none));
    }

    #[test]
    fn round_trip_desk_exhaustive() {
        let spec = GrammarSpec::desk();
        for i in 0..spec.assignment_count() {
            let a = spec.assignment_at(i);
            let w = spec.realize(&a).unwrap();
            let back = spec.extract(&w);
            assert_eq!(back, a.iter().map(|&v| Some(v)).collect::<Vec<_>>(), "{w:?}");
        }
    }

    #[test]
    fn round_trip_full_schema_matches_observable() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(8)).unwrap();
        for i in 0..spec.assignment_count() {
            let a = spec.assignment_at(i);
            let w = spec.realize(&a).unwrap();
            assert_eq!(spec.extract(&w), spec.observable(&a).unwrap(), "{w:?}");
        }
    }

    #[test]
    fn out_of_range_assignment() {
        let spec = GrammarSpec::desk();
        assert!(matches!(
            spec.realize(&[3, 0, 0, 0, 0]),
            Err(CorpusError::OutOfRange { .. })
        ));
        assert!(spec.realize(&[0, 0]).is_err());
    }

    #[test]
    fn full_table_dimensions() {
        let spec = GrammarSpec::from_config(GrammarConfig::full_table(1100)).unwrap();
        assert_eq!(spec.cardinalities(), vec![1100, 2, 2, 3, 2, 2, 2, 3, 2]);
    }
}
