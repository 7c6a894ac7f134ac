//! Corpus parsing, vocabulary construction, and synthetic task generators.
//!
//! Parsers reject malformed records with the offending line number; they
//! never drop a record silently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::rng::RngStream;

#[derive(Debug)]
pub enum DataError {
    BadNumber { line: usize, token: String },
    MissingField { line: usize, field: &'static str },
    TrailingFields { line: usize },
    EmptyText { line: usize },
    LabelOutOfRange { line: usize, label: usize, classes: usize },
    ScoreOutOfRange { line: usize, score: f64 },
    SupportOutOfRange { line: usize, referenced: usize },
    SupportOnQuestionLine { line: usize, referenced: usize },
    DuplicateToken { token: String },
    MissingSpecials,
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::BadNumber { line, token } => {
                write!(f, "line {line}: expected a number, found {token:?}")
            }
            DataError::MissingField { line, field } => {
                write!(f, "line {line}: missing {field} field")
            }
            DataError::TrailingFields { line } => {
                write!(f, "line {line}: unexpected extra tab-separated fields")
            }
            DataError::EmptyText { line } => write!(f, "line {line}: no tokens"),
            DataError::LabelOutOfRange { line, label, classes } => {
                write!(f, "line {line}: label {label} outside 0..{classes}")
            }
            DataError::ScoreOutOfRange { line, score } => {
                write!(f, "line {line}: score {score} outside [1, 5]")
            }
            DataError::SupportOutOfRange { line, referenced } => {
                write!(f, "line {line}: supporting line {referenced} not in this story")
            }
            DataError::SupportOnQuestionLine { line, referenced } => {
                write!(f, "line {line}: supporting line {referenced} is a question")
            }
            DataError::DuplicateToken { token } => {
                write!(f, "vocabulary token {token:?} appears twice")
            }
            DataError::MissingSpecials => {
                write!(f, "vocabulary must start with {UNK_TOKEN}, {EOS_TOKEN}, {PAD_TOKEN}")
            }
        }
    }
}

impl std::error::Error for DataError {}

/// Lowercase whitespace tokens with terminal punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches(['.', '?', '!', ',']).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// One question over its preceding facts. `supporting` holds zero-based
/// indices into `facts`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Story {
    pub facts: Vec<String>,
    pub question: String,
    pub answers: Vec<String>,
    pub supporting: BTreeSet<usize>,
}

/// Parse numbered stories. A line is `<n> <fact>` or
/// `<n> <question>\t<answer>\t<supporting line numbers>`; a drop in the line
/// number starts a new story. Each question yields one [`Story`] over the
/// facts seen so far in its block, with supporting line numbers remapped to
/// fact indices.
pub fn parse_stories(input: &str) -> Result<Vec<Story>, DataError> {
    let mut stories = Vec::new();
    let mut facts: Vec<String> = Vec::new();
    let mut fact_index_by_line: BTreeMap<usize, usize> = BTreeMap::new();
    let mut question_lines: BTreeSet<usize> = BTreeSet::new();
    let mut prev_number: Option<usize> = None;

    for (lineno, raw) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (num_str, rest) = match line.split_once(char::is_whitespace) {
            Some((n, r)) => (n, r.trim_start()),
            None => (line, ""),
        };
        let number: usize = num_str.parse().map_err(|_| DataError::BadNumber {
            line: lineno,
            token: num_str.to_string(),
        })?;

        if let Some(prev) = prev_number {
            if number < prev {
                facts.clear();
                fact_index_by_line.clear();
                question_lines.clear();
            }
        }
        prev_number = Some(number);

        if rest.contains('\t') {
            let mut fields = rest.split('\t');
            let question = fields.next().unwrap_or("").trim();
            let answer = fields.next().ok_or(DataError::MissingField {
                line: lineno,
                field: "answer",
            })?;
            let supports = fields.next().ok_or(DataError::MissingField {
                line: lineno,
                field: "supporting",
            })?;
            if fields.next().is_some() {
                return Err(DataError::TrailingFields { line: lineno });
            }
            if question.is_empty() {
                return Err(DataError::EmptyText { line: lineno });
            }

            let answers: Vec<String> = answer
                .split(',')
                .flat_map(|part| tokenize(part))
                .collect();
            if answers.is_empty() {
                return Err(DataError::EmptyText { line: lineno });
            }

            question_lines.insert(number);
            let mut supporting = BTreeSet::new();
            for tok in supports.split_whitespace() {
                let referenced: usize = tok.parse().map_err(|_| DataError::BadNumber {
                    line: lineno,
                    token: tok.to_string(),
                })?;
                if question_lines.contains(&referenced) {
                    return Err(DataError::SupportOnQuestionLine {
                        line: lineno,
                        referenced,
                    });
                }
                let idx = fact_index_by_line.get(&referenced).copied().ok_or(
                    DataError::SupportOutOfRange {
                        line: lineno,
                        referenced,
                    },
                )?;
                supporting.insert(idx);
            }

            stories.push(Story {
                facts: facts.clone(),
                question: question.to_string(),
                answers,
                supporting,
            });
        } else {
            if rest.is_empty() {
                return Err(DataError::EmptyText { line: lineno });
            }
            fact_index_by_line.insert(number, facts.len());
            facts.push(rest.to_string());
        }
    }
    Ok(stories)
}

/// Inverse of [`parse_stories`] at the record level: each story becomes its
/// own block with facts renumbered from 1, so
/// `parse_stories(&serialize_stories(s)) == s`.
pub fn serialize_stories(stories: &[Story]) -> String {
    let mut out = String::new();
    for story in stories {
        for (i, fact) in story.facts.iter().enumerate() {
            out.push_str(&format!("{} {}\n", i + 1, fact));
        }
        let supports: Vec<String> = story
            .supporting
            .iter()
            .map(|&i| (i + 1).to_string())
            .collect();
        out.push_str(&format!(
            "{} {}\t{}\t{}\n",
            story.facts.len() + 1,
            story.question,
            story.answers.join(","),
            supports.join(" ")
        ));
    }
    out
}

pub const UNK_TOKEN: &str = "<UNK>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;

/// Token table with reserved ids 0..3 for the specials. Regular tokens are
/// kept when their count reaches `min_count` and ordered by descending
/// frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<I, S>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

        let mut table = vec![
            UNK_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
        ];
        table.extend(kept.into_iter().map(|(t, _)| t));
        Vocabulary::from_tokens(table).expect("specials placed by construction")
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < 3
            || tokens[UNK_ID] != UNK_TOKEN
            || tokens[EOS_ID] != EOS_TOKEN
            || tokens[PAD_ID] != PAD_TOKEN
        {
            return Err(DataError::MissingSpecials);
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::DuplicateToken { token: t.clone() });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// A [`Story`] mapped through a vocabulary: token ids instead of text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedStory {
    pub facts: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub supporting: BTreeSet<usize>,
}

pub fn encode_story(story: &Story, vocab: &Vocabulary) -> EncodedStory {
    EncodedStory {
        facts: story
            .facts
            .iter()
            .map(|f| vocab.encode(&tokenize(f)))
            .collect(),
        question: vocab.encode(&tokenize(&story.question)),
        answer: story.answers.iter().map(|a| vocab.id(a)).collect(),
        supporting: story.supporting.clone(),
    }
}

/// One classification example: `label` in `0..classes`, tokenized text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSeq {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// A [`LabeledSeq`] mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedLabeled {
    pub label: usize,
    pub tokens: Vec<usize>,
}

pub fn encode_labeled(seq: &LabeledSeq, vocab: &Vocabulary) -> EncodedLabeled {
    EncodedLabeled {
        label: seq.label,
        tokens: vocab.encode(&seq.tokens),
    }
}

/// A [`ParaphrasePair`] mapped through a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub target: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

pub fn encode_pair(pair: &ParaphrasePair, vocab: &Vocabulary) -> EncodedPair {
    EncodedPair {
        target: pair.target,
        left: vocab.encode(&pair.left),
        right: vocab.encode(&pair.right),
    }
}

/// Parse `label<TAB>text` lines.
pub fn parse_labeled_sequences(
    input: &str,
    classes: usize,
) -> Result<Vec<LabeledSeq>, DataError> {
    let mut out = Vec::new();
    for (lineno, raw) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (label_str, text) = line.split_once('\t').ok_or(DataError::MissingField {
            line: lineno,
            field: "text",
        })?;
        let label: usize = label_str.trim().parse().map_err(|_| DataError::BadNumber {
            line: lineno,
            token: label_str.to_string(),
        })?;
        if label >= classes {
            return Err(DataError::LabelOutOfRange {
                line: lineno,
                label,
                classes,
            });
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(DataError::EmptyText { line: lineno });
        }
        out.push(LabeledSeq { label, tokens });
    }
    Ok(out)
}

/// One similarity-scored sentence pair. `target` is the score rescaled from
/// [1, 5] into [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ParaphrasePair {
    pub target: f64,
    pub left: Vec<String>,
    pub right: Vec<String>,
}

/// Parse `score<TAB>sentence<TAB>sentence` lines.
pub fn parse_paraphrase_pairs(input: &str) -> Result<Vec<ParaphrasePair>, DataError> {
    let mut out = Vec::new();
    for (lineno, raw) in input.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let score_str = fields.next().unwrap_or("");
        let left_text = fields.next().ok_or(DataError::MissingField {
            line: lineno,
            field: "first sentence",
        })?;
        let right_text = fields.next().ok_or(DataError::MissingField {
            line: lineno,
            field: "second sentence",
        })?;
        if fields.next().is_some() {
            return Err(DataError::TrailingFields { line: lineno });
        }
        let score: f64 = score_str.trim().parse().map_err(|_| DataError::BadNumber {
            line: lineno,
            token: score_str.to_string(),
        })?;
        if !(1.0..=5.0).contains(&score) {
            return Err(DataError::ScoreOutOfRange { line: lineno, score });
        }
        let left = tokenize(left_text);
        let right = tokenize(right_text);
        if left.is_empty() || right.is_empty() {
            return Err(DataError::EmptyText { line: lineno });
        }
        out.push(ParaphrasePair {
            target: (score - 1.0) / 4.0,
            left,
            right,
        });
    }
    Ok(out)
}

/// Needle-detection task: every sequence is filler except for exactly one
/// marker token whose identity is the class label. A model only needs the
/// marker, so its input gates should close everywhere else.
#[derive(Clone, Copy, Debug)]
pub struct NeedleSpec {
    pub n_examples: usize,
    pub seq_len: usize,
    /// Number of distinct filler tokens.
    pub filler_vocab: usize,
    /// Number of marker tokens, which is also the number of classes.
    pub n_needles: usize,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        NeedleSpec {
            n_examples: 2000,
            seq_len: 20,
            filler_vocab: 50,
            n_needles: 5,
        }
    }
}

pub fn gen_needle(spec: &NeedleSpec, rng: &mut RngStream) -> Vec<LabeledSeq> {
    assert!(spec.seq_len >= 1 && spec.n_needles >= 1 && spec.filler_vocab >= 1);
    let mut out = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let label = rng.below(spec.n_needles);
        let pos = rng.below(spec.seq_len);
        let mut tokens = Vec::with_capacity(spec.seq_len);
        for t in 0..spec.seq_len {
            if t == pos {
                tokens.push(format!("needle{label}"));
            } else {
                tokens.push(format!("w{}", rng.below(spec.filler_vocab)));
            }
        }
        out.push(LabeledSeq { label, tokens });
    }
    out
}

const STORY_NAMES: [&str; 6] = ["mary", "john", "daniel", "sandra", "fred", "bill"];
const STORY_PLACES: [&str; 6] = ["kitchen", "garden", "office", "bathroom", "hallway", "bedroom"];
const STORY_VERBS: [&str; 3] = ["went to", "moved to", "travelled to"];

/// Synthetic location-tracking stories: people move between places, and each
/// question asks where someone is. The single supporting fact is the asked
/// person's most recent move.
#[derive(Clone, Copy, Debug)]
pub struct StorySpec {
    pub n_stories: usize,
    pub facts_per_story: usize,
    pub n_people: usize,
    pub n_places: usize,
}

impl Default for StorySpec {
    fn default() -> Self {
        StorySpec {
            n_stories: 1000,
            facts_per_story: 6,
            n_people: 4,
            n_places: 4,
        }
    }
}

pub fn gen_stories(spec: &StorySpec, rng: &mut RngStream) -> Vec<Story> {
    assert!(spec.n_people >= 1 && spec.n_people <= STORY_NAMES.len());
    assert!(spec.n_places >= 2 && spec.n_places <= STORY_PLACES.len());
    assert!(spec.facts_per_story >= 1);

    let mut out = Vec::with_capacity(spec.n_stories);
    for _ in 0..spec.n_stories {
        let mut facts = Vec::with_capacity(spec.facts_per_story);
        let mut last_move: BTreeMap<usize, (usize, usize)> = BTreeMap::new(); // person -> (fact, place)
        for f in 0..spec.facts_per_story {
            let person = rng.below(spec.n_people);
            let place = rng.below(spec.n_places);
            let verb = STORY_VERBS[rng.below(STORY_VERBS.len())];
            facts.push(format!(
                "{} {} the {}.",
                STORY_NAMES[person], verb, STORY_PLACES[place]
            ));
            last_move.insert(person, (f, place));
        }
        let movers: Vec<usize> = last_move.keys().copied().collect();
        let person = movers[rng.below(movers.len())];
        let (fact, place) = last_move[&person];
        out.push(Story {
            facts,
            question: format!("Where is {}?", STORY_NAMES[person]),
            answers: vec![STORY_PLACES[place].to_string()],
            supporting: [fact].into_iter().collect(),
        });
    }
    out
}
