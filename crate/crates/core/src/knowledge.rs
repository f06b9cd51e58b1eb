//! Knowledge triplets, their flattened sentences and the word vocabulary.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Joins a triplet into one lowercase sentence with single spaces,
/// e.g. `("tusk", "related to", "weapon")` becomes `"tusk related to weapon"`.
pub fn flatten_triplet(subject: &str, relation: &str, object: &str) -> Result<String> {
    let parts = [("subject", subject), ("relation", relation), ("object", object)];
    let mut words = Vec::new();
    for (role, text) in parts {
        let before = words.len();
        words.extend(text.split_whitespace().map(str::to_lowercase));
        if words.len() == before {
            return Err(Error::Input(format!("empty triplet {role}")));
        }
    }
    Ok(words.join(" "))
}

/// Word-level vocabulary with four reserved ids ahead of the learned tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-separated documents. Tokens are
    /// ordered by descending frequency, then lexicographically.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for word in doc.split_whitespace() {
                *counts.entry(word).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(w, _)| w.to_string())))
    }

    fn from_tokens(learned: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(learned)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace split followed by lookup; unknown words map to `[UNK]`.
    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// One learned token per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut seen = HashSet::new();
        let mut learned = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.contains(char::is_whitespace) || !seen.insert(line) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid vocabulary token {line:?}"),
                });
            }
            learned.push(line.to_string());
        }
        Ok(Self::from_tokens(learned))
    }
}

/// A raw `(subject, relation, object)` triplet.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeEntry {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub sentence: String,
    pub token_ids: Vec<usize>,
}

/// The knowledge set; entry ids are dense `0..len`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: Vec<KnowledgeEntry>,
}

impl KnowledgeBase {
    pub fn from_triplets(triplets: &[Triplet], vocab: &Vocabulary) -> Result<Self> {
        let entries = triplets
            .iter()
            .enumerate()
            .map(|(id, t)| {
                let sentence = flatten_triplet(&t.subject, &t.relation, &t.object)?;
                Ok(KnowledgeEntry {
                    id,
                    subject: t.subject.clone(),
                    relation: t.relation.clone(),
                    object: t.object.clone(),
                    token_ids: vocab.tokenize(&sentence),
                    sentence,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_triplets(&read_triplets(path)?, vocab)
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&KnowledgeEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.entries
            .iter()
            .map(|e| Triplet::new(&e.subject, &e.relation, &e.object))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_triplets(path, &self.triplets())
    }
}

/// Reads a knowledge TSV: `subject<TAB>relation<TAB>object`, one per line.
pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    parse_triplets(&fs::read_to_string(path)?)
}

pub fn parse_triplets(text: &str) -> Result<Vec<Triplet>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        if fields.len() != 3 {
            return Err(malformed(&format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields.iter().any(|f| f.trim().is_empty()) {
            return Err(malformed("empty triplet field"));
        }
        let t = Triplet::new(fields[0], fields[1], fields[2]);
        if !seen.insert(t.clone()) {
            log::warn!("line {}: duplicate triplet {:?} kept", i + 1, t);
        }
        out.push(t);
    }
    Ok(out)
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let mut out = String::new();
    for t in triplets {
        out.push_str(&format!("{}\t{}\t{}\n", t.subject, t.relation, t.object));
    }
    fs::write(path, out)?;
    Ok(())
}
