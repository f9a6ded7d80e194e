use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Whitespace-token vocabulary. Ids are assigned in order of first
/// appearance. Persisted as one `token<TAB>id` line per entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_text(text: &str) -> Self {
        let mut v = Self::new();
        for w in text.split_whitespace() {
            v.insert(w);
        }
        v
    }

    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.ids.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown word {w:?}")))
            })
            .collect()
    }

    /// Unknown ids render as `<id>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).map_or_else(|| format!("<{i}>"), str::to_string))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_tsv(&self) -> String {
        self.words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (word, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("vocab line {}: missing tab", n + 1)))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("vocab line {}: bad id", n + 1)))?;
            entries.push((id, word.to_string()));
        }
        entries.sort();
        let mut v = Self::new();
        for (expect, (id, word)) in entries.into_iter().enumerate() {
            if id as usize != expect || v.ids.contains_key(&word) {
                return Err(Error::InvalidArgument("vocab ids must be dense and unique".into()));
            }
            v.insert(&word);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// Read a UTF-8 corpus: one sequence per non-empty line, whitespace
/// tokenized. Returns the vocabulary and the encoded sequences.
pub fn load_corpus(path: &Path) -> Result<(Vocab, Vec<Vec<u32>>)> {
    let text = fs::read_to_string(path)?;
    Ok(encode_lines(&text))
}

/// One sequence per non-empty line, with a vocabulary built in order of first use.
pub fn encode_lines(text: &str) -> (Vocab, Vec<Vec<u32>>) {
    let mut vocab = Vocab::new();
    let seqs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|w| vocab.insert(w)).collect())
        .collect();
    (vocab, seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let v = Vocab::from_text("the cat sat on the mat");
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("the"), Some(0));
        assert_eq!(v.to_tsv().lines().next(), Some("the\t0"));
        assert_eq!(Vocab::from_tsv(&v.to_tsv()).unwrap(), v);
        assert_eq!(v.decode(&v.encode("cat on mat").unwrap()), "cat on mat");
        assert_eq!(v.decode(&[99]), "<99>");
        assert!(v.encode("dog").is_err());
    }

    #[test]
    fn tsv_rejects_gaps() {
        assert!(Vocab::from_tsv("a\t0\nb\t2\n").is_err());
        assert!(Vocab::from_tsv("a 0\n").is_err());
    }

    #[test]
    fn corpus_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a b c\n\nc b a\n").unwrap();
        let (v, seqs) = load_corpus(&p).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(seqs, vec![vec![0, 1, 2], vec![2, 1, 0]]);
        let vp = dir.path().join("vocab.tsv");
        v.save(&vp).unwrap();
        assert_eq!(Vocab::load(&vp).unwrap(), v);
    }
}
