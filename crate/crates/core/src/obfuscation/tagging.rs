//! Dictionary and pattern tagging of sensitive spans.
//!
//! Rule file: one `category<TAB>pattern` per line; blank lines and lines
//! starting with `#` are ignored. A pattern wrapped in slashes (`/.../`) is a
//! regex matched against whole windows of up to [`MAX_REGEX_WINDOW`] tokens
//! joined by single spaces; anything else is a literal word sequence.

use std::fs;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};
use crate::langmodel::Vocab;

pub const MAX_REGEX_WINDOW: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub category: String,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            category: String::new(),
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Prompt tokens plus sorted, disjoint, in-bounds sensitive spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPrompt {
    tokens: Vec<u32>,
    spans: Vec<Span>,
}

impl TaggedPrompt {
    pub fn new(tokens: Vec<u32>, spans: Vec<Span>) -> Result<Self> {
        let mut prev_end = 0;
        for s in &spans {
            if s.len == 0 || s.end() > tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "span {}+{} outside prompt of {}",
                    s.start,
                    s.len,
                    tokens.len()
                )));
            }
            if s.start < prev_end {
                return Err(Error::InvalidArgument("spans overlap or are unsorted".into()));
            }
            prev_end = s.end();
        }
        Ok(Self { tokens, spans })
    }

    pub fn untagged(tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            spans: Vec::new(),
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn segment(&self, span: &Span) -> &[u32] {
        &self.tokens[span.start..span.end()]
    }
}

#[derive(Debug, Clone)]
pub enum TagRule {
    Literal { category: String, words: Vec<String> },
    Pattern { category: String, regex: Regex },
}

impl TagRule {
    fn category(&self) -> &str {
        match self {
            TagRule::Literal { category, .. } | TagRule::Pattern { category, .. } => category,
        }
    }

    /// Longest match starting at `at`, in tokens.
    fn match_len(&self, words: &[&str], at: usize) -> Option<usize> {
        match self {
            TagRule::Literal { words: lit, .. } => {
                let end = at + lit.len();
                (end <= words.len() && words[at..end].iter().zip(lit).all(|(a, b)| *a == b))
                    .then_some(lit.len())
            }
            TagRule::Pattern { regex, .. } => (1..=MAX_REGEX_WINDOW)
                .rev()
                .filter(|n| at + n <= words.len())
                .find(|&n| regex.is_match(&words[at..at + n].join(" "))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TagRules {
    rules: Vec<TagRule>,
}

impl TagRules {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (category, pattern) = line
                .split_once('\t')
                .ok_or_else(|| Error::TagRules(format!("line {}: expected category<TAB>pattern", n + 1)))?;
            let category = category.trim().to_string();
            let pattern = pattern.trim();
            let rule = if pattern.len() >= 2 && pattern.starts_with('/') && pattern.ends_with('/') {
                let body = &pattern[1..pattern.len() - 1];
                let regex = Regex::new(&format!("^(?:{body})$"))
                    .map_err(|e| Error::TagRules(format!("line {}: {e}", n + 1)))?;
                TagRule::Pattern { category, regex }
            } else {
                let words: Vec<String> = pattern.split_whitespace().map(str::to_string).collect();
                if words.is_empty() {
                    return Err(Error::TagRules(format!("line {}: empty literal", n + 1)));
                }
                TagRule::Literal { category, words }
            };
            rules.push(rule);
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Tag spans leftmost-longest: scan left to right, at each position take the
/// longest match over all rules (first rule wins ties), then resume after it.
pub fn tag_sensitive(tokens: &[u32], vocab: &Vocab, rules: &TagRules) -> Result<TaggedPrompt> {
    if rules.is_empty() {
        return Err(Error::TagRules("no rules".into()));
    }
    let words: Vec<&str> = tokens
        .iter()
        .map(|&t| {
            vocab
                .word(t)
                .ok_or(Error::TokenOutOfRange { token: t, vocab: vocab.len() })
        })
        .collect::<Result<_>>()?;
    let mut spans = Vec::new();
    let mut at = 0;
    while at < words.len() {
        let best = rules
            .rules
            .iter()
            .filter_map(|r| r.match_len(&words, at).map(|n| (n, r)))
            .fold(None::<(usize, &TagRule)>, |best, (n, r)| match best {
                Some((bn, _)) if bn >= n => best,
                _ => Some((n, r)),
            });
        match best {
            Some((n, rule)) => {
                spans.push(Span {
                    start: at,
                    len: n,
                    category: rule.category().to_string(),
                });
                at += n;
            }
            None => at += 1,
        }
    }
    TaggedPrompt::new(tokens.to_vec(), spans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(text: &str) -> (Vocab, Vec<u32>) {
        let v = Vocab::from_text(text);
        let t = v.encode(text).unwrap();
        (v, t)
    }

    #[test]
    fn no_match() {
        let (v, t) = setup("nothing to see here");
        let rules = TagRules::parse("name\tlydia\n").unwrap();
        assert!(tag_sensitive(&t, &v, &rules).unwrap().spans().is_empty());
    }

    #[test]
    fn dictionary_hit() {
        let (v, t) = setup("call mrs lydia grant today");
        let rules = TagRules::parse("name\tmrs lydia grant\n").unwrap();
        let p = tag_sensitive(&t, &v, &rules).unwrap();
        assert_eq!(p.spans().len(), 1);
        assert_eq!((p.spans()[0].start, p.spans()[0].len), (1, 3));
        assert_eq!(p.spans()[0].category, "name");
    }

    #[test]
    fn adjacent_hits_stay_separate() {
        let (v, t) = setup("met lydia march d3 ok");
        let rules = TagRules::parse("name\tlydia\n# dates\ndate\t/(march|may) d[0-9]+/\n").unwrap();
        let p = tag_sensitive(&t, &v, &rules).unwrap();
        let spans: Vec<(usize, usize)> = p.spans().iter().map(|s| (s.start, s.len)).collect();
        assert_eq!(spans, vec![(1, 1), (2, 2)]);
    }

    #[test]
    fn overlap_resolves_leftmost_longest() {
        let (v, t) = setup("a b c d");
        let rules = TagRules::parse("x\tb c\ny\ta b\nz\tb c d\n").unwrap();
        let p = tag_sensitive(&t, &v, &rules).unwrap();
        let spans: Vec<(usize, usize, &str)> =
            p.spans().iter().map(|s| (s.start, s.len, s.category.as_str())).collect();
        assert_eq!(spans, vec![(0, 2, "y")]);
    }

    #[test]
    fn rule_errors() {
        assert!(TagRules::parse("no tab here\n").is_err());
        assert!(TagRules::parse("bad\t/(unclosed/\n").is_err());
        let (v, t) = setup("a");
        assert!(tag_sensitive(&t, &v, &TagRules::default()).is_err());
    }

    #[test]
    fn span_validation() {
        assert!(TaggedPrompt::new(vec![1, 2, 3], vec![Span::new(2, 2)]).is_err());
        assert!(TaggedPrompt::new(vec![1, 2, 3], vec![Span::new(0, 2), Span::new(1, 1)]).is_err());
        assert!(TaggedPrompt::new(vec![1, 2, 3], vec![Span::new(0, 0)]).is_err());
        assert!(TaggedPrompt::new(vec![1, 2, 3], vec![Span::new(0, 1), Span::new(1, 2)]).is_ok());
    }
}
