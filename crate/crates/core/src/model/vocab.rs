//! Word-level vocabulary and prompt tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Words of the class-prompt template, in order.
pub const TEMPLATE: [&str; 4] = ["a", "photo", "of", "a"];

/// Closed word-level vocabulary with reserved pad/BOS/EOS ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Builds a vocabulary holding the specials, the template words, then
    /// `words` in first-seen order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let extra = TEMPLATE.iter().map(|s| s.to_string()).chain(words.into_iter().map(|w| w.as_ref().to_string()));
        for w in extra {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        all.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `[BOS, words.., EOS]` padded with PAD to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Input("cannot tokenize empty text".into()));
        }
        let unknown: Vec<&str> = words.iter().copied().filter(|w| self.id(w).is_none()).collect();
        if !unknown.is_empty() {
            return Err(Error::Input(format!("unknown word(s): {}", unknown.join(", "))));
        }
        if words.len() + 2 > max_len {
            return Err(Error::Input(format!(
                "\"{text}\" needs {} tokens but max length is {max_len}",
                words.len() + 2
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w).expect("checked above")));
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(ids)
    }
}

/// Tokenized class prompt `a photo of a <class name>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub class_name: String,
    pub tokens: Vec<u32>,
}

impl ClassPrompt {
    /// Index of the EOS token.
    pub fn eos_position(&self) -> usize {
        self.tokens.iter().position(|&t| t == EOS).expect("prompt carries an EOS token")
    }

    /// Tokens that spell the class name.
    pub fn class_tokens(&self) -> &[u32] {
        &self.tokens[1 + TEMPLATE.len()..self.eos_position()]
    }
}

pub fn tokenize_prompt(class_name: &str, vocab: &Vocabulary, max_len: usize) -> Result<ClassPrompt> {
    if class_name.trim().is_empty() {
        return Err(Error::Input("class name is empty".into()));
    }
    let text = format!("{} {}", TEMPLATE.join(" "), class_name);
    let tokens = vocab.encode(&text, max_len)?;
    Ok(ClassPrompt { class_name: class_name.to_string(), tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["dog", "cat", "red", "square"])
    }

    #[test]
    fn dog_prompt_layout() {
        let v = vocab();
        let p = tokenize_prompt("dog", &v, 16).unwrap();
        let ids = |w: &str| v.id(w).unwrap();
        let mut expected = vec![BOS, ids("a"), ids("photo"), ids("of"), ids("a"), ids("dog"), EOS];
        expected.resize(16, PAD);
        assert_eq!(p.tokens, expected);
        assert_eq!(p.eos_position(), 6);
        assert_eq!(p.class_tokens(), &[ids("dog")]);
        // ids are assigned specials, template words, then class words
        assert_eq!((ids("a"), ids("photo"), ids("of"), ids("dog")), (3, 4, 5, 6));
    }

    #[test]
    fn empty_and_unknown_names_fail() {
        let v = vocab();
        assert!(matches!(tokenize_prompt("", &v, 16), Err(Error::Input(_))));
        let err = tokenize_prompt("blue dog", &v, 16).unwrap_err().to_string();
        assert!(err.contains("blue"), "{err}");
        assert!(tokenize_prompt("red square dog cat dog cat dog cat dog cat dog", &v, 16).is_err());
    }

    #[test]
    fn distinct_classes_differ_only_in_class_slots() {
        let v = vocab();
        let a = tokenize_prompt("dog", &v, 16).unwrap();
        let b = tokenize_prompt("cat", &v, 16).unwrap();
        let diff: Vec<usize> = (0..16).filter(|&i| a.tokens[i] != b.tokens[i]).collect();
        assert_eq!(diff, vec![5]);
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
