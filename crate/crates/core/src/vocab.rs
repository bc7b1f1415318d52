use serde::{Deserialize, Serialize};

/// The default transcript alphabet: lowercase letters, space, apostrophe.
pub const ENGLISH_CHARS: &str = "abcdefghijklmnopqrstuvwxyz '";

/// Ordered character set with the CTC blank at label 0; character `i` has
/// label `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("duplicate character {0:?} in vocabulary")]
    Duplicate(char),
    #[error("vocabulary is empty")]
    Empty,
    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self, VocabError> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(VocabError::Empty);
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(VocabError::Duplicate(*c));
            }
        }
        Ok(Self { chars })
    }

    pub fn english() -> Self {
        Self::new(ENGLISH_CHARS.chars()).expect("default alphabet is valid")
    }

    pub const BLANK: usize = 0;

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of characters, excluding the blank.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Number of output labels including the blank.
    pub fn n_labels(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn label(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + 1)
    }

    pub fn char_of(&self, label: usize) -> Option<char> {
        label.checked_sub(1).and_then(|i| self.chars.get(i).copied())
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.contains(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, VocabError> {
        text.chars()
            .map(|c| self.label(c).ok_or(VocabError::OutOfVocabulary(c)))
            .collect()
    }

    /// Maps labels to text, skipping blanks and unknown labels.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.char_of(l)).collect()
    }

    pub fn space_label(&self) -> Option<usize> {
        self.label(' ')
    }
}
