use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id reserved for "no emission" in every vocabulary.
pub const BLANK: usize = 0;

/// Display strings for token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub blank: usize,
    pub tokens: Vec<String>,
}

const ONSETS: [&str; 8] = ["k", "m", "t", "s", "n", "r", "b", "l"];
const NUCLEI: [&str; 5] = ["a", "i", "u", "e", "o"];

impl Vocab {
    /// `size` tokens: blank plus consonant-vowel syllables.
    pub fn synthetic(size: usize) -> Self {
        let mut tokens = Vec::with_capacity(size);
        tokens.push("<blank>".to_string());
        for i in 0..size.saturating_sub(1) {
            let onset = ONSETS[i % ONSETS.len()];
            let nucleus = NUCLEI[(i / ONSETS.len() + i) % NUCLEI.len()];
            let round = i / (ONSETS.len() * NUCLEI.len());
            if round == 0 {
                tokens.push(format!("{onset}{nucleus}"));
            } else {
                tokens.push(format!("{onset}{nucleus}{round}"));
            }
        }
        Vocab { blank: BLANK, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token {id} outside vocabulary of {}", self.tokens.len())))
    }

    /// Space-joined display string of a token sequence.
    pub fn render(&self, ids: &[usize]) -> Result<String> {
        let names = ids.iter().map(|&i| self.name(i)).collect::<Result<Vec<_>>>()?;
        Ok(names.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_names_are_unique() {
        let v = Vocab::synthetic(60);
        let mut names = v.tokens.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 60);
        assert_eq!(v.name(BLANK).unwrap(), "<blank>");
        assert_eq!(v.render(&[1, 2]).unwrap(), format!("{} {}", v.tokens[1], v.tokens[2]));
        assert!(v.name(60).is_err());
    }
}
