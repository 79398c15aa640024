use std::collections::HashSet;

use crate::error::{Error, Result};

/// Token inventory with the reserved CTC blank and `<MASK>` symbols.
///
/// Indices are dense. The mask symbol occupies the last index, so the
/// symbols a CTC lattice can emit (tokens plus blank) are exactly
/// `0..mask_id`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    blank_id: usize,
    mask_id: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, blank_id: usize, mask_id: usize) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::usage(
                "vocabulary needs at least one token plus blank and mask",
            ));
        }
        if blank_id >= tokens.len() || mask_id >= tokens.len() {
            return Err(Error::usage(format!(
                "blank ({blank_id}) or mask ({mask_id}) index out of range for {} symbols",
                tokens.len()
            )));
        }
        if blank_id == mask_id {
            return Err(Error::usage("blank and mask must be distinct symbols"));
        }
        if mask_id != tokens.len() - 1 {
            return Err(Error::usage(format!(
                "mask must be the last symbol (index {}), got {mask_id}",
                tokens.len() - 1
            )));
        }
        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(Error::usage(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            blank_id,
            mask_id,
        })
    }

    /// `n` tokens named `a`, `b`, ... followed by `<blank>` and `<mask>`.
    pub fn letters(n: usize) -> Self {
        let mut tokens: Vec<String> = (0..n)
            .map(|i| {
                if i < 26 {
                    char::from(b'a' + i as u8).to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        tokens.push("<blank>".into());
        tokens.push("<mask>".into());
        Vocabulary::new(tokens, n, n + 1).expect("letters vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    /// Columns of a posterior lattice over this vocabulary (tokens + blank).
    pub fn lattice_width(&self) -> usize {
        self.mask_id
    }

    /// Number of regular tokens |U|.
    pub fn num_tokens(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Ids of all symbols that may fill a masked slot.
    pub fn fill_ids(&self) -> Vec<usize> {
        (0..self.lattice_width())
            .filter(|&i| i != self.blank_id)
            .collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Renders ids with the vocabulary's token strings, space separated.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses a space- or comma-separated sequence of token strings or numeric ids.
    pub fn parse_sequence(&self, text: &str) -> Result<Vec<usize>> {
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                let id = self
                    .id_of(s)
                    .or_else(|| s.parse::<usize>().ok())
                    .ok_or_else(|| Error::usage(format!("unknown token {s:?}")))?;
                if id == self.blank_id || id == self.mask_id || id >= self.len() {
                    return Err(Error::usage(format!(
                        "{s:?} is not a regular token of the vocabulary"
                    )));
                }
                Ok(id)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_layout() {
        let v = Vocabulary::letters(3);
        assert_eq!(v.len(), 5);
        assert_eq!(v.blank_id(), 3);
        assert_eq!(v.mask_id(), 4);
        assert_eq!(v.lattice_width(), 4);
        assert_eq!(v.fill_ids(), vec![0, 1, 2]);
        assert_eq!(v.render(&[0, 2]), "a c");
    }

    #[test]
    fn rejects_bad_layouts() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocabulary::new(toks(&["a", "-", "m"]), 1, 1).is_err());
        assert!(Vocabulary::new(toks(&["a", "a", "-", "m"]), 2, 3).is_err());
        assert!(Vocabulary::new(toks(&["a", "m", "-"]), 2, 1).is_err());
        assert!(Vocabulary::new(toks(&["-", "a", "m"]), 0, 2).is_ok());
    }

    #[test]
    fn parse_sequence_accepts_names_and_ids() {
        let v = Vocabulary::letters(3);
        assert_eq!(v.parse_sequence("a c b").unwrap(), vec![0, 2, 1]);
        assert_eq!(v.parse_sequence("0,2").unwrap(), vec![0, 2]);
        assert!(v.parse_sequence("<blank>").is_err());
        assert!(v.parse_sequence("zz").is_err());
    }
}
