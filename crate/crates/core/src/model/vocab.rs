use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";

/// Output units shared by the CTC and attention heads.
///
/// Index 0 is blank, 1 is sos, 2 is eos; transcript tokens follow. Blank
/// stays in the attention head's output layer so that CTC and attention
/// scores are defined over the same set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const BLANK_ID: usize = 0;
    pub const SOS_ID: usize = 1;
    pub const EOS_ID: usize = 2;

    /// Prepends blank/sos/eos to the given transcript tokens.
    pub fn with_specials<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens = vec![BLANK.to_string(), SOS.to_string(), EOS.to_string()];
        tokens.extend(symbols.iter().map(|s| s.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Vocabulary of `size` units with placeholder token names.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 4 {
            return Err(Error::Config(format!("vocabulary size {size} < 4")));
        }
        let symbols: Vec<String> = (3..size).map(|i| format!("u{i}")).collect();
        Self::with_specials(&symbols)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4
            || tokens[0] != BLANK
            || tokens[1] != SOS
            || tokens[2] != EOS
        {
            return Err(Error::Config(format!(
                "vocabulary must start with {BLANK} {SOS} {EOS} and hold at least one token"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        Self::BLANK_ID
    }

    pub fn sos(&self) -> usize {
        Self::SOS_ID
    }

    pub fn eos(&self) -> usize {
        Self::EOS_ID
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-separated transcript to ids. Special symbols are rejected.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| match self.id(t) {
                Some(i) if i > Self::EOS_ID => Ok(i),
                Some(_) => Err(Error::Input(format!("special symbol {t} in transcript"))),
                None => Err(Error::Input(format!("unknown token {t:?}"))),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
