use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = u32;

/// A non-empty sequence of token ids.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence must be non-empty"));
        }
        Ok(TokenSeq(tokens))
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl TryFrom<Vec<TokenId>> for TokenSeq {
    type Error = Error;

    fn try_from(tokens: Vec<TokenId>) -> Result<Self> {
        TokenSeq::new(tokens)
    }
}

impl From<TokenSeq> for Vec<TokenId> {
    fn from(seq: TokenSeq) -> Self {
        seq.0
    }
}

impl fmt::Debug for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}
