use serde::{Deserialize, Serialize};

/// One spatiotemporal token: a location id and a slot-of-week.
///
/// Serialized as a `[loc, slot]` pair.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, u32)", into = "(usize, u32)")]
pub struct Token {
    pub loc: usize,
    pub slot: u32,
}

impl Token {
    pub fn new(loc: usize, slot: u32) -> Self {
        Token { loc, slot }
    }
}

impl From<(usize, u32)> for Token {
    fn from((loc, slot): (usize, u32)) -> Self {
        Token { loc, slot }
    }
}

impl From<Token> for (usize, u32) {
    fn from(t: Token) -> Self {
        (t.loc, t.slot)
    }
}

/// A visit sequence in one city. Slots are slot-of-week indices; successive
/// slots never go backwards except when wrapping past the end of the week,
/// and the gap between two tokens is always read modulo one week.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub city_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<u64>,
    pub tokens: Vec<Token>,
}

impl Trajectory {
    pub fn new(city_id: u32, tokens: Vec<Token>) -> Self {
        Trajectory {
            city_id,
            user_id: None,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn locations(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().map(|t| t.loc)
    }

    pub fn slots(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().map(|t| t.slot)
    }
}
