use crate::error::{Error, Result};
use crate::scenes::ShapeKind;

pub const PAD: usize = 0;
pub const BACKGROUND: usize = 1;
const FIRST_SHAPE: usize = 2;

/// Fixed vocabulary: padding, background, then one word per shape kind.
pub const VOCAB_SIZE: usize = FIRST_SHAPE + ShapeKind::ALL.len();

pub fn token_for(kind: ShapeKind) -> usize {
    FIRST_SHAPE + kind.index()
}

pub fn kind_of(token: usize) -> Option<ShapeKind> {
    token
        .checked_sub(FIRST_SHAPE)
        .and_then(|i| ShapeKind::ALL.get(i).copied())
}

pub fn word(token: usize) -> Option<&'static str> {
    match token {
        PAD => Some("<pad>"),
        BACKGROUND => Some("<bg>"),
        t => kind_of(t).map(ShapeKind::name),
    }
}

pub fn words() -> Vec<&'static str> {
    (0..VOCAB_SIZE).filter_map(word).collect()
}

/// Parses free text such as `"a circle and a square"`; filler words are skipped.
pub fn parse_prompt(text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for raw in text.split(|c: char| c.is_whitespace() || c == ',') {
        let w = raw.trim().to_ascii_lowercase();
        let w = w
            .strip_suffix('s')
            .filter(|s| ShapeKind::from_name(s).is_some())
            .map(str::to_string)
            .unwrap_or(w);
        match w.as_str() {
            "" | "a" | "an" | "and" | "the" | "with" => {}
            _ => match ShapeKind::from_name(&w) {
                Some(k) => ids.push(token_for(k)),
                None => return Err(Error::Validation(format!("unknown prompt word {raw:?}"))),
            },
        }
    }
    Ok(ids)
}
