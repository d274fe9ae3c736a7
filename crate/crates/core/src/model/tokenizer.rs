// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level tokenizer over a fixed vocabulary.
//!
//! Text is lowercased and split on whitespace; punctuation characters become
//! tokens of their own. Words missing from the vocabulary map to `<unk>`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

const BUILTIN_WORDS: &str = "
. , ' ? ! : ; - ( ) 0 1 2 3 4 5 6 7 8 9
the a an and or but of to in on at by for with from as is are was were be been
it its this that these those he she they we you i his her their our my your him them us
not no yes all some any many more most few one two three four five six seven eight nine ten
first last new old big small long short good bad high low early late next other same own
year years day days week month time people man woman child children city country world
government minister president police court report news company market bank school team
game match club player players fans music film book water food health hospital police
said says say told asked made make said found find took take gave give went go came come
will would can could should may might must has have had do does did said after before
over under about into out up down off than then there here when where who what which why how
new first against during while between because since until also only just still even
cat dog sat ran mat mats bird tree house car road river park garden door window room
rain sun snow wind storm weather cold hot warm spring summer autumn winter morning night
price prices rise rose fall fell plan plans vote votes election party leader leaders
war peace army troops attack attacks deal talks meeting meetings people public service
fire firefighters flood floods village town station train bus airport flight flights
study studies scientists research data results health patients doctors drug vaccine
win won lose lost beat score scored goal goals final season league cup coach
open opened close closed start started end ended announced announces launched
";

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a tokenizer from an ordered token list. The four special
    /// tokens are inserted at ids 0..4 when missing.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if !list.contains(&t) {
                list.push(t);
            }
        }
        let mut tok = Tokenizer {
            tokens: list,
            index: HashMap::new(),
        };
        tok.reindex();
        tok
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn builtin() -> Self {
        Self::from_tokens(BUILTIN_WORDS.split_whitespace())
    }

    /// Reads `vocab.json`, a JSON array of token strings in id order.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, text).map_err(|e| Error::path(path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn bos_id(&self) -> TokenId {
        1
    }

    pub fn eos_id(&self) -> TokenId {
        2
    }

    pub fn unk_id(&self) -> TokenId {
        3
    }

    /// Splits text into lowercase word and punctuation pieces.
    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut cur = String::new();
            for ch in word.chars() {
                if ch.is_alphanumeric() {
                    cur.extend(ch.to_lowercase());
                } else {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(ch.to_string());
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        Self::pieces(text)
            .iter()
            .map(|p| self.index.get(p).copied().unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Joins tokens with spaces, dropping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i > self.unk_id())
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_the_first_ids() {
        let t = Tokenizer::builtin();
        assert_eq!(t.token(0), PAD);
        assert_eq!(t.token(2), EOS);
        assert!(t.vocab_size() > 200);
    }

    #[test]
    fn punctuation_splits_and_unknown_words_map_to_unk() {
        let t = Tokenizer::builtin();
        assert_eq!(Tokenizer::pieces("The cat, sat."), ["the", "cat", ",", "sat", "."]);
        let ids = t.encode("The zyzzyva sat");
        assert_eq!(ids[1], t.unk_id());
        assert_eq!(t.decode(&ids), "the sat");
    }
}
