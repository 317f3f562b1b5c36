//! Character vocabulary and tokenized training examples.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// Separates the prompt from the target inside a tokenized sequence.
pub const PROMPT_END: char = '\n';

const SPECIALS: usize = 3;
const CHARS: &str = "\n 0123456789+-*=:>,;().abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    lookup: [Option<u32>; 128],
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let chars: Vec<char> = CHARS.chars().collect();
        let mut lookup = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            lookup[c as usize] = Some((i + SPECIALS) as u32);
        }
        Vocabulary { chars, lookup }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn id(&self, c: char) -> Option<u32> {
        if (c as u32) < 128 {
            self.lookup[c as usize]
        } else {
            None
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| Error::Vocabulary(format!("character {c:?} is not in the vocabulary"))))
            .collect()
    }

    /// Special tokens decode to nothing.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter_map(|&t| (t as usize).checked_sub(SPECIALS).and_then(|i| self.chars.get(i)))
            .collect()
    }

    pub fn symbol(&self, token: u32) -> Option<String> {
        match token {
            PAD => Some("<pad>".into()),
            BOS => Some("<bos>".into()),
            EOS => Some("<eos>".into()),
            t => self.chars.get(t as usize - SPECIALS).map(|c| c.to_string()),
        }
    }

    /// `BOS prompt PROMPT_END`: the context a completion is conditioned on.
    pub fn prompt_tokens(&self, prompt: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(prompt.len() + 2);
        out.push(BOS);
        out.extend(self.encode(prompt)?);
        out.push(self.id(PROMPT_END).expect("newline is in the vocabulary"));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedExample {
    pub tokens: Vec<u32>,
    /// `loss_mask[t]` marks positions whose token is predicted and scored.
    pub loss_mask: Vec<bool>,
}

impl TokenizedExample {
    pub fn new(vocab: &Vocabulary, prompt: &str, target: &str) -> Result<Self> {
        let mut tokens = vocab.prompt_tokens(prompt)?;
        let context = tokens.len();
        tokens.extend(vocab.encode(target)?);
        tokens.push(EOS);
        let loss_mask = (0..tokens.len()).map(|i| i >= context).collect();
        Ok(TokenizedExample { tokens, loss_mask })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn scored(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}
