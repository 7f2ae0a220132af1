//! Byte-level BPE tokenizer compatible with CLIP's `vocab.json` and
//! `merges.txt`.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{CsawError, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    pattern: Regex,
}

/// The printable-character stand-ins for raw bytes used by byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut map = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        map[b as usize] = char::from_u32(c).unwrap();
    }
    map
}

impl BpeTokenizer {
    pub fn new(encoder: HashMap<String, u32>, merges: &[(String, String)]) -> Result<Self> {
        for special in [START_TOKEN, END_TOKEN] {
            if !encoder.contains_key(special) {
                return Err(CsawError::Config(format!("vocabulary lacks {special}")));
            }
        }
        let ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(BpeTokenizer {
            encoder,
            ranks,
            byte_map: bytes_to_unicode(),
            pattern,
        })
    }

    /// Reads `vocab.json` and `merges.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let merges_path = dir.join("merges.txt");
        let vocab = std::fs::read_to_string(&vocab_path).map_err(|e| CsawError::io(&vocab_path, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab)?;
        let merges_txt =
            std::fs::read_to_string(&merges_path).map_err(|e| CsawError::io(&merges_path, e))?;
        let merges: Vec<(String, String)> = merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                Some((it.next()?.to_string(), it.next()?.to_string()))
            })
            .collect();
        Self::new(encoder, &merges)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|r| (*r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
            if parts.len() == 1 {
                break;
            }
        }
        parts
    }

    /// Token ids for `text`, without start/end markers.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let word: String = m.as_str().bytes().map(|b| self.byte_map[b as usize]).collect();
            for piece in self.bpe(&word) {
                let id = self.encoder.get(&piece).ok_or_else(|| {
                    CsawError::Config(format!("token `{piece}` missing from vocabulary"))
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }
}
