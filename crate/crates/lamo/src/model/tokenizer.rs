//! Byte-level tokenizer: 256 byte values plus BOS/EOS/PAD specials.
//!
//! Exactly reversible on any UTF-8 text and needs no external assets; the
//! cost is longer sequences than a subword scheme.

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    /// Text to byte tokens. Specials are never produced here; callers add
    /// BOS/EOS explicitly.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Tokens back to text; special tokens are skipped. Lossless inverse of
    /// `encode` for any UTF-8 input.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < BYTE_VOCAB as u32)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn token_count(&self, text: &str) -> usize {
        text.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_do_not_collide_with_bytes() {
        assert!(BOS >= BYTE_VOCAB as u32);
        assert!(EOS >= BYTE_VOCAB as u32);
        assert!(PAD >= BYTE_VOCAB as u32);
        assert_eq!(VOCAB_SIZE, 259);
    }

    #[test]
    fn ascii_round_trip() {
        let t = Tokenizer;
        let s = "Candidate drug: Velanmab.";
        assert_eq!(t.decode(&t.encode(s)), s);
    }

    proptest! {
        #[test]
        fn round_trip_any_utf8(s in "\\PC{0,64}") {
            let t = Tokenizer;
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}
