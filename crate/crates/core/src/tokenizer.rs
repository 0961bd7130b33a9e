//! Byte-level tokenizer.
//!
//! Ids 0..=255 are raw UTF-8 bytes; id 256 is the padding token used only for
//! batch alignment. There are no BOS/EOS tokens: sequences are fed to the
//! model as bare concatenations.

use crate::error::{Error, Result};

/// Token id in `[0, VOCAB_SIZE)`.
pub type TokenId = u16;

/// Padding id; never attended, never scored.
pub const PAD: TokenId = 256;

/// 256 byte values plus PAD.
pub const VOCAB_SIZE: usize = 257;

/// Encode text as its UTF-8 bytes. Total length equals the byte length.
pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode`]. Fails on PAD ids or if the bytes are not valid UTF-8.
pub fn decode(tokens: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t >= 256 {
            return Err(Error::InvalidConfig(format!(
                "cannot decode non-byte token id {t}"
            )));
        }
        bytes.push(t as u8);
    }
    String::from_utf8(bytes)
        .map_err(|e| Error::InvalidConfig(format!("token stream is not valid UTF-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_encodes_to_nothing() {
        assert_eq!(encode(""), Vec::<TokenId>::new());
        assert_eq!(decode(&[]).unwrap(), "");
    }

    #[test]
    fn byte_identity() {
        assert_eq!(encode("\n"), vec![10]);
        assert_eq!(encode("ab\nc"), vec![97, 98, 10, 99]);
        assert_eq!(decode(&[104, 105]).unwrap(), "hi");
    }

    #[test]
    fn pad_is_rejected() {
        assert!(decode(&[104, PAD]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(s in ".*") {
            let toks = encode(&s);
            prop_assert_eq!(toks.len(), s.len());
            prop_assert_eq!(decode(&toks).unwrap(), s);
        }
    }
}
