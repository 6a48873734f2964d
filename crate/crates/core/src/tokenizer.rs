//! Byte-level vocabulary: ids 0..=255 are bytes, then three specials.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB: usize = 259;

/// `[BOS, bytes…, EOS]`.
pub fn tokenize(text: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    out.extend(text.iter().map(|&b| b as usize));
    out.push(EOS);
    out
}

/// Bytes of `ids` with the special tokens dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            BOS | EOS | PAD => {}
            _ => return Err(Error::input(format!("token id {id} outside the byte vocabulary"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize(b""), vec![BOS, EOS]);
        assert_eq!(tokenize(b"A"), vec![256, 65, 257]);
        assert!(matches!(detokenize(&[65, 259]), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn round_trip(bytes in prop::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }
    }
}
