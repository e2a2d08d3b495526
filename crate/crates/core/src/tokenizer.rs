//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by BOS and EOS.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|b| *b as u32).collect()
}

/// `encode` with a leading BOS.
pub fn encode_with_bos(text: &[u8]) -> Vec<u32> {
    std::iter::once(BOS).chain(text.iter().map(|b| *b as u32)).collect()
}

/// Bytes of the byte-valued ids; special ids are dropped.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|id| **id < 256).map(|id| *id as u8).collect()
}

/// Printable label for one token, used in CSV headers.
pub fn token_label(id: u32) -> String {
    match id {
        BOS => "<bos>".to_string(),
        EOS => "<eos>".to_string(),
        b @ 0x21..=0x7e => char::from(b as u8).to_string(),
        0x20 => "<sp>".to_string(),
        b if b < 256 => format!("<0x{b:02X}>"),
        other => format!("<{other}>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_labels() {
        let ids = encode_with_bos(b"ab\n");
        assert_eq!(ids, vec![BOS, 97, 98, 10]);
        assert_eq!(decode(&ids), b"ab\n");
        assert_eq!(token_label(97), "a");
        assert_eq!(token_label(10), "<0x0A>");
        assert_eq!(token_label(EOS), "<eos>");
    }
}
