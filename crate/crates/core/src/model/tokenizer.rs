//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by BOS, EOS and
//! two reserved ids.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Bytes for the given ids; special ids produce no output.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

pub fn decode_lossy(tokens: &[u32]) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_specials_skipped() {
        let ids = encode("hé".as_bytes());
        assert_eq!(ids.len(), 3);
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(BOS);
        assert_eq!(decode_lossy(&with_eos), "hé");
    }
}
