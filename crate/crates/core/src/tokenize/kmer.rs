use super::{TokenizeError, TokenizerSpec, N_SPECIAL, UNK};

pub const MAX_K: usize = 12;
const BASES: [u8; 4] = *b"ACGT";

pub fn kmer_tokenizer(k: usize) -> Result<TokenizerSpec, TokenizeError> {
    if !(1..=MAX_K).contains(&k) {
        return Err(TokenizeError::KOutOfRange(k));
    }
    Ok(TokenizerSpec::from_kmer(k))
}

#[inline]
fn base_digit(b: u8) -> Option<usize> {
    match b {
        b'A' => Some(0),
        b'C' => Some(1),
        b'G' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

/// Base-4 big-endian index of a k-mer (A=0, C=1, G=2, T=3).
pub(crate) fn kmer_index(chunk: &[u8], k: usize) -> Option<usize> {
    if chunk.len() != k {
        return None;
    }
    chunk.iter().try_fold(0usize, |acc, &b| base_digit(b).map(|d| acc * 4 + d))
}

pub(crate) fn kmer_string(mut index: usize, k: usize) -> String {
    let mut out = vec![b'A'; k];
    for slot in out.iter_mut().rev() {
        *slot = BASES[index % 4];
        index /= 4;
    }
    String::from_utf8(out).expect("ascii")
}

/// Non-overlapping windows of `k` characters; the short tail is dropped and
/// any window with a non-ACGT character becomes UNK.
pub(crate) fn encode(text: &str, k: usize) -> Vec<usize> {
    let chars: Vec<char> = text.chars().collect();
    chars
        .chunks_exact(k)
        .map(|chunk| {
            let bytes: Option<Vec<u8>> = chunk.iter().map(|&c| if c.is_ascii() { Some(c as u8) } else { None }).collect();
            bytes.and_then(|b| kmer_index(&b, k)).map(|i| i + N_SPECIAL).unwrap_or(UNK)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn index_formula() {
        let t = kmer_tokenizer(6).unwrap();
        assert_eq!(t.encode("AAAAAA"), vec![3]);
        assert_eq!(t.encode("AAAAAC"), vec![4]);
        // 1*4^4 + 2*4^3 + 3*4^2 + 0*4 + 1 = 433
        assert_eq!(t.encode("ACGTAC"), vec![436]);
    }

    #[test]
    fn vocab_sizes() {
        assert_eq!(kmer_tokenizer(6).unwrap().vocab_size(), 4099);
        assert_eq!(kmer_tokenizer(1).unwrap().vocab_size(), 7);
        assert!(matches!(kmer_tokenizer(0), Err(TokenizeError::KOutOfRange(0))));
        assert!(kmer_tokenizer(13).is_err());
    }

    #[test]
    fn tail_dropped_and_unk() {
        let t = kmer_tokenizer(3).unwrap();
        assert_eq!(t.encode("ACGTA"), vec![t.id_of("ACG").unwrap()]);
        assert_eq!(t.encode("ANGTTT"), vec![UNK, t.id_of("TTT").unwrap()]);
        assert_eq!(t.encode("AC\u{e9}"), vec![UNK]);
    }

    #[test]
    fn bijection_full_for_small_k() {
        for k in 1..=3 {
            let t = kmer_tokenizer(k).unwrap();
            let mut seen = HashSet::new();
            for idx in 0..4usize.pow(k as u32) {
                let s = kmer_string(idx, k);
                assert_eq!(kmer_index(s.as_bytes(), k), Some(idx));
                assert!(seen.insert(s.clone()));
                assert_eq!(t.encode(&s), vec![idx + N_SPECIAL]);
            }
        }
    }

    #[test]
    fn bijection_sampled_up_to_6() {
        let mut rng = crate::numeric::Rng::new(1);
        for k in 4..=6 {
            for _ in 0..2000 {
                let idx = rng.below(4usize.pow(k as u32));
                assert_eq!(kmer_index(kmer_string(idx, k).as_bytes(), k), Some(idx));
            }
        }
    }
}
