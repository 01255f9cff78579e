//! Byte-pair encoding over characters.
//!
//! Training keeps every pre-token as a doubly linked list of symbols plus a
//! position index per adjacent pair, so each merge touches only the places
//! where the merged pair occurs. That keeps a single multi-megabase DNA
//! "word" tractable.

use std::collections::{BTreeMap, BinaryHeap, HashMap};

use super::{pretokenize, BpeModel, TokenizeError, TokenizerSpec, N_SPECIAL, SPECIAL_TOKENS, UNK};

type Pair = (u32, u32);
const NONE: u32 = u32::MAX;

struct Word {
    sym: Vec<u32>,
    prev: Vec<u32>,
    next: Vec<u32>,
    alive: Vec<bool>,
    weight: i64,
}

struct Trainer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    words: Vec<Word>,
    counts: HashMap<Pair, i64>,
    positions: HashMap<Pair, Vec<(u32, u32)>>,
    heap: BinaryHeap<(i64, Pair)>,
}

impl Trainer {
    fn bump(&mut self, pair: Pair, delta: i64, at: Option<(u32, u32)>) {
        let c = self.counts.entry(pair).or_insert(0);
        *c += delta;
        let now = *c;
        if now <= 0 {
            self.counts.remove(&pair);
        } else if delta > 0 {
            self.heap.push((now, pair));
        }
        if let Some(pos) = at {
            self.positions.entry(pair).or_default().push(pos);
        }
    }

    fn pair_key(&self, p: Pair) -> (&str, &str) {
        (&self.vocab[p.0 as usize], &self.vocab[p.1 as usize])
    }

    /// Most frequent pair; ties go to the lexicographically smallest
    /// (left, right) string pair.
    fn best_pair(&mut self) -> Option<Pair> {
        let top = loop {
            let (count, pair) = self.heap.pop()?;
            if self.counts.get(&pair) == Some(&count) {
                break (count, pair);
            }
        };
        let count = top.0;
        let mut tied = vec![top.1];
        while let Some(&(c, p)) = self.heap.peek() {
            if c != count {
                break;
            }
            self.heap.pop();
            if self.counts.get(&p) == Some(&c) && !tied.contains(&p) {
                tied.push(p);
            }
        }
        tied.sort_by(|a, b| self.pair_key(*a).cmp(&self.pair_key(*b)));
        let best = tied[0];
        for &p in &tied[1..] {
            self.heap.push((count, p));
        }
        Some(best)
    }

    fn apply(&mut self, pair: Pair, new_id: u32) {
        let mut occ = self.positions.remove(&pair).unwrap_or_default();
        occ.sort_unstable();
        occ.dedup();
        for (w, i) in occ {
            let (wi, i) = (w as usize, i as usize);
            let word = &self.words[wi];
            if !word.alive[i] || word.sym[i] != pair.0 {
                continue;
            }
            let j = word.next[i];
            if j == NONE || word.sym[j as usize] != pair.1 {
                continue;
            }
            let j = j as usize;
            let weight = word.weight;
            let p = word.prev[i];
            let n = word.next[j];
            if p != NONE {
                let left = word.sym[p as usize];
                self.bump((left, pair.0), -weight, None);
                self.bump((left, new_id), weight, Some((w, p)));
            }
            if n != NONE {
                let right = self.words[wi].sym[n as usize];
                self.bump((pair.1, right), -weight, None);
                self.bump((new_id, right), weight, Some((w, i as u32)));
            }
            self.bump(pair, -weight, None);
            let word = &mut self.words[wi];
            word.sym[i] = new_id;
            word.next[i] = n;
            if n != NONE {
                word.prev[n as usize] = i as u32;
            }
            word.alive[j] = false;
        }
        self.counts.remove(&pair);
    }
}

/// Trains a BPE tokenizer reaching exactly `target_vocab` entries
/// (specials included).
pub fn train_bpe(docs: &[String], target_vocab: usize) -> Result<TokenizerSpec, TokenizeError> {
    let mut freq: BTreeMap<String, i64> = BTreeMap::new();
    for d in docs {
        for w in pretokenize(d) {
            *freq.entry(w.into_owned()).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut chars: Vec<char> = freq.keys().flat_map(|w| w.chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    let min = N_SPECIAL + chars.len();
    if target_vocab <= min {
        return Err(TokenizeError::TargetTooSmall { target: target_vocab, min, base: chars.len() });
    }

    let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    vocab.extend(chars.iter().map(|c| c.to_string()));
    let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let char_id: HashMap<char, u32> = chars.iter().enumerate().map(|(i, &c)| (c, (i + N_SPECIAL) as u32)).collect();

    let mut t = Trainer {
        vocab,
        index,
        words: Vec::with_capacity(freq.len()),
        counts: HashMap::new(),
        positions: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    for (wi, (w, &weight)) in freq.iter().enumerate() {
        let sym: Vec<u32> = w.chars().map(|c| char_id[&c]).collect();
        let n = sym.len();
        let word = Word {
            prev: (0..n).map(|i| if i == 0 { NONE } else { (i - 1) as u32 }).collect(),
            next: (0..n).map(|i| if i + 1 == n { NONE } else { (i + 1) as u32 }).collect(),
            alive: vec![true; n],
            sym,
            weight,
        };
        for i in 0..n.saturating_sub(1) {
            let pair = (word.sym[i], word.sym[i + 1]);
            *t.counts.entry(pair).or_insert(0) += weight;
            t.positions.entry(pair).or_default().push((wi as u32, i as u32));
        }
        t.words.push(word);
    }
    for (&p, &c) in &t.counts {
        t.heap.push((c, p));
    }

    let mut merges = Vec::new();
    while t.vocab.len() < target_vocab {
        let Some(pair) = t.best_pair() else {
            return Err(TokenizeError::Exhausted { achieved: t.vocab.len(), target: target_vocab });
        };
        let merged = format!("{}{}", t.vocab[pair.0 as usize], t.vocab[pair.1 as usize]);
        let new_id = match t.index.get(&merged) {
            Some(&id) => id,
            None => {
                t.vocab.push(merged.clone());
                t.index.insert(merged, t.vocab.len() - 1);
                t.vocab.len() - 1
            }
        };
        t.apply(pair, new_id as u32);
        merges.push((pair.0 as usize, pair.1 as usize, new_id));
    }

    let ranks = merges.iter().enumerate().map(|(r, &(a, b, c))| ((a, b), (r, c))).collect();
    let base = char_id.into_iter().map(|(c, id)| (c, id as usize)).collect();
    Ok(TokenizerSpec::from_bpe(BpeModel { vocab: t.vocab, index: t.index, merges, ranks, base }))
}

/// Rebuilds a BPE model from its serialized vocabulary and merge list.
pub(crate) fn from_parts(vocab: &[String], merges: &[[String; 2]]) -> Result<TokenizerSpec, TokenizeError> {
    let bad = |m: String| TokenizeError::Malformed(m);
    if vocab.len() < N_SPECIAL || vocab[..N_SPECIAL] != SPECIAL_TOKENS {
        return Err(bad("vocabulary must start with the special tokens".into()));
    }
    let mut index = HashMap::new();
    for (i, s) in vocab.iter().enumerate() {
        if index.insert(s.clone(), i).is_some() {
            return Err(bad(format!("duplicate token {s:?}")));
        }
    }
    let mut base = HashMap::new();
    let mut n_base = 0;
    for (i, s) in vocab.iter().enumerate().skip(N_SPECIAL) {
        let mut cs = s.chars();
        match (cs.next(), cs.next()) {
            (Some(c), None) if i == N_SPECIAL + n_base => {
                base.insert(c, i);
                n_base += 1;
            }
            _ => break,
        }
    }
    let mut ranks = HashMap::new();
    let mut ids = Vec::with_capacity(merges.len());
    for (r, [a, b]) in merges.iter().enumerate() {
        let ia = *index.get(a).ok_or_else(|| bad(format!("merge uses unknown token {a:?}")))?;
        let ib = *index.get(b).ok_or_else(|| bad(format!("merge uses unknown token {b:?}")))?;
        let ic = *index.get(&format!("{a}{b}")).ok_or_else(|| bad(format!("merge result {a}{b:?} missing")))?;
        ranks.insert((ia, ib), (r, ic));
        ids.push((ia, ib, ic));
    }
    if N_SPECIAL + n_base + ids.iter().filter(|m| m.2 >= N_SPECIAL + n_base).count() < vocab.len() {
        return Err(bad("vocabulary has tokens no merge produces".into()));
    }
    Ok(TokenizerSpec::from_bpe(BpeModel { vocab: vocab.to_vec(), index, merges: ids, ranks, base }))
}

/// Applies merges to one pre-token, lowest rank first, left to right.
fn encode_word(m: &BpeModel, word: &str) -> Vec<usize> {
    let mut sym: Vec<usize> = word.chars().map(|c| m.base.get(&c).copied().unwrap_or(UNK)).collect();
    let n = sym.len();
    if n < 2 || m.merges.is_empty() {
        return sym;
    }
    let mut next: Vec<usize> = (1..=n).collect();
    let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
    let mut alive = vec![true; n];
    let mut heap = BinaryHeap::new();
    let rank_of = |a: usize, b: usize| m.ranks.get(&(a, b)).copied();
    for i in 0..n - 1 {
        if let Some((r, _)) = rank_of(sym[i], sym[i + 1]) {
            heap.push(std::cmp::Reverse((r, i)));
        }
    }
    while let Some(std::cmp::Reverse((r, i))) = heap.pop() {
        if !alive[i] || next[i] >= n {
            continue;
        }
        let j = next[i];
        match rank_of(sym[i], sym[j]) {
            Some((rr, c)) if rr == r => {
                sym[i] = c;
                alive[j] = false;
                next[i] = next[j];
                if next[i] < n {
                    prev[next[i]] = i;
                    if let Some((r2, _)) = rank_of(c, sym[next[i]]) {
                        heap.push(std::cmp::Reverse((r2, i)));
                    }
                }
                let p = prev[i];
                if p < n {
                    if let Some((r2, _)) = rank_of(sym[p], c) {
                        heap.push(std::cmp::Reverse((r2, p)));
                    }
                }
            }
            _ => {}
        }
    }
    (0..n).filter(|&i| alive[i]).map(|i| sym[i]).collect()
}

pub(crate) fn encode(m: &BpeModel, text: &str, cache: &mut HashMap<String, Vec<usize>>) -> Vec<usize> {
    let mut out = Vec::new();
    for w in pretokenize(text) {
        if let Some(ids) = cache.get(w.as_ref()) {
            out.extend_from_slice(ids);
            continue;
        }
        let ids = encode_word(m, &w);
        out.extend_from_slice(&ids);
        if w.len() <= 64 {
            cache.insert(w.into_owned(), ids);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "abababab": pairs ab x4, ba x3
        let t = train_bpe(&docs(&["abababab"]), 3 + 2 + 1).unwrap();
        assert_eq!(t.merges(), vec![("a".to_string(), "b".to_string())]);
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(t.id_of("ab"), Some(5));
    }

    #[test]
    fn single_symbol_corpus_exhausts() {
        match train_bpe(&docs(&["a"]), 10) {
            Err(TokenizeError::TargetTooSmall { .. }) | Err(TokenizeError::Exhausted { .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match train_bpe(&docs(&["aaaa"]), 10) {
            // a -> aa -> aaaa, then nothing left to merge
            Err(TokenizeError::Exhausted { achieved, target }) => assert_eq!((achieved, target), (6, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn target_must_exceed_base() {
        assert!(matches!(train_bpe(&docs(&["abc"]), 6), Err(TokenizeError::TargetTooSmall { .. })));
        assert!(matches!(train_bpe(&docs(&[""]), 100), Err(TokenizeError::EmptyCorpus)));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "cd" and "ab" each occur once; "ab" < "cd"
        let t = train_bpe(&docs(&["cd", "ab"]), 3 + 4 + 1).unwrap();
        assert_eq!(t.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn deterministic_training() {
        let d = crate::corpus::gen_grammar_text(1, 300).unwrap();
        let a = train_bpe(&d, 400).unwrap();
        let b = train_bpe(&d, 400).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.vocab_size(), 400);
    }

    #[test]
    fn round_trips() {
        let t = train_bpe(&docs(&["abab", "abba"]), 3 + 2 + 2).unwrap();
        assert_eq!(t.decode(&t.encode("abab")).unwrap(), "abab");
        let d = crate::corpus::gen_grammar_text(2, 200).unwrap();
        let t = train_bpe(&d, 500).unwrap();
        for doc in &d[..20] {
            assert_eq!(t.decode(&t.encode(doc)).unwrap(), *doc);
        }
    }

    #[test]
    fn unknown_symbols_become_unk() {
        let t = train_bpe(&docs(&["abab"]), 6).unwrap();
        assert_eq!(t.encode("abz"), vec![t.id_of("ab").unwrap(), UNK]);
    }

    #[test]
    fn overlapping_runs_merge_left_to_right() {
        let t = train_bpe(&docs(&["aaa"]), 5).unwrap();
        assert_eq!(t.encode("aaa"), vec![t.id_of("aa").unwrap(), t.id_of("a").unwrap()]);
    }

    /// Encoding the training corpus with the learned merges must reproduce
    /// the segmentation reached during training; checked against a naive
    /// quadratic merge loop.
    #[test]
    fn encode_matches_naive_merge_application() {
        let d = crate::corpus::gen_grammar_text(9, 100).unwrap();
        let t = train_bpe(&d, 350).unwrap();
        let merges = t.merges();
        for doc in &d[..10] {
            let mut naive = Vec::new();
            for w in pretokenize(doc) {
                let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
                for (a, b) in &merges {
                    let mut i = 0;
                    let mut out = Vec::new();
                    while i < syms.len() {
                        if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                            out.push(format!("{a}{b}"));
                            i += 2;
                        } else {
                            out.push(syms[i].clone());
                            i += 1;
                        }
                    }
                    syms = out;
                }
                naive.extend(syms.iter().map(|s| t.id_of(s).unwrap()));
            }
            assert_eq!(t.encode(doc), naive);
        }
    }

    #[test]
    fn dna_without_whitespace_trains() {
        let seq = crate::corpus::gen_markov_dna(&crate::corpus::MarkovDnaParams {
            order: 1,
            concentration: 1.0,
            length: 20_000,
            seed: 1,
        })
        .unwrap();
        let t = train_bpe(&[seq.clone()], 200).unwrap();
        assert_eq!(t.vocab_size(), 200);
        assert_eq!(t.decode(&t.encode(&seq)).unwrap(), seq);
    }
}
