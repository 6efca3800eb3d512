//! Corpus ingestion, WordPiece tokenization, and MLM batch construction.
//!
//! Vocab files are plain text, one token per line, id = 0-based line index.
//! The effective vocabulary is padded with inert `[unused_padN]` entries to
//! land on a multiple of 64. Masking is dynamic: a fresh draw per
//! (seed, step, row), reproducible bit-for-bit.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const IGNORE_INDEX: i32 = -100;

/// Smallest multiple of `multiple` that is >= `size`.
pub fn round_vocab(size: usize, multiple: usize) -> usize {
    debug_assert!(size >= 1 && multiple >= 1);
    size.div_ceil(multiple) * multiple
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
    /// Tokens below this index are the real vocabulary; the rest are
    /// reserved padding entries.
    real_size: usize,
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Vocab {
    /// Build from an ordered token list; the five specials must be present.
    /// Reserved `[unused_padN]` entries are appended until the size is a
    /// multiple of 64.
    pub fn new(mut tokens: Vec<String>) -> Result<Vocab> {
        let real_size = tokens.len();
        if real_size == 0 {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let target = round_vocab(real_size, 64);
        for n in 0..target - real_size {
            tokens.push(format!("[unused_pad{n}]"));
        }
        let mut map = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if map.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?} in vocab")));
            }
        }
        let lookup = |name: &str| -> Result<u32> {
            map.get(name)
                .copied()
                .ok_or_else(|| Error::Data(format!("vocab is missing special token {name}")))
        };
        Ok(Vocab {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
            tokens,
            map,
            real_size,
        })
    }

    /// One token per line; the id is the 0-based line index.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let text = String::from_utf8(text).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            line: e.utf8_error().valid_up_to(),
            message: "invalid UTF-8 in vocab file".into(),
        })?;
        let mut tokens: Vec<String> = text.lines().map(str::to_string).collect();
        // A trailing newline produces no extra line; tolerate one trailing
        // blank from editors.
        if tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop();
        }
        // Reserved tail entries were materialized at save time; keep the real
        // size at the last non-reserved token so reload is idempotent.
        let real_size = tokens
            .iter()
            .rposition(|t| !t.starts_with("[unused_pad"))
            .map(|p| p + 1)
            .unwrap_or(tokens.len());
        tokens.truncate(real_size);
        Vocab::new(tokens)
    }

    /// Bit-exact counterpart of [`Vocab::load`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Total size including reserved entries; always a multiple of 64.
    pub fn effective_size(&self) -> usize {
        self.tokens.len()
    }

    /// Grow the reserved tail so the effective size lands exactly on
    /// `target` (which must be a multiple of 64 and >= the current size).
    pub fn pad_to(mut self, target: usize) -> Result<Vocab> {
        if !target.is_multiple_of(64) {
            return Err(Error::Config(format!(
                "vocab target {target} is not a multiple of 64"
            )));
        }
        if target < self.tokens.len() {
            return Err(Error::Config(format!(
                "vocab target {target} below current size {}",
                self.tokens.len()
            )));
        }
        let mut n = self.tokens.len() - self.real_size;
        while self.tokens.len() < target {
            let t = format!("[unused_pad{n}]");
            self.map.insert(t.clone(), self.tokens.len() as u32);
            self.tokens.push(t);
            n += 1;
        }
        Ok(self)
    }

    pub fn real_size(&self) -> usize {
        self.real_size
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.map.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad
            || id == self.unk
            || id == self.cls
            || id == self.sep
            || id == self.mask
            || id as usize >= self.real_size
    }

    /// Ids eligible as random replacements: real, non-special tokens.
    fn replacement_pool(&self) -> Vec<u32> {
        (0..self.real_size as u32)
            .filter(|&id| !self.is_special(id))
            .collect()
    }
}

/// Whitespace + punctuation pre-split, then greedy longest-match WordPiece
/// with `##` continuation; anything unmatched maps to `[UNK]`.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab, lowercase: bool) -> Vec<u32> {
    const MAX_WORD_CHARS: usize = 100;
    let mut ids = Vec::new();
    for word in pre_split(text, lowercase) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            ids.push(vocab.unk);
            continue;
        }
        let mut start = 0;
        let mut pieces = Vec::new();
        let mut ok = true;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece = format!("##{piece}");
                }
                if let Some(id) = vocab.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            ids.extend(pieces);
        } else {
            ids.push(vocab.unk);
        }
    }
    ids
}

fn pre_split(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        let ch = if lowercase {
            ch.to_lowercase().next().unwrap_or(ch)
        } else {
            ch
        };
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if !ch.is_alphanumeric() {
            // punctuation splits and stands alone
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Inverse of tokenization at the piece level: `##` prefixes stripped.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .filter_map(|&id| vocab.token(id))
        .map(|t| t.strip_prefix("##").unwrap_or(t).to_string())
        .collect()
}

/// `[CLS] content [SEP]`, content truncated to `max_seq_len - 2`.
pub fn prepare_sequence(ids: &[u32], max_seq_len: usize, vocab: &Vocab) -> Result<Vec<u32>> {
    if max_seq_len < 3 {
        return Err(Error::Config(format!("max_seq_len {max_seq_len} < 3")));
    }
    let keep = ids.len().min(max_seq_len - 2);
    let mut out = Vec::with_capacity(keep + 2);
    out.push(vocab.cls);
    out.extend_from_slice(&ids[..keep]);
    out.push(vocab.sep);
    Ok(out)
}

/// One masked row: inputs, labels (ignore-index elsewhere), plus masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmRow {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
}

/// Dynamic MLM masking: every non-special token is selected independently
/// with probability `ratio`; selected tokens become `[MASK]` 80% of the
/// time, a random non-special token 10%, and stay unchanged 10%. Labels
/// carry the original id exactly at selected positions.
pub fn mlm_mask(
    ids: &[u32],
    vocab: &Vocab,
    ratio: f64,
    seed: u64,
    step: u64,
    row: u64,
) -> Result<MlmRow> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mlm ratio {ratio} outside (0,1)")));
    }
    if !ids.iter().any(|&id| !vocab.is_special(id)) {
        return Err(Error::Data(
            "mlm_mask: no maskable tokens in sequence".into(),
        ));
    }
    let pool = vocab.replacement_pool();
    if pool.is_empty() {
        return Err(Error::Data(
            "mlm_mask: vocabulary has no non-special tokens".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, step, row));
    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if vocab.is_special(id) {
            continue;
        }
        if rng.gen::<f64>() >= ratio {
            continue;
        }
        labels[i] = id as i32;
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            input_ids[i] = vocab.mask;
        } else if roll < 0.9 {
            input_ids[i] = pool[rng.gen_range(0..pool.len())];
        } // else: keep the original token
    }
    Ok(MlmRow { input_ids, labels })
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the three words
    let mut z = a ^ b.wrapping_mul(0x9E3779B97F4A7C15) ^ c.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Iterator over documents: one per line, empty lines skipped. A directory
/// is consumed as `.txt` shards in sorted filename order.
pub struct CorpusReader {
    files: Vec<PathBuf>,
    file_idx: usize,
    lines: std::vec::IntoIter<(usize, String)>,
    current: PathBuf,
    done: bool,
}

pub fn corpus_reader(path: &Path) -> Result<CorpusReader> {
    let mut files = Vec::new();
    let meta = fs::metadata(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if meta.is_dir() {
        for entry in fs::read_dir(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })? {
            let entry = entry.map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let p = entry.path();
            if p.extension().is_some_and(|e| e == "txt") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no .txt shards under {}",
                path.display()
            )));
        }
    } else {
        files.push(path.to_path_buf());
    }
    Ok(CorpusReader {
        files,
        file_idx: 0,
        lines: Vec::new().into_iter(),
        current: PathBuf::new(),
        done: false,
    })
}

impl CorpusReader {
    fn load_next_file(&mut self) -> Result<bool> {
        if self.file_idx >= self.files.len() {
            return Ok(false);
        }
        let path = self.files[self.file_idx].clone();
        self.file_idx += 1;
        let bytes = fs::read(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let text = String::from_utf8(bytes).map_err(|e| {
            let upto = e.utf8_error().valid_up_to();
            let line = e.as_bytes()[..upto].iter().filter(|&&b| b == b'\n').count() + 1;
            Error::Ingestion {
                file: path.clone(),
                line,
                message: "invalid UTF-8".into(),
            }
        })?;
        let lines: Vec<(usize, String)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l.to_string()))
            .collect();
        self.current = path;
        self.lines = lines.into_iter();
        Ok(true)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<String>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            if let Some((_, line)) = self.lines.next() {
                return Some(Ok(line));
            }
            match self.load_next_file() {
                Ok(true) => continue,
                Ok(false) => {
                    self.done = true;
                    return None;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

/// All documents, optionally shuffled deterministically by `seed`.
pub fn read_documents(path: &Path, shuffle_seed: Option<u64>) -> Result<Vec<String>> {
    let docs: Result<Vec<String>> = corpus_reader(path)?.collect();
    let mut docs = docs?;
    if let Some(seed) = shuffle_seed {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        docs.shuffle(&mut rng);
    }
    Ok(docs)
}

/// Padded batch of masked rows ready for the encoder.
#[derive(Clone, Debug)]
pub struct MlmBatch {
    pub batch: usize,
    pub len: usize,
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub attention: Vec<bool>,
    pub segment_ids: Vec<u32>,
}

impl MlmBatch {
    /// Right-pad rows to the longest row with `[PAD]`, ignore-index labels
    /// and a false attention mask.
    pub fn collate(rows: &[MlmRow], vocab: &Vocab) -> Result<MlmBatch> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let len = rows.iter().map(|r| r.input_ids.len()).max().unwrap();
        let b = rows.len();
        let mut input_ids = Vec::with_capacity(b * len);
        let mut labels = Vec::with_capacity(b * len);
        let mut attention = Vec::with_capacity(b * len);
        for row in rows {
            let n = row.input_ids.len();
            input_ids.extend_from_slice(&row.input_ids);
            labels.extend_from_slice(&row.labels);
            attention.extend(std::iter::repeat_n(true, n));
            input_ids.extend(std::iter::repeat_n(vocab.pad, len - n));
            labels.extend(std::iter::repeat_n(IGNORE_INDEX, len - n));
            attention.extend(std::iter::repeat_n(false, len - n));
        }
        Ok(MlmBatch {
            batch: b,
            len,
            input_ids,
            labels,
            attention,
            segment_ids: vec![0; b * len],
        })
    }
}

/// A tiny whole-word vocabulary built from a corpus, for desk-scale runs:
/// specials first, then words by frequency, capped to leave room before the
/// multiple-of-64 rounding.
pub fn build_toy_vocab(docs: &[String], max_words: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in docs {
        for w in pre_split(d, true) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut by_freq: Vec<(String, usize)> = counts.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
        .iter()
        .map(|s| s.to_string())
        .collect();
    tokens.extend(by_freq.into_iter().take(max_words).map(|(w, _)| w));
    Vocab::new(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab(extra: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocab::new(tokens).unwrap()
    }

    #[test]
    fn vocab_rounding() {
        assert_eq!(round_vocab(30522, 64), 30528);
        assert_eq!(round_vocab(64, 64), 64);
        assert_eq!(round_vocab(1, 64), 64);
        for s in [1usize, 63, 64, 65, 30522, 100_000] {
            let r = round_vocab(s, 64);
            assert_eq!(r % 64, 0);
            assert!(r >= s && r - s < 64);
        }
    }

    #[test]
    fn vocab_pads_with_reserved_tokens() {
        let v = toy_vocab(&["hello"]);
        assert_eq!(v.effective_size(), 64);
        assert_eq!(v.real_size(), 6);
        assert_eq!(v.token(6).unwrap(), "[unused_pad0]");
        assert!(v.is_special(6));
        assert!(!v.is_special(v.id("hello").unwrap()));
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = toy_vocab(&["alpha", "beta", "##ta"]);
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
        // save(load(f)) is byte-identical
        let bytes1 = fs::read(&path).unwrap();
        let path2 = dir.path().join("vocab2.txt");
        loaded.save(&path2).unwrap();
        assert_eq!(bytes1, fs::read(&path2).unwrap());
    }

    #[test]
    fn wordpiece_greedy_longest_match() {
        let v = toy_vocab(&["un", "##af", "##fable", "##affable"]);
        // Greedy: "##affable" wins over "##af" + "##fable".
        let ids = wordpiece_tokenize("unaffable", &v, true);
        let pieces: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["un", "##affable"]);

        let v2 = toy_vocab(&["un", "##af", "##fable"]);
        let ids2 = wordpiece_tokenize("unaffable", &v2, true);
        let pieces2: Vec<&str> = ids2.iter().map(|&i| v2.token(i).unwrap()).collect();
        assert_eq!(pieces2, vec!["un", "##af", "##fable"]);
    }

    #[test]
    fn wordpiece_whole_word_and_unk() {
        let v = toy_vocab(&["hello", "world", "!"]);
        let ids = wordpiece_tokenize("Hello, world!", &v, true);
        let pieces: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(pieces, vec!["hello", "[UNK]", "world", "!"]);
        // character absent from vocab entirely
        let ids = wordpiece_tokenize("Ω", &v, false);
        assert_eq!(ids, vec![v.unk]);
    }

    #[test]
    fn tokenize_detokenize_identity_on_whole_words() {
        let v = toy_vocab(&["the", "cat", "sat"]);
        let ids = wordpiece_tokenize("the cat sat", &v, true);
        assert_eq!(detokenize(&ids, &v), vec!["the", "cat", "sat"]);
    }

    #[test]
    fn prepare_sequence_truncates() {
        let v = toy_vocab(&["w"]);
        let w = v.id("w").unwrap();
        let long = vec![w; 200];
        let out = prepare_sequence(&long, 128, &v).unwrap();
        assert_eq!(out.len(), 128);
        assert_eq!(out[0], v.cls);
        assert_eq!(out[127], v.sep);

        let short = vec![w; 5];
        let out = prepare_sequence(&short, 128, &v).unwrap();
        assert_eq!(out.len(), 7);

        let empty: Vec<u32> = vec![];
        let out = prepare_sequence(&empty, 128, &v).unwrap();
        assert_eq!(out, vec![v.cls, v.sep]);
    }

    #[test]
    fn mlm_statistics() {
        // Large replacement pool: a random replacement that happens to hit
        // the original token is indistinguishable from "kept", so the pool
        // must be big enough for that to be noise at the +-0.01 tolerance.
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let mut tokens: Vec<&str> = words.iter().map(String::as_str).collect();
        tokens.insert(0, "a");
        let v = toy_vocab(&tokens);
        let ids: Vec<u32> = {
            let a = v.id("a").unwrap();
            let mut s = vec![v.cls];
            s.extend(std::iter::repeat_n(a, 1000));
            s.push(v.sep);
            s
        };
        let mut selected = 0usize;
        let mut masked = 0usize;
        let mut random = 0usize;
        let mut kept = 0usize;
        let mut eligible = 0usize;
        let steps = 100u64;
        for step in 0..steps {
            let row = mlm_mask(&ids, &v, 0.30, 42, step, 0).unwrap();
            assert_eq!(row.labels[0], IGNORE_INDEX, "[CLS] must never be selected");
            assert_eq!(
                *row.labels.last().unwrap(),
                IGNORE_INDEX,
                "[SEP] must never be selected"
            );
            for (i, &id) in ids.iter().enumerate() {
                if v.is_special(id) {
                    continue;
                }
                eligible += 1;
                if row.labels[i] != IGNORE_INDEX {
                    selected += 1;
                    assert_eq!(row.labels[i], id as i32);
                    if row.input_ids[i] == v.mask {
                        masked += 1;
                    } else if row.input_ids[i] == id {
                        kept += 1;
                    } else {
                        random += 1;
                        assert!(!v.is_special(row.input_ids[i]));
                    }
                } else {
                    assert_eq!(row.input_ids[i], id);
                }
            }
        }
        let frac = selected as f64 / eligible as f64;
        assert!((frac - 0.30).abs() < 0.005, "selection fraction {frac}");
        let m = masked as f64 / selected as f64;
        let r = random as f64 / selected as f64;
        let k = kept as f64 / selected as f64;
        assert!((m - 0.8).abs() < 0.01, "mask fraction {m}");
        assert!((r - 0.1).abs() < 0.01, "random fraction {r}");
        assert!((k - 0.1).abs() < 0.01, "keep fraction {k}");
    }

    #[test]
    fn mlm_reproducible_and_dynamic() {
        let v = toy_vocab(&["a", "b", "c"]);
        let ids = vec![
            v.cls,
            v.id("a").unwrap(),
            v.id("b").unwrap(),
            v.id("c").unwrap(),
            v.sep,
        ];
        let r1 = mlm_mask(&ids, &v, 0.5, 7, 3, 1).unwrap();
        let r2 = mlm_mask(&ids, &v, 0.5, 7, 3, 1).unwrap();
        assert_eq!(r1, r2);
        // Different steps eventually differ (dynamic masking).
        let differs = (0..50).any(|step| mlm_mask(&ids, &v, 0.5, 7, step, 1).unwrap() != r1);
        assert!(differs);
    }

    #[test]
    fn mlm_rejects_bad_ratio_and_empty_rows() {
        let v = toy_vocab(&["a"]);
        let ids = vec![v.cls, v.id("a").unwrap(), v.sep];
        assert!(matches!(
            mlm_mask(&ids, &v, 0.0, 0, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            mlm_mask(&ids, &v, 1.0, 0, 0, 0),
            Err(Error::Config(_))
        ));
        let specials_only = vec![v.cls, v.sep];
        assert!(mlm_mask(&specials_only, &v, 0.3, 0, 0, 0).is_err());
    }

    #[test]
    fn corpus_reader_reads_in_order_and_skips_blanks() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "third\nfourth\n").unwrap();
        fs::write(dir.path().join("a.txt"), "first\n\nsecond\n").unwrap();
        fs::write(dir.path().join("ignored.json"), "{}").unwrap();
        let docs: Result<Vec<String>> = corpus_reader(dir.path()).unwrap().collect();
        assert_eq!(docs.unwrap(), vec!["first", "second", "third", "fourth"]);
    }

    #[test]
    fn corpus_shuffle_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.txt");
        fs::write(
            &path,
            (0..50)
                .map(|i| format!("doc {i}"))
                .collect::<Vec<_>>()
                .join("\n"),
        )
        .unwrap();
        let a = read_documents(&path, Some(9)).unwrap();
        let b = read_documents(&path, Some(9)).unwrap();
        let c = read_documents(&path, Some(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let plain = read_documents(&path, None).unwrap();
        assert_eq!(plain[0], "doc 0");
    }

    #[test]
    fn corpus_reader_reports_bad_utf8_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, [b'o', b'k', b'\n', 0xFF, 0xFE]).unwrap();
        let out: Result<Vec<String>> = corpus_reader(&path).unwrap().collect();
        let err = out.unwrap_err();
        assert!(matches!(err, Error::Ingestion { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_corpus_path_errors() {
        assert!(corpus_reader(Path::new("/nonexistent/corpus.txt")).is_err());
    }

    #[test]
    fn collate_pads_to_longest() {
        let v = toy_vocab(&["a", "b"]);
        let rows = vec![
            MlmRow {
                input_ids: vec![v.cls, v.id("a").unwrap(), v.sep],
                labels: vec![-100, 1, -100],
            },
            MlmRow {
                input_ids: vec![v.cls, v.sep],
                labels: vec![-100, -100],
            },
        ];
        let batch = MlmBatch::collate(&rows, &v).unwrap();
        assert_eq!(batch.len, 3);
        assert_eq!(batch.input_ids[5], v.pad);
        assert_eq!(batch.labels[5], IGNORE_INDEX);
        assert!(!batch.attention[5]);
        assert!(batch.segment_ids.iter().all(|&s| s == 0));
    }
}
