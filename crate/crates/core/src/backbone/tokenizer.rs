//! Closed-lexicon word tokenizer with hashed fallback buckets.

use std::collections::BTreeMap;
use std::sync::OnceLock;

pub const TEXT_LEN: usize = 16;
pub const PAD: usize = 0;
pub const START: usize = 1;
const HASH_BUCKETS: usize = 16;

/// Every word the sprite captions and attribute names can produce.
pub const LEXICON: &[&str] = &[
    // caption template
    "a", "sprite", "at", "facing", "on", "background", "character", "with", "eyes",
    // scale, placement, direction
    "small", "medium", "large", "left", "center", "right", "top", "middle", "bottom", "up", "down",
    // backgrounds
    "white", "silver", "gray", "charcoal", "cream", "sand", "mint", "lavender",
    // body hues
    "red", "orange", "lime", "green", "cyan", "blue", "violet", "magenta",
    // shapes, accessories, eye colours
    "circle", "square", "triangle", "hat", "badge", "plain", "black", "navy", "brown", "plum",
];

fn table() -> &'static BTreeMap<&'static str, usize> {
    static TABLE: OnceLock<BTreeMap<&'static str, usize>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut words: Vec<&str> = LEXICON.to_vec();
        words.sort_unstable();
        words.dedup();
        words.into_iter().enumerate().map(|(i, w)| (w, i + 2)).collect()
    })
}

/// Number of distinct token ids.
pub fn vocab_size() -> usize {
    2 + table().len() + HASH_BUCKETS
}

fn word_id(word: &str) -> usize {
    if let Some(&id) = table().get(word) {
        return id;
    }
    let mut h: u32 = 0x811c_9dc5;
    for b in word.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    2 + table().len() + (h as usize % HASH_BUCKETS)
}

/// Lowercases, splits on non-alphanumerics and maps to exactly [`TEXT_LEN`] ids,
/// beginning with [`START`] and padded with [`PAD`].
pub fn tokenize(prompt: &str) -> Vec<usize> {
    let lower = prompt.to_lowercase();
    let mut ids = vec![START];
    ids.extend(
        lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(word_id)
            .take(TEXT_LEN - 1),
    );
    ids.resize(TEXT_LEN, PAD);
    ids
}
