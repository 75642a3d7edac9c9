//! Tokenization and hashing shared across scorers.

/// Lowercased alphanumeric tokens; every other character (including `_`)
/// is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// First `max_tokens` whitespace tokens of `text`.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME)
    })
}

/// Hash of `namespace` and `key` joined by a unit separator.
pub fn hash_key(namespace: &str, key: &str) -> u64 {
    let mut buf = Vec::with_capacity(namespace.len() + key.len() + 1);
    buf.extend_from_slice(namespace.as_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(key.as_bytes());
    fnv1a(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_identifiers() {
        assert_eq!(
            tokenize("amazon_show_orders: List, recent ORDERS!"),
            vec!["amazon", "show", "orders", "list", "recent", "orders"]
        );
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_tokens("a b  c d", 2), "a b");
        assert_eq!(truncate_tokens("a", 8), "a");
    }
}
