//! Integer tokens.
//!
//! Sequence terms are kept as canonical signed decimal strings because
//! terms regularly exceed 64 bits. Numeric comparison works directly on
//! the canonical form.

use std::cmp::Ordering;

use smol_str::SmolStr;

/// A canonical signed decimal integer, e.g. `"0"`, `"-17"`, `"340282366920938463463374607431768211456"`.
pub type Token = SmolStr;

/// True if `s` is an optional `-` followed by digits with no leading zero
/// (except `"0"` itself). `"-0"` is not canonical.
pub fn is_canonical_integer(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return false;
    }
    !(s.starts_with('-') && digits == "0")
}

/// Canonicalizes an integer literal: strips a `+` sign and leading zeros,
/// maps `-0` to `0`. Returns `None` if `s` is not a decimal integer.
pub fn canonicalize(s: &str) -> Option<Token> {
    if is_canonical_integer(s) {
        return Some(SmolStr::new(s));
    }
    let (negative, digits) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        return Some(SmolStr::new_inline("0"));
    }
    if negative {
        Some(SmolStr::from(format!("-{trimmed}")))
    } else {
        Some(SmolStr::new(trimmed))
    }
}

/// Orders tokens by numeric value when both are canonical integers.
/// Integers sort before anything else; non-integers compare lexicographically.
pub fn cmp_numeric(a: &str, b: &str) -> Ordering {
    match (is_canonical_integer(a), is_canonical_integer(b)) {
        (true, true) => cmp_canonical(a, b),
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a.cmp(b),
    }
}

fn cmp_canonical(a: &str, b: &str) -> Ordering {
    match (a.strip_prefix('-'), b.strip_prefix('-')) {
        (Some(a), Some(b)) => cmp_magnitude(a, b).reverse(),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => cmp_magnitude(a, b),
    }
}

fn cmp_magnitude(a: &str, b: &str) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

/// Parses a canonical non-negative token that fits in a `u64`.
pub fn as_u64(token: &str) -> Option<u64> {
    if !is_canonical_integer(token) || token.starts_with('-') {
        return None;
    }
    token.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_forms() {
        assert!(is_canonical_integer("0"));
        assert!(is_canonical_integer("-12"));
        assert!(is_canonical_integer("123456789012345678901234567890"));
        assert!(!is_canonical_integer("-0"));
        assert!(!is_canonical_integer("007"));
        assert!(!is_canonical_integer("1,000"));
        assert!(!is_canonical_integer("3.5"));
        assert!(!is_canonical_integer(""));
        assert!(!is_canonical_integer("-"));
        assert!(!is_canonical_integer("+5"));
    }

    #[test]
    fn canonicalize_strips() {
        assert_eq!(canonicalize("007").as_deref(), Some("7"));
        assert_eq!(canonicalize("-0").as_deref(), Some("0"));
        assert_eq!(canonicalize("+42").as_deref(), Some("42"));
        assert_eq!(canonicalize("-0042").as_deref(), Some("-42"));
        assert_eq!(canonicalize("000").as_deref(), Some("0"));
        assert_eq!(canonicalize("4a"), None);
        assert_eq!(canonicalize("+"), None);
    }

    #[test]
    fn numeric_order() {
        assert_eq!(cmp_numeric("9", "10"), Ordering::Less);
        assert_eq!(cmp_numeric("-9", "-10"), Ordering::Greater);
        assert_eq!(cmp_numeric("-1", "0"), Ordering::Less);
        assert_eq!(cmp_numeric("5", "UNK"), Ordering::Less);
    }

    proptest! {
        #[test]
        fn numeric_order_matches_i128(a in any::<i64>(), b in any::<i64>()) {
            let (sa, sb) = (a.to_string(), b.to_string());
            prop_assert_eq!(cmp_numeric(&sa, &sb), a.cmp(&b));
        }
    }
}
