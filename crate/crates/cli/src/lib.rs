//! Shared helpers for the command-line tools.

use anyhow::{bail, Context, Result};

/// Parses byte sizes with optional binary suffixes: `500`, `64KiB`,
/// `10MiB`, `1GiB`.
pub fn parse_size(text: &str) -> Result<u64> {
    let t = text.trim();
    let (digits, mult) = if let Some(d) = t.strip_suffix("GiB") {
        (d, 1u64 << 30)
    } else if let Some(d) = t.strip_suffix("MiB") {
        (d, 1 << 20)
    } else if let Some(d) = t.strip_suffix("KiB") {
        (d, 1 << 10)
    } else if let Some(d) = t.strip_suffix('B') {
        (d, 1)
    } else {
        (t, 1)
    };
    let n: u64 = digits
        .trim()
        .parse()
        .with_context(|| format!("bad size '{text}'"))?;
    if n == 0 {
        bail!("size '{text}' must be positive");
    }
    Ok(n * mult)
}

#[cfg(test)]
mod tests {
    use super::parse_size;

    #[test]
    fn sizes_parse_with_and_without_suffixes() {
        assert_eq!(parse_size("500").unwrap(), 500);
        assert_eq!(parse_size("500B").unwrap(), 500);
        assert_eq!(parse_size("64KiB").unwrap(), 64 << 10);
        assert_eq!(parse_size("10MiB").unwrap(), 10 << 20);
        assert_eq!(parse_size("1GiB").unwrap(), 1 << 30);
        assert!(parse_size("0").is_err());
        assert!(parse_size("x").is_err());
    }
}
