use thiserror::Error;

/// One byte range from a `Range` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteRange {
    /// `first-last` (inclusive) or `first-` when `last` is None.
    From { first: u64, last: Option<u64> },
    /// `-n`: the final n bytes.
    Suffix(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RangeError {
    #[error("range not satisfiable")]
    Unsatisfiable,
    #[error("multiple ranges are not supported")]
    MultiRange,
}

/// Parses a `Range` header value. Returns Ok(None) for headers we should
/// ignore (other units, syntax errors), which means serving the full body.
pub fn parse_range_header(value: &str) -> Result<Option<ByteRange>, RangeError> {
    let Some(spec) = value.trim().strip_prefix("bytes=") else {
        return Ok(None);
    };
    if spec.contains(',') {
        return Err(RangeError::MultiRange);
    }
    let Some((a, b)) = spec.trim().split_once('-') else {
        return Ok(None);
    };
    let (a, b) = (a.trim(), b.trim());
    let parse = |s: &str| s.parse::<u64>().ok();
    Ok(match (a.is_empty(), b.is_empty()) {
        (true, false) => parse(b).map(ByteRange::Suffix),
        (false, true) => parse(a).map(|first| ByteRange::From { first, last: None }),
        (false, false) => match (parse(a), parse(b)) {
            (Some(first), Some(last)) if first <= last => Some(ByteRange::From { first, last: Some(last) }),
            _ => None,
        },
        (true, true) => None,
    })
}

/// Turns a range into (offset, length) within an asset of `size` bytes,
/// clamping the end to the last byte.
pub fn resolve_range(range: ByteRange, size: u64) -> Result<(u64, u64), RangeError> {
    match range {
        ByteRange::From { first, last } => {
            if first >= size {
                return Err(RangeError::Unsatisfiable);
            }
            let last = last.unwrap_or(u64::MAX).min(size - 1);
            Ok((first, last - first + 1))
        }
        ByteRange::Suffix(n) => {
            if n == 0 || size == 0 {
                return Err(RangeError::Unsatisfiable);
            }
            let n = n.min(size);
            Ok((size - n, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const MIB: u64 = 1 << 20;

    fn from(first: u64, last: u64) -> ByteRange {
        ByteRange::From { first, last: Some(last) }
    }

    #[test]
    fn clamps_and_bounds() {
        assert_eq!(resolve_range(from(0, 1_000_000_000), MIB), Ok((0, MIB)));
        assert_eq!(resolve_range(from(MIB - 1, MIB - 1), MIB), Ok((MIB - 1, 1)));
        assert_eq!(resolve_range(ByteRange::From { first: MIB, last: None }, MIB), Err(RangeError::Unsatisfiable));
        assert_eq!(resolve_range(from(1_000_000_000_000, 1_000_000_000_000), 64 * MIB), Err(RangeError::Unsatisfiable));
        assert_eq!(resolve_range(ByteRange::Suffix(10), 4), Ok((0, 4)));
        assert_eq!(resolve_range(ByteRange::Suffix(10), 100), Ok((90, 10)));
        assert_eq!(resolve_range(ByteRange::Suffix(0), 100), Err(RangeError::Unsatisfiable));
        assert_eq!(resolve_range(from(0, 0), 0), Err(RangeError::Unsatisfiable));
    }

    #[test]
    fn header_parsing() {
        assert_eq!(parse_range_header("bytes=0-1023"), Ok(Some(from(0, 1023))));
        assert_eq!(parse_range_header("bytes=5-"), Ok(Some(ByteRange::From { first: 5, last: None })));
        assert_eq!(parse_range_header("bytes=-20"), Ok(Some(ByteRange::Suffix(20))));
        assert_eq!(parse_range_header("bytes=0-1,5-9"), Err(RangeError::MultiRange));
        for ignored in ["items=0-1", "bytes=9-1", "bytes=x-1", "bytes=-", "bytes=7"] {
            assert_eq!(parse_range_header(ignored), Ok(None), "{ignored}");
        }
    }

    proptest! {
        #[test]
        fn resolved_range_stays_inside(first in 0u64..2000, len in 0u64..2000, size in 0u64..1500) {
            match resolve_range(from(first, first + len), size) {
                Ok((off, n)) => {
                    prop_assert!(n >= 1);
                    prop_assert_eq!(off, first);
                    prop_assert!(off + n <= size);
                    prop_assert_eq!(n, (len + 1).min(size - first));
                }
                Err(_) => prop_assert!(first >= size),
            }
        }
    }
}
