//! Sequence metrics: Levenshtein edit distance and its normalized form.

/// Levenshtein distance with unit insert/delete/substitute costs,
/// two-row dynamic programming.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, av) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bv) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(av != bv);
            let del = prev[j + 1] + 1;
            let ins = cur[j] + 1;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length; 0 when both inputs are
/// empty (the degenerate case is defined, not an error).
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 0.0;
    }
    edit_distance(a, b) as f64 / denom as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain exponential recursion straight from the definition; the
    /// independent oracle for the DP implementation.
    pub(crate) fn edit_distance_recursive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_last(), b.split_last()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ax, arest)), Some((bx, brest))) => {
                let sub = edit_distance_recursive(arest, brest) + usize::from(ax != bx);
                let del = edit_distance_recursive(arest, b) + 1;
                let ins = edit_distance_recursive(a, brest) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn kitten_sitting_is_three() {
        // expected value computed by the recursive oracle, then frozen
        assert_eq!(edit_distance_recursive(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn identity_is_zero() {
        assert_eq!(edit_distance(b"abcabc", b"abcabc"), 0);
        assert_eq!(normalized_edit_distance(b"abcabc", b"abcabc"), 0.0);
    }

    #[test]
    fn insertion_only() {
        assert_eq!(edit_distance(b"", b"abc"), 3);
        assert_eq!(normalized_edit_distance(b"", b"abc"), 1.0);
    }

    #[test]
    fn both_empty_normalizes_to_zero() {
        assert_eq!(normalized_edit_distance::<u8>(&[], &[]), 0.0);
    }

    #[test]
    fn dp_matches_oracle_on_short_pairs() {
        // spot grid; the exhaustive length-6 sweep lives in the acceptance suite
        let strings: Vec<Vec<u8>> = (0..4usize)
            .flat_map(|len| {
                (0..3usize.pow(len as u32)).map(move |mut k| {
                    (0..len)
                        .map(|_| {
                            let c = b'a' + (k % 3) as u8;
                            k /= 3;
                            c
                        })
                        .collect()
                })
            })
            .collect();
        for a in &strings {
            for b in &strings {
                assert_eq!(edit_distance(a, b), edit_distance_recursive(a, b));
            }
        }
    }
}
