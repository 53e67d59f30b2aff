//! Exact attention score-entry accounting.

use super::layout::InputLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Full,
    Structured,
}

/// Number of query-key scores computed per head per layer.
///
/// * full: `(L_S + K*B)^2`
/// * structured (no C2C): `L_S^2 + 2*L_S*K*B + K*B^2`
pub fn attention_entry_count(layout: &InputLayout, mode: CountMode) -> u64 {
    let ls = layout.sentence_len() as u64;
    let k = layout.num_candidates() as u64;
    let b = layout.block_size() as u64;
    match mode {
        CountMode::Full => (ls + k * b).pow(2),
        CountMode::Structured => ls * ls + 2 * ls * k * b + k * b * b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(ls: usize, k: usize, b: usize, mode: CountMode) -> u64 {
        attention_entry_count(&InputLayout::new(ls, k, b).unwrap(), mode)
    }

    #[test]
    fn reference_values() {
        assert_eq!(count(10, 128, 1, CountMode::Full), 19044);
        assert_eq!(count(10, 128, 1, CountMode::Structured), 2788);
        assert_eq!(count(10, 32, 4, CountMode::Structured), 3172);
        assert_eq!(count(10, 32, 4, CountMode::Full), 19044);
    }

    #[test]
    fn structured_cheaper_from_two_candidates() {
        for ls in 1..12 {
            for k in 2..40 {
                for b in [1, 2, 4] {
                    assert!(
                        count(ls, k, b, CountMode::Structured) < count(ls, k, b, CountMode::Full)
                    );
                }
            }
        }
        assert_eq!(
            count(5, 1, 1, CountMode::Structured),
            count(5, 1, 1, CountMode::Full)
        );
    }
}
