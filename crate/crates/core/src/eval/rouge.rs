//! ROUGE-L over token sequences.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RougeL {
    pub f: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<RougeL> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::arg("ROUGE-L needs non-empty candidate and reference"));
    }
    let l = lcs_len(candidate, reference) as f64;
    let precision = l / candidate.len() as f64;
    let recall = l / reference.len() as f64;
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(RougeL { f, precision, recall })
}

/// Like [`rouge_l`] but scores an empty candidate as zero.
pub fn rouge_l_or_zero(candidate: &[u32], reference: &[u32]) -> Result<RougeL> {
    if candidate.is_empty() && !reference.is_empty() {
        return Ok(RougeL { f: 0.0, precision: 0.0, recall: 0.0 });
    }
    rouge_l(candidate, reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = rouge_l(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((r.f, r.recall), (1.0, 1.0));
        let r = rouge_l(&[1, 2], &[3, 4]).unwrap();
        assert_eq!((r.f, r.recall), (0.0, 0.0));
        // a c d vs a b c d
        let r = rouge_l(&[10, 12, 13], &[10, 11, 12, 13]).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 0.75);
        assert!((r.f - 6.0 / 7.0).abs() < 1e-15);
        assert!(rouge_l(&[], &[1]).is_err());
        assert_eq!(rouge_l_or_zero(&[], &[1]).unwrap().f, 0.0);
    }
}
