use serde::{Deserialize, Serialize};
use std::fmt;

/// An integer partition, stored as non-increasing positive parts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Partition(Vec<usize>);

impl Partition {
    /// Builds a partition from parts in any order; zero parts are rejected.
    pub fn new(mut parts: Vec<usize>) -> Option<Self> {
        if parts.is_empty() || parts.contains(&0) {
            return None;
        }
        parts.sort_unstable_by(|a, b| b.cmp(a));
        Some(Self(parts))
    }

    /// The partition `(1, 1, ..., 1)` of `d`.
    pub fn ones(d: usize) -> Self {
        Self(vec![1; d])
    }

    pub fn parts(&self) -> &[usize] {
        &self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Multiplicity of each part size, as `(size, count)` with sizes decreasing.
    pub fn multiplicities(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &part in &self.0 {
            match out.last_mut() {
                Some((size, count)) if *size == part => *count += 1,
                _ => out.push((part, 1)),
            }
        }
        out
    }
}

impl fmt::Display for Partition {
    /// Multiplicity notation, e.g. `2^2 1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self
            .multiplicities()
            .into_iter()
            .map(|(size, count)| {
                if count == 1 {
                    size.to_string()
                } else {
                    format!("{size}^{count}")
                }
            })
            .collect();
        write!(f, "{}", terms.join(" "))
    }
}

/// All partitions of `d`, in reverse lexicographic order: `(d)`, `(d-1, 1)`, ..., `(1^d)`.
pub fn partitions(d: usize) -> Vec<Partition> {
    fn rec(remaining: usize, max_part: usize, prefix: &mut Vec<usize>, out: &mut Vec<Partition>) {
        if remaining == 0 {
            out.push(Partition(prefix.clone()));
            return;
        }
        for part in (1..=remaining.min(max_part)).rev() {
            prefix.push(part);
            rec(remaining - part, part, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d > 0 {
        rec(d, d, &mut Vec::new(), &mut out);
    }
    out
}
