//! Partial-sharing selection patterns.
//!
//! Agent `j` shares the entries of its estimate listed in its current
//! pattern; the pattern advances by a right-circular shift of `tau`
//! positions every step. Patterns are kept as sorted index sets and only
//! materialized as diagonal matrices at the linear-algebra boundary.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionSchedule {
    m: usize,
    tau: usize,
    indices: Vec<usize>,
    step: u64,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl SelectionSchedule {
    /// Schedule starting from an explicit 0/1 pattern of length `m` with exactly `l` ones.
    pub fn from_bits(bits: &[bool], l: usize, tau: usize) -> Result<Self> {
        let m = bits.len();
        let indices: Vec<usize> = bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if indices.len() != l {
            return Err(Error::InvalidArgument(format!(
                "selection pattern has {} ones, expected l = {l}",
                indices.len()
            )));
        }
        Self::from_indices(m, indices, tau)
    }

    /// Schedule whose pattern is the given index set; `l` is its size.
    pub fn from_indices(m: usize, mut indices: Vec<usize>, tau: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.len() > m {
            return Err(Error::InvalidArgument(format!(
                "selection must share between 1 and {m} entries, got {}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!(
                "selection index {bad} out of range for m = {m}"
            )));
        }
        if m > 0 && tau % m != 0 && gcd(tau, m) > 1 {
            tracing::warn!(
                tau,
                m,
                "gcd(tau, m) > 1: entries are no longer shared uniformly over a cycle"
            );
        }
        Ok(Self {
            m,
            tau,
            indices,
            step: 0,
        })
    }

    /// Uniformly random `l`-subset pattern.
    pub fn random(m: usize, l: usize, tau: usize, rng: &mut SimRng) -> Result<Self> {
        if l == 0 || l > m {
            return Err(Error::InvalidArgument(format!(
                "shared-entry count l = {l} must satisfy 1 <= l <= m = {m}"
            )));
        }
        let indices = index::sample(rng, m, l).into_vec();
        Self::from_indices(m, indices, tau)
    }

    /// Full sharing, `S = I` at every step.
    pub fn full(m: usize) -> Self {
        Self {
            m,
            tau: 0,
            indices: (0..m).collect(),
            step: 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn shared(&self) -> usize {
        self.indices.len()
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Number of `advance` calls since construction.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// `p_e = l / m`.
    pub fn sharing_probability(&self) -> f64 {
        self.indices.len() as f64 / self.m as f64
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.m).map(|i| self.contains(i)).collect()
    }

    /// Right-circular shift of the diagonal by `tau`.
    pub fn advance(&self) -> Self {
        let mut indices: Vec<usize> = self
            .indices
            .iter()
            .map(|&i| (i + self.tau) % self.m)
            .collect();
        indices.sort_unstable();
        Self {
            m: self.m,
            tau: self.tau,
            indices,
            step: self.step + 1,
        }
    }

    pub fn advance_by(&self, steps: usize) -> Self {
        let mut s = self.clone();
        for _ in 0..steps {
            s = s.advance();
        }
        s
    }

    /// Same shift law continuing from a different pattern (used when a
    /// Byzantine agent installs a designed pattern at the attack start).
    pub fn with_indices(&self, indices: Vec<usize>) -> Result<Self> {
        let mut s = Self::from_indices(self.m, indices, self.tau)?;
        s.step = self.step;
        Ok(s)
    }

    /// `S = diag(s)`.
    pub fn matrix(&self) -> Matrix {
        let mut s = Matrix::zeros(self.m, self.m);
        for &i in &self.indices {
            s[(i, i)] = 1.0;
        }
        s
    }

    /// `S x`.
    pub fn mask(&self, x: &Vector) -> Vector {
        let mut out = Vector::zeros(x.len());
        for &i in &self.indices {
            out[i] = x[i];
        }
        out
    }

    /// `M S` (zeroes the unshared columns).
    pub fn mask_columns(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for &i in &self.indices {
            out.set_column(i, &m.column(i));
        }
        out
    }

    /// `S M` (zeroes the unshared rows).
    pub fn mask_rows(&self, m: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(m.nrows(), m.ncols());
        for &i in &self.indices {
            out.set_row(i, &m.row(i));
        }
        out
    }
}

impl fmt::Display for SelectionSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Parses a `0/1` string such as `"11000000"` into a bit pattern.
pub fn parse_pattern(s: &str) -> Result<Vec<bool>> {
    let s = s.trim().trim_matches('"');
    if s.is_empty() {
        return Err(Error::Parse("empty selection pattern".into()));
    }
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Parse(format!(
                "selection pattern may only contain 0 and 1, found {other:?}"
            ))),
        })
        .collect()
}

impl FromStr for SelectionSchedule {
    type Err = Error;

    /// Parses a bare pattern with `tau = 1`.
    fn from_str(s: &str) -> Result<Self> {
        let bits = parse_pattern(s)?;
        let l = bits.iter().filter(|&&b| b).count();
        Self::from_bits(&bits, l, 1)
    }
}

/// Block-diagonal `S(k) = diag(S_1(k), …, S_L(k))`.
pub fn network_selection(schedules: &[SelectionSchedule]) -> Result<Matrix> {
    let Some(first) = schedules.first() else {
        return Ok(Matrix::zeros(0, 0));
    };
    let m = first.state_dim();
    if schedules.iter().any(|s| s.state_dim() != m) {
        return Err(Error::Dimension(
            "all selection schedules must share the state dimension".into(),
        ));
    }
    let n = m * schedules.len();
    let mut out = Matrix::zeros(n, n);
    for (b, s) in schedules.iter().enumerate() {
        for &i in s.indices() {
            out[(b * m + i, b * m + i)] = 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, StreamTag};
    use proptest::prelude::*;

    fn sched(p: &str, tau: usize) -> SelectionSchedule {
        let bits = parse_pattern(p).unwrap();
        let l = bits.iter().filter(|&&b| b).count();
        SelectionSchedule::from_bits(&bits, l, tau).unwrap()
    }

    #[test]
    fn full_sharing_never_changes() {
        let s = sched("1111", 3);
        assert_eq!(s.advance().advance().to_string(), "1111");
        assert_eq!(s.sharing_probability(), 1.0);
    }

    #[test]
    fn quarter_sharing_pattern() {
        let s = sched("11000000", 1);
        assert_eq!(s.shared(), 2);
        assert_eq!(s.sharing_probability(), 0.25);
    }

    #[test]
    fn wrong_popcount_is_rejected() {
        let bits = parse_pattern("11000000").unwrap();
        assert!(SelectionSchedule::from_bits(&bits, 3, 1).is_err());
        let mut rng = rng::stream(0, None, StreamTag::Custom(0));
        assert!(SelectionSchedule::random(8, 9, 1, &mut rng).is_err());
        assert!(SelectionSchedule::random(8, 0, 1, &mut rng).is_err());
        assert!(parse_pattern("1102").is_err());
    }

    #[test]
    fn right_circular_shift() {
        assert_eq!(sched("1100", 1).advance().to_string(), "0110");
        assert_eq!(sched("1001", 1).advance().to_string(), "1100");
        assert_eq!(sched("1100", 4).advance().to_string(), "1100");
    }

    #[test]
    fn selection_matrix_is_a_diagonal_projector() {
        let s = sched("10", 1).matrix();
        assert_eq!(s, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let mut rng = rng::stream(1, None, StreamTag::Custom(1));
        for _ in 0..100 {
            let sch = SelectionSchedule::random(8, 3, 1, &mut rng).unwrap();
            let s = sch.matrix();
            assert_eq!(s.trace(), 3.0);
            assert_eq!(&s * &s, s);
            assert_eq!(s.transpose(), s);
        }
    }

    #[test]
    fn network_selection_assembly() {
        let a = sched("1010", 1);
        assert_eq!(network_selection(std::slice::from_ref(&a)).unwrap(), a.matrix());
        let full = vec![SelectionSchedule::full(3); 4];
        assert_eq!(network_selection(&full).unwrap(), Matrix::identity(12, 12));
        let mixed = vec![a.clone(), sched("0001", 1), sched("1110", 1)];
        assert_eq!(network_selection(&mixed).unwrap().trace(), 6.0);
        assert!(network_selection(&[a, SelectionSchedule::full(3)]).is_err());
    }

    #[test]
    fn masks_match_matrix_products() {
        let s = sched("0110", 1);
        let m = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(s.mask_columns(&m), &m * s.matrix());
        assert_eq!(s.mask_rows(&m), s.matrix() * &m);
        let x = Vector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mask(&x), s.matrix() * x);
    }

    #[test]
    fn long_run_frequency_equals_sharing_probability() {
        // tau = 1, random phase: over full cycles each entry is shared l/m of the time
        let mut rng = rng::stream(3, None, StreamTag::Custom(3));
        let (m, l) = (8, 3);
        let mut s = SelectionSchedule::random(m, l, 1, &mut rng).unwrap();
        let cycles = 5;
        let mut counts = vec![0usize; m];
        for _ in 0..cycles * m {
            for &i in s.indices() {
                counts[i] += 1;
            }
            s = s.advance();
        }
        for c in counts {
            assert_eq!(c as f64 / (cycles * m) as f64, l as f64 / m as f64);
        }
    }

    proptest! {
        #[test]
        fn popcount_conserved_and_cycle_returns(bits in proptest::collection::vec(any::<bool>(), 2..12), tau in 0usize..15) {
            let l = bits.iter().filter(|&&b| b).count();
            prop_assume!(l >= 1);
            let m = bits.len();
            let s0 = SelectionSchedule::from_bits(&bits, l, tau).unwrap();
            let mut s = s0.clone();
            for _ in 0..m {
                s = s.advance();
                prop_assert_eq!(s.shared(), l);
            }
            prop_assert_eq!(s.indices(), s0.indices());
        }

        #[test]
        fn coprime_shift_covers_each_entry_l_times(bits in proptest::collection::vec(any::<bool>(), 2..12), tau in 1usize..15, offset in 0usize..20) {
            let l = bits.iter().filter(|&&b| b).count();
            let m = bits.len();
            prop_assume!(l >= 1 && gcd(tau, m) == 1);
            let mut s = SelectionSchedule::from_bits(&bits, l, tau).unwrap().advance_by(offset);
            let mut counts = vec![0usize; m];
            for _ in 0..m {
                for &i in s.indices() { counts[i] += 1; }
                s = s.advance();
            }
            prop_assert!(counts.iter().all(|&c| c == l));
        }
    }
}
