//! Brute-force references shared by the oracle suites and the acceptance
//! target. Each check returns a tally instead of asserting so callers can
//! report or assert as they like.
#![allow(dead_code)]

pub mod geometry;
pub mod ocp;
pub mod reference;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub cases: usize,
    pub mismatches: usize,
}

impl Tally {
    pub fn add(&mut self, ok: bool) {
        self.cases += 1;
        if !ok {
            self.mismatches += 1;
        }
    }

    pub fn merge(self, other: Tally) -> Tally {
        Tally {
            cases: self.cases + other.cases,
            mismatches: self.mismatches + other.mismatches,
        }
    }
}
