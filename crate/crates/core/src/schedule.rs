//! Biexponential experiment schedules.
//!
//! Experiments are grouped into flights of consecutive `t` values. Flight
//! bases are `ϱ(a) + ϱ(b)` for `a <= a_bar`, `b <= b_bar`, where
//! `ϱ(0) = 0` and `ϱ(i) = 2^(i-1)`, so the reach in `t` grows exponentially
//! while the number of experiments grows polylogarithmically.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{QpiError, Result};

/// `0` for `i = 0`, otherwise `2^(i-1)`.
pub fn rho(i: usize) -> u64 {
    if i == 0 {
        0
    } else {
        1u64 << (i - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub l: usize,
    pub a_bar: usize,
    pub b_bar: usize,
    pub flight_len: usize,
}

impl ScheduleParams {
    /// Parameters with the default flight length `2l + 2`, long enough to hold
    /// both the Hankel matrix and its one-step shift.
    pub fn new(l: usize, a_bar: usize, b_bar: usize) -> Self {
        ScheduleParams { l, a_bar, b_bar, flight_len: 2 * l + 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flight_len < 2 * self.l + 1 {
            return Err(QpiError::Config(format!(
                "flight_len {} is shorter than 2l+1 = {}",
                self.flight_len,
                2 * self.l + 1
            )));
        }
        if self.a_bar > 62 || self.b_bar > 62 {
            return Err(QpiError::Config("a_bar and b_bar must be at most 62".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Flight {
    pub base: u64,
    pub len: usize,
}

impl Flight {
    pub fn times(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len as u64).map(move |k| self.base + k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    params: ScheduleParams,
    bases: Vec<u64>,
    flights: Vec<Flight>,
    t_set: Vec<u64>,
    blocks: Vec<Vec<u64>>,
}

impl Schedule {
    pub fn build(params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        let bases: BTreeSet<u64> =
            (0..=params.a_bar).flat_map(|a| (0..=params.b_bar).map(move |b| rho(a) + rho(b))).collect();
        let flights: Vec<Flight> = bases.iter().map(|&base| Flight { base, len: params.flight_len }).collect();
        let t_set: BTreeSet<u64> = flights.iter().flat_map(|f| f.times().collect::<Vec<_>>()).collect();
        let blocks = (0..=params.b_bar)
            .map(|b| {
                let set: BTreeSet<u64> = (0..=params.a_bar).map(|a| rho(a) + rho(b)).collect();
                set.into_iter().collect()
            })
            .collect();
        Ok(Schedule { params, bases: bases.into_iter().collect(), flights, t_set: t_set.into_iter().collect(), blocks })
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn l(&self) -> usize {
        self.params.l
    }

    /// Sorted distinct flight bases.
    pub fn bases(&self) -> &[u64] {
        &self.bases
    }

    pub fn flights(&self) -> &[Flight] {
        &self.flights
    }

    /// Sorted union of all flight times.
    pub fn t_set(&self) -> &[u64] {
        &self.t_set
    }

    pub fn max_t(&self) -> u64 {
        *self.t_set.last().expect("a schedule always has at least one flight")
    }

    /// Flight bases in block `b`, i.e. `{ϱ(a) + ϱ(b) : a <= a_bar}`.
    pub fn block_bases(&self, b: usize) -> &[u64] {
        &self.blocks[b]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn contains(&self, t: u64) -> bool {
        self.t_set.binary_search(&t).is_ok()
    }

    /// Number of Hankel cells each time value occupies per `(i, m)` pair.
    ///
    /// A cell `(a, k1) x (b, k2)` holds the experiment at
    /// `ϱ(a) + ϱ(b) + k1 + k2 + shift`; `shift = 1` gives the multiplicities
    /// of the time-shifted matrix.
    pub fn multiplicity_with_shift(&self, shift: u64) -> BTreeMap<u64, usize> {
        let l = self.params.l as u64;
        let mut out = BTreeMap::new();
        for a in 0..=self.params.a_bar {
            for b in 0..=self.params.b_bar {
                for k1 in 0..=l {
                    for k2 in 0..=l {
                        *out.entry(rho(a) + rho(b) + k1 + k2 + shift).or_insert(0) += 1;
                    }
                }
            }
        }
        out
    }

    /// Multiplicity of every experiment time across all block matrices.
    /// The count is the same for every `(i, m)` pair.
    pub fn multiplicity(&self) -> BTreeMap<u64, usize> {
        self.multiplicity_with_shift(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_values() {
        assert_eq!(rho(0), 0);
        assert_eq!(rho(1), 1);
        assert_eq!(rho(2), 2);
        assert_eq!(rho(3), 4);
        assert_eq!(rho(4), 8);
        assert_eq!(rho(10), 512);
    }

    #[test]
    fn small_schedule_enumeration() {
        let s = Schedule::build(ScheduleParams { l: 1, a_bar: 1, b_bar: 1, flight_len: 4 }).unwrap();
        assert_eq!(s.bases(), &[0, 1, 2]);
        assert_eq!(s.t_set(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(s.block_bases(0), &[0, 1]);
        assert_eq!(s.block_bases(1), &[1, 2]);
    }

    #[test]
    fn single_flight() {
        let s = Schedule::build(ScheduleParams { l: 2, a_bar: 0, b_bar: 0, flight_len: 6 }).unwrap();
        assert_eq!(s.flights().len(), 1);
        assert_eq!(s.t_set(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn max_t_formula() {
        for a_bar in 1..6 {
            for b_bar in 1..6 {
                let p = ScheduleParams::new(2, a_bar, b_bar);
                let s = Schedule::build(p).unwrap();
                assert_eq!(s.max_t(), rho(a_bar) + rho(b_bar) + p.flight_len as u64 - 1);
            }
        }
    }

    #[test]
    fn t_set_size_bound_with_overlap_oracle() {
        for a_bar in 0..5 {
            for b_bar in 0..5 {
                for flight_len in 1..8 {
                    let p = ScheduleParams { l: 0, a_bar, b_bar, flight_len };
                    let s = Schedule::build(p).unwrap();
                    let bases = s.bases();
                    let overlapping = bases.windows(2).any(|w| w[1] - w[0] < flight_len as u64);
                    let bound = bases.len() * flight_len;
                    assert!(s.t_set().len() <= bound);
                    assert_eq!(s.t_set().len() == bound, !overlapping);
                    assert!(s.t_set().len() <= (a_bar + 1) * (b_bar + 1) * flight_len);
                }
            }
        }
    }

    #[test]
    fn full_scale_schedules() {
        let drift = Schedule::build(ScheduleParams { l: 5, a_bar: 10, b_bar: 10, flight_len: 12 }).unwrap();
        assert_eq!((drift.flights().len(), drift.t_set().len(), drift.max_t()), (57, 304, 1035));
        let leak = Schedule::build(ScheduleParams { l: 2, a_bar: 10, b_bar: 10, flight_len: 6 }).unwrap();
        assert_eq!((leak.flights().len(), leak.t_set().len(), leak.max_t()), (57, 196, 1029));
        let spin = Schedule::build(ScheduleParams { l: 2, a_bar: 0, b_bar: 11, flight_len: 7 }).unwrap();
        assert_eq!((spin.flights().len(), spin.t_set().len(), spin.max_t()), (12, 64, 1030));
    }

    #[test]
    fn block_offsets_relate_to_block_zero() {
        let s = Schedule::build(ScheduleParams::new(1, 3, 4)).unwrap();
        for b in 0..s.n_blocks() {
            let shifted: BTreeSet<u64> = s.block_bases(0).iter().map(|x| x + rho(b)).collect();
            let actual: BTreeSet<u64> = s.block_bases(b).iter().copied().collect();
            assert_eq!(shifted, actual);
        }
    }

    #[test]
    fn single_flight_multiplicities() {
        let s = Schedule::build(ScheduleParams::new(1, 0, 0)).unwrap();
        let m = s.multiplicity();
        assert_eq!(m[&0], 1);
        assert_eq!(m[&1], 2);
        assert_eq!(m[&2], 1);
    }

    #[test]
    fn multiplicities_sum_to_cell_count() {
        let p = ScheduleParams::new(2, 3, 2);
        let s = Schedule::build(p).unwrap();
        let total: usize = s.multiplicity().values().sum();
        let per_side = |bar: usize| (bar + 1) * (p.l + 1);
        assert_eq!(total, per_side(p.a_bar) * per_side(p.b_bar));
        for t in s.multiplicity().keys() {
            assert!(s.contains(*t));
        }
        for t in s.multiplicity_with_shift(1).keys() {
            assert!(s.contains(*t));
        }
    }

    #[test]
    fn short_flights_are_rejected() {
        assert!(Schedule::build(ScheduleParams { l: 3, a_bar: 0, b_bar: 0, flight_len: 6 }).is_err());
    }
}
