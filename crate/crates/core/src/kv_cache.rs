//! Delta-augmented KV cache.
//!
//! Keys are kept as a dense basis plus one sparse delta column per later
//! position; only the most recent `w_d` keys are also kept exactly. Values
//! are stored densely. The running encoder state lives alongside so decoding
//! can continue the delta stream where prefilling stopped.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::delta::{delta_encode_step, init_state, DeltaEncoding, DeltaState, SparseDeltaColumn};
use crate::delta_matmul::{score_recursion, MacCounter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaKVCache {
    d_head: usize,
    w_d: usize,
    basis: Vec<f32>,
    delta_columns: Vec<SparseDeltaColumn>,
    exact_ring: VecDeque<(usize, Vec<f32>)>,
    values: Vec<Vec<f32>>,
    state: Option<DeltaState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMemory {
    /// Stored delta values (`Σ nnz`), basis excluded.
    pub delta_scalars: u64,
    pub basis_scalars: u64,
    /// Scalars held in the exact-key ring.
    pub exact_scalars: u64,
    pub value_scalars: u64,
    /// Keys stored the dense way: `n · d_head`.
    pub dense_equivalent: u64,
}

fn check_w_d(w_d: usize) -> Result<()> {
    if w_d == 0 {
        return Err(Error::Config("decode window w_d must be >= 1".into()));
    }
    Ok(())
}

impl DeltaKVCache {
    /// A cache with no positions yet. Decoding against it is a state error
    /// until the first key is pushed.
    pub fn empty(d_head: usize, w_d: usize) -> Result<Self> {
        check_w_d(w_d)?;
        Ok(Self {
            d_head,
            w_d,
            basis: Vec::new(),
            delta_columns: Vec::new(),
            exact_ring: VecDeque::new(),
            values: Vec::new(),
            state: None,
        })
    }

    /// Starts a cache from its first key/value pair.
    pub fn init(basis_key: &[f32], first_value: &[f32], w_d: usize) -> Result<Self> {
        check_w_d(w_d)?;
        let d = basis_key.len();
        if first_value.len() != d {
            return Err(Error::shape(
                "cache_init",
                format!("key has {d} elements, value {}", first_value.len()),
            ));
        }
        Ok(Self {
            d_head: d,
            w_d,
            basis: basis_key.to_vec(),
            delta_columns: Vec::new(),
            exact_ring: VecDeque::from([(0, basis_key.to_vec())]),
            values: vec![first_value.to_vec()],
            state: Some(init_state(basis_key)),
        })
    }

    /// Builds the cache a prefill of `keys`/`values` leaves behind.
    pub(crate) fn from_prefill<'a>(
        enc: DeltaEncoding,
        keys: impl ExactSizeIterator<Item = &'a [f32]>,
        values: impl Iterator<Item = &'a [f32]>,
        w_d: usize,
    ) -> Result<Self> {
        check_w_d(w_d)?;
        let n = keys.len();
        let skip = n.saturating_sub(w_d);
        let exact_ring = keys
            .enumerate()
            .skip(skip)
            .map(|(p, k)| (p, k.to_vec()))
            .collect();
        Ok(Self {
            d_head: enc.d_head(),
            w_d,
            basis: enc.basis,
            delta_columns: enc.columns,
            exact_ring,
            values: values.map(<[f32]>::to_vec).collect(),
            state: Some(enc.terminal_state),
        })
    }

    /// Reassembles a cache from stored parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d_head: usize,
        w_d: usize,
        basis: Vec<f32>,
        delta_columns: Vec<SparseDeltaColumn>,
        exact_ring: Vec<(usize, Vec<f32>)>,
        values: Vec<Vec<f32>>,
        state: Option<DeltaState>,
    ) -> Result<Self> {
        check_w_d(w_d)?;
        let cache = Self {
            d_head,
            w_d,
            basis,
            delta_columns,
            exact_ring: exact_ring.into(),
            values,
            state,
        };
        cache.validate()?;
        Ok(cache)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::State(m));
        let Some(state) = &self.state else {
            if !(self.basis.is_empty()
                && self.delta_columns.is_empty()
                && self.exact_ring.is_empty()
                && self.values.is_empty())
            {
                return bad("uninitialized cache holds data".into());
            }
            return Ok(());
        };
        let d = self.d_head;
        let n = self.len();
        if self.basis.len() != d || state.d_head() != d {
            return bad(format!("basis/reference length differs from d_head {d}"));
        }
        if state.step() + 1 != n || self.values.len() != n {
            return bad(format!(
                "length mismatch: {} delta columns, {} values, state step {}",
                self.delta_columns.len(),
                self.values.len(),
                state.step()
            ));
        }
        for (s, col) in self.delta_columns.iter().enumerate() {
            if col.index != s + 1 {
                return bad(format!("delta column {s} carries index {}", col.index));
            }
            col.validate(d)?;
        }
        if self.values.iter().any(|v| v.len() != d) {
            return bad("value vector of wrong length".into());
        }
        let expected = n.min(self.w_d);
        if self.exact_ring.len() != expected {
            return bad(format!(
                "exact ring holds {} keys, expected {expected}",
                self.exact_ring.len()
            ));
        }
        for (slot, (p, k)) in self.exact_ring.iter().enumerate() {
            if *p != n - expected + slot || k.len() != d {
                return bad(format!("exact ring slot {slot} holds position {p}"));
            }
        }
        let all_finite = self
            .basis
            .iter()
            .chain(state.reference())
            .chain(self.exact_ring.iter().flat_map(|(_, k)| k))
            .chain(self.values.iter().flatten())
            .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite cached scalar".into());
        }
        // The running reference must be the prefix sum of the stored deltas.
        let mut reference = self.basis.clone();
        for col in &self.delta_columns {
            col.apply(&mut reference);
        }
        if reference != state.reference() {
            return bad("reference state disagrees with basis + deltas".into());
        }
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        if self.state.is_some() {
            self.delta_columns.len() + 1
        } else {
            0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn w_d(&self) -> usize {
        self.w_d
    }

    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    pub fn delta_columns(&self) -> &[SparseDeltaColumn] {
        &self.delta_columns
    }

    /// `(position, key)` pairs, oldest first.
    pub fn exact_ring(&self) -> impl ExactSizeIterator<Item = (usize, &[f32])> {
        self.exact_ring.iter().map(|(p, k)| (*p, k.as_slice()))
    }

    pub fn values(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn state(&self) -> Option<&DeltaState> {
        self.state.as_ref()
    }

    fn require_state(&self) -> Result<&DeltaState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::State("cache is not initialized".into()))
    }

    /// Runs the encoder for the next key without mutating the cache.
    pub fn encode(&self, k_new: &[f32], theta: f32) -> Result<(SparseDeltaColumn, DeltaState)> {
        delta_encode_step(k_new, self.require_state()?, theta)
    }

    /// Appends a delta produced by [`DeltaKVCache::encode`] together with the
    /// exact key and the value for the same position.
    pub fn append(
        &mut self,
        delta: SparseDeltaColumn,
        state: DeltaState,
        k_new: &[f32],
        v_new: &[f32],
    ) -> Result<()> {
        let next = self.require_state()?.step() + 1;
        if delta.index != next || state.step() != next {
            return Err(Error::State(format!(
                "append expected position {next}, got delta {} / state {}",
                delta.index,
                state.step()
            )));
        }
        if k_new.len() != self.d_head || v_new.len() != self.d_head {
            return Err(Error::shape(
                "cache_append",
                format!("vectors must have d_head {} elements", self.d_head),
            ));
        }
        self.delta_columns.push(delta);
        self.exact_ring.push_back((next, k_new.to_vec()));
        while self.exact_ring.len() > self.w_d {
            self.exact_ring.pop_front();
        }
        self.values.push(v_new.to_vec());
        self.state = Some(state);
        Ok(())
    }

    /// Decode-path update: initializes an empty cache, otherwise encodes
    /// and appends.
    pub fn push_token(&mut self, k_new: &[f32], v_new: &[f32], theta: f32) -> Result<()> {
        if self.state.is_none() {
            if k_new.len() != self.d_head {
                return Err(Error::shape(
                    "push_token",
                    format!("key has {} elements, d_head {}", k_new.len(), self.d_head),
                ));
            }
            *self = Self::init(k_new, v_new, self.w_d)?;
            return Ok(());
        }
        let (delta, state) = self.encode(k_new, theta)?;
        self.append(delta, state, k_new, v_new)
    }

    /// Key held for position `p`: basis plus deltas `1..=p`.
    pub fn reconstruct_position(&self, p: usize) -> Result<Vec<f32>> {
        if p >= self.len() {
            return Err(Error::Bounds {
                index: p,
                len: self.len(),
            });
        }
        let mut reference = self.basis.clone();
        for col in &self.delta_columns[..p] {
            col.apply(&mut reference);
        }
        Ok(reference)
    }

    /// Delta-recursion scores of `q` against positions `0..=upto`.
    pub fn delta_scores(
        &self,
        q: &[f32],
        upto: usize,
        counter: &mut MacCounter,
    ) -> Result<Vec<f32>> {
        self.require_state()?;
        if q.len() != self.d_head {
            return Err(Error::shape(
                "delta_scores",
                format!("query has {} elements, d_head {}", q.len(), self.d_head),
            ));
        }
        if upto >= self.len() {
            return Err(Error::Bounds {
                index: upto,
                len: self.len(),
            });
        }
        Ok(score_recursion(
            q,
            &self.basis,
            &self.delta_columns,
            upto,
            counter,
        ))
    }

    pub fn delta_nnz(&self) -> u64 {
        self.delta_columns.iter().map(|c| c.nnz() as u64).sum()
    }

    pub fn memory_report(&self) -> CacheMemory {
        let d = self.d_head as u64;
        let n = self.len() as u64;
        CacheMemory {
            delta_scalars: self.delta_nnz(),
            basis_scalars: if n > 0 { d } else { 0 },
            exact_scalars: self.exact_ring.len() as u64 * d,
            value_scalars: self.values.len() as u64 * d,
            dense_equivalent: n * d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_has_one_position() {
        let c = DeltaKVCache::init(&[1.0, 2.0], &[3.0, 4.0], 4).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.exact_ring().len(), 1);
        assert_eq!(c.reconstruct_position(0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(c, DeltaKVCache::init(&[1.0, 2.0], &[3.0, 4.0], 4).unwrap());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_window_rejected() {
        assert!(matches!(
            DeltaKVCache::init(&[1.0], &[1.0], 0),
            Err(Error::Config(_))
        ));
        assert!(DeltaKVCache::empty(2, 0).is_err());
    }

    #[test]
    fn ring_evicts_oldest() {
        let w_d = 3;
        let mut c = DeltaKVCache::init(&[0.0], &[0.0], w_d).unwrap();
        for t in 1..=w_d + 1 {
            c.push_token(&[t as f32], &[t as f32], 0.5).unwrap();
        }
        let positions: Vec<usize> = c.exact_ring().map(|(p, _)| p).collect();
        assert_eq!(positions, vec![2, 3, 4]);
        assert_eq!(c.values().len(), 5);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn append_rejects_index_gap() {
        let mut c = DeltaKVCache::init(&[0.0, 0.0], &[0.0, 0.0], 2).unwrap();
        let (mut delta, state) = c.encode(&[1.0, 1.0], 0.1).unwrap();
        delta.index = 5;
        assert!(matches!(
            c.append(delta, state, &[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn empty_cache_is_uninitialized() {
        let c = DeltaKVCache::empty(2, 2).unwrap();
        assert!(!c.is_initialized());
        assert!(matches!(c.encode(&[0.0, 0.0], 0.1), Err(Error::State(_))));
        assert!(matches!(
            c.delta_scores(&[0.0, 0.0], 0, &mut MacCounter::default()),
            Err(Error::State(_))
        ));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn push_token_initializes() {
        let mut a = DeltaKVCache::empty(2, 2).unwrap();
        a.push_token(&[1.0, 2.0], &[0.5, 0.5], 0.1).unwrap();
        assert_eq!(a, DeltaKVCache::init(&[1.0, 2.0], &[0.5, 0.5], 2).unwrap());
    }

    #[test]
    fn constant_stream_has_no_delta_scalars() {
        let mut c = DeltaKVCache::init(&[1.0, -1.0, 0.5], &[0.0; 3], 2).unwrap();
        for _ in 0..10 {
            c.push_token(&[1.0, -1.0, 0.5], &[0.0; 3], 0.2).unwrap();
        }
        let m = c.memory_report();
        assert_eq!(m.delta_scalars, 0);
        assert_eq!(m.dense_equivalent, 33);
        assert_eq!(m.exact_scalars, 6);
        assert_eq!(m.value_scalars, 33);
    }

    #[test]
    fn changing_stream_at_zero_threshold_is_dense() {
        let mut c = DeltaKVCache::init(&[0.0, 0.0], &[0.0; 2], 2).unwrap();
        for t in 1..8 {
            c.push_token(&[t as f32, -(t as f32)], &[0.0; 2], 0.0)
                .unwrap();
        }
        assert_eq!(c.memory_report().delta_scalars, 7 * 2);
    }

    #[test]
    fn from_parts_rejects_bad_ring() {
        let mut c = DeltaKVCache::init(&[0.0], &[0.0], 2).unwrap();
        c.push_token(&[1.0], &[1.0], 0.1).unwrap();
        let ring: Vec<_> = vec![(0, vec![0.0]), (2, vec![1.0])];
        let r = DeltaKVCache::from_parts(
            1,
            2,
            c.basis().to_vec(),
            c.delta_columns().to_vec(),
            ring,
            c.values().to_vec(),
            c.state().cloned(),
        );
        assert!(r.is_err());
    }
}
