//! The compositional label universe.
//!
//! States and objects get dense ids in declaration order. Closed-world pairs
//! are the seen pairs followed by the unseen pairs, each in input order, and
//! the position in that list is the pair id used by every score tensor.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A (state, object) composition label, by component id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub state: usize,
    pub object: usize,
}

impl Pair {
    pub const fn new(state: usize, object: usize) -> Self {
        Pair { state, object }
    }
}

/// Dense id of a closed-world pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId(pub usize);

/// Either primitive of a composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    State(usize),
    Object(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSplit {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSpace {
    states: Vec<String>,
    objects: Vec<String>,
    pairs: Vec<Pair>,
    n_seen: usize,
    // |S|·|O| grids, row-major by state
    lookup: Vec<Option<PairId>>,
    seen_grid: Vec<bool>,
}

impl CompositionSpace {
    /// Builds a space from component names and name-pairs.
    pub fn new<S: AsRef<str>>(
        states: Vec<String>,
        objects: Vec<String>,
        seen: &[(S, S)],
        unseen: &[(S, S)],
    ) -> Result<Self> {
        let state_ids = name_index(&states, "state")?;
        let object_ids = name_index(&objects, "object")?;
        let resolve = |(s, o): &(S, S)| -> Result<Pair> {
            let (s, o) = (s.as_ref(), o.as_ref());
            let state = *state_ids
                .get(s)
                .ok_or_else(|| Error::UnknownComponent(format!("state {s:?}")))?;
            let object = *object_ids
                .get(o)
                .ok_or_else(|| Error::UnknownComponent(format!("object {o:?}")))?;
            Ok(Pair::new(state, object))
        };
        let seen = seen.iter().map(resolve).collect::<Result<Vec<_>>>()?;
        let unseen = unseen.iter().map(resolve).collect::<Result<Vec<_>>>()?;
        Self::assemble(states, objects, seen, unseen)
    }

    /// Builds a space from component counts and id pairs. Names are
    /// generated as `state_<i>` / `object_<j>`.
    pub fn from_indices(
        n_states: usize,
        n_objects: usize,
        seen: &[Pair],
        unseen: &[Pair],
    ) -> Result<Self> {
        let states = (0..n_states).map(|i| format!("state_{i}")).collect();
        let objects = (0..n_objects).map(|i| format!("object_{i}")).collect();
        Self::assemble(states, objects, seen.to_vec(), unseen.to_vec())
    }

    fn assemble(
        states: Vec<String>,
        objects: Vec<String>,
        seen: Vec<Pair>,
        unseen: Vec<Pair>,
    ) -> Result<Self> {
        let (n_states, n_objects) = (states.len(), objects.len());
        for p in seen.iter().chain(&unseen) {
            if p.state >= n_states {
                return Err(Error::UnknownComponent(format!("state id {}", p.state)));
            }
            if p.object >= n_objects {
                return Err(Error::UnknownComponent(format!("object id {}", p.object)));
            }
        }

        let mut seen_grid = vec![false; n_states * n_objects];
        for p in &seen {
            seen_grid[p.state * n_objects + p.object] = true;
        }
        if let Some(p) = unseen.iter().find(|p| seen_grid[p.state * n_objects + p.object]) {
            return Err(Error::SplitOverlap {
                state: states[p.state].clone(),
                object: objects[p.object].clone(),
            });
        }

        let n_seen = seen.len();
        let pairs: Vec<Pair> = seen.into_iter().chain(unseen).collect();
        let mut lookup = vec![None; n_states * n_objects];
        for (id, p) in pairs.iter().enumerate() {
            let slot = &mut lookup[p.state * n_objects + p.object];
            if slot.is_some() {
                return Err(Error::DuplicatePair {
                    state: states[p.state].clone(),
                    object: objects[p.object].clone(),
                });
            }
            *slot = Some(PairId(id));
        }

        Ok(CompositionSpace {
            states,
            objects,
            pairs,
            n_seen,
            lookup,
            seen_grid,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn n_unseen(&self) -> usize {
        self.pairs.len() - self.n_seen
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn object_names(&self) -> &[String] {
        &self.objects
    }

    /// All closed-world pairs, indexed by pair id.
    pub fn closed_pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Seen pairs; the position in this slice is also the pair id.
    pub fn seen_pairs(&self) -> &[Pair] {
        &self.pairs[..self.n_seen]
    }

    pub fn unseen_pairs(&self) -> &[Pair] {
        &self.pairs[self.n_seen..]
    }

    pub fn pair(&self, id: PairId) -> Result<Pair> {
        self.pairs
            .get(id.0)
            .copied()
            .ok_or_else(|| Error::UnknownComponent(format!("pair id {}", id.0)))
    }

    pub fn is_seen_id(&self, id: PairId) -> bool {
        id.0 < self.n_seen
    }

    /// Dense id of a pair, `None` if it is not in the closed world.
    pub fn pair_id(&self, pair: Pair) -> Result<Option<PairId>> {
        self.check_pair(pair)?;
        Ok(self.lookup[pair.state * self.n_objects() + pair.object])
    }

    /// Column of a seen pair in a seen-only score matrix.
    pub fn seen_column(&self, pair: Pair) -> Result<Option<usize>> {
        Ok(self.pair_id(pair)?.filter(|id| id.0 < self.n_seen).map(|id| id.0))
    }

    /// ψ(s, o): 1 iff the pair belongs to the seen set.
    pub fn psi(&self, state: usize, object: usize) -> Result<u8> {
        self.check_pair(Pair::new(state, object))?;
        Ok(self.seen_grid[state * self.n_objects() + object] as u8)
    }

    /// ψ̂(a, y): 1 iff component `a` is a member of pair `y`.
    pub fn psi_hat(&self, component: Component, pair: Pair) -> Result<u8> {
        self.check_pair(pair)?;
        let member = match component {
            Component::State(s) => {
                if s >= self.n_states() {
                    return Err(Error::UnknownComponent(format!("state id {s}")));
                }
                s == pair.state
            }
            Component::Object(o) => {
                if o >= self.n_objects() {
                    return Err(Error::UnknownComponent(format!("object id {o}")));
                }
                o == pair.object
            }
        };
        Ok(member as u8)
    }

    pub fn state_id(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn object_id(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    fn check_pair(&self, pair: Pair) -> Result<()> {
        if pair.state >= self.n_states() {
            return Err(Error::UnknownComponent(format!("state id {}", pair.state)));
        }
        if pair.object >= self.n_objects() {
            return Err(Error::UnknownComponent(format!("object id {}", pair.object)));
        }
        Ok(())
    }

    /// Hex SHA-256 over the names and the ordered pair list. Two spaces
    /// with the same fingerprint index every tensor identically.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, names) in [("S", &self.states), ("O", &self.objects)] {
            hasher.update(tag.as_bytes());
            hasher.update((names.len() as u64).to_le_bytes());
            for n in names {
                hasher.update((n.len() as u64).to_le_bytes());
                hasher.update(n.as_bytes());
            }
        }
        hasher.update((self.n_seen as u64).to_le_bytes());
        for p in &self.pairs {
            hasher.update((p.state as u64).to_le_bytes());
            hasher.update((p.object as u64).to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn name_index<'a>(names: &'a [String], what: &str) -> Result<HashMap<&'a str, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if map.insert(n.as_str(), i).is_some() {
            return Err(Error::Config(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn ut_zappos_shape() {
        // 16 states x 12 objects = 192 candidates; take the first 116 in
        // row-major order: 83 seen, 15 + 18 unseen.
        let all: Vec<Pair> = (0..16)
            .flat_map(|s| (0..12).map(move |o| Pair::new(s, o)))
            .take(83 + 15 + 18)
            .collect();
        let space = CompositionSpace::from_indices(16, 12, &all[..83], &all[83..]).unwrap();
        assert_eq!(space.n_states(), 16);
        assert_eq!(space.n_objects(), 12);
        assert_eq!(space.n_seen(), 83);
        assert_eq!(space.n_unseen(), 33);
        assert_eq!(space.n_pairs(), 116);
    }

    #[test]
    fn minimal_space() {
        let space =
            CompositionSpace::new(names("s", 1), names("o", 1), &[("s0", "o0")], &[]).unwrap();
        assert_eq!(space.n_pairs(), 1);
        assert_eq!(space.psi(0, 0).unwrap(), 1);
    }

    #[test]
    fn overlap_is_rejected() {
        let err = CompositionSpace::new(
            names("s", 1),
            names("o", 1),
            &[("s0", "o0")],
            &[("s0", "o0")],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SplitOverlap { .. }));
    }

    #[test]
    fn duplicates_and_unknowns() {
        let err = CompositionSpace::new(
            names("s", 2),
            names("o", 2),
            &[("s0", "o0"), ("s0", "o0")],
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicatePair { .. }));

        let err = CompositionSpace::new(names("s", 2), names("o", 2), &[("s5", "o0")], &[])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownComponent(_)));

        let err = CompositionSpace::from_indices(2, 2, &[Pair::new(0, 2)], &[]).unwrap_err();
        assert!(matches!(err, Error::UnknownComponent(_)));
    }

    #[test]
    fn psi_and_psi_hat() {
        let space = CompositionSpace::from_indices(
            3,
            3,
            &[Pair::new(0, 0), Pair::new(1, 2)],
            &[Pair::new(2, 1)],
        )
        .unwrap();
        assert_eq!(space.psi(0, 0).unwrap(), 1);
        assert_eq!(space.psi(1, 2).unwrap(), 1);
        assert_eq!(space.psi(2, 1).unwrap(), 0);
        assert_eq!(space.psi(2, 2).unwrap(), 0);
        assert!(matches!(space.psi(3, 0), Err(Error::UnknownComponent(_))));

        let y = Pair::new(1, 2);
        assert_eq!(space.psi_hat(Component::State(1), y).unwrap(), 1);
        assert_eq!(space.psi_hat(Component::State(0), y).unwrap(), 0);
        assert_eq!(space.psi_hat(Component::Object(2), y).unwrap(), 1);
        assert_eq!(space.psi_hat(Component::Object(1), y).unwrap(), 0);
        assert!(space.psi_hat(Component::Object(9), y).is_err());

        assert_eq!(space.seen_column(Pair::new(1, 2)).unwrap(), Some(1));
        assert_eq!(space.seen_column(Pair::new(2, 1)).unwrap(), None);
        assert_eq!(space.pair_id(Pair::new(2, 1)).unwrap(), Some(PairId(2)));
        assert_eq!(space.pair_id(Pair::new(2, 2)).unwrap(), None);
    }

    #[test]
    fn ids_follow_input_order() {
        let seen = [("s1", "o0"), ("s0", "o1")];
        let a = CompositionSpace::new(names("s", 2), names("o", 2), &seen, &[("s0", "o0")]).unwrap();
        let b = CompositionSpace::new(names("s", 2), names("o", 2), &seen, &[("s0", "o0")]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.closed_pairs()[0], Pair::new(1, 0));
        assert_eq!(a.closed_pairs()[2], Pair::new(0, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_space() -> impl Strategy<Value = CompositionSpace> {
            (1usize..6, 1usize..6)
                .prop_flat_map(|(ns, no)| {
                    let all: Vec<Pair> = (0..ns)
                        .flat_map(|s| (0..no).map(move |o| Pair::new(s, o)))
                        .collect();
                    let n = all.len();
                    (Just((ns, no)), Just(all).prop_shuffle(), 0..=n, 0..=n)
                })
                .prop_map(|((ns, no), all, a, b)| {
                    let (lo, hi) = (a.min(b), a.max(b));
                    CompositionSpace::from_indices(ns, no, &all[..lo], &all[lo..hi]).unwrap()
                })
        }

        proptest! {
            #[test]
            fn masks_match_membership(space in arb_space()) {
                for s in 0..space.n_states() {
                    for o in 0..space.n_objects() {
                        let p = Pair::new(s, o);
                        let expected = space.seen_pairs().contains(&p) as u8;
                        prop_assert_eq!(space.psi(s, o).unwrap(), expected);
                    }
                }
                for &p in space.closed_pairs() {
                    prop_assert_eq!(space.psi_hat(Component::State(p.state), p).unwrap(), 1);
                    prop_assert_eq!(space.psi_hat(Component::Object(p.object), p).unwrap(), 1);
                }
            }
        }
    }
}
