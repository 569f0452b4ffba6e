//! Streaming sequential ranks for one coordinate.
//!
//! [`RankState`] keeps the observed multiset in an order-statistic treap so
//! that inserting a value and asking how many stored values lie strictly
//! below it (or are equal to it) costs `O(log n)`. Ranks are carried around
//! as exact integer counts in [`RankPair`] and only become floating point at
//! the randomization boundary.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    key: f64,
    mult: u64,
    size: u64,
    prio: u64,
    left: u32,
    right: u32,
}

/// Order-statistic multiset over finite reals.
#[derive(Debug, Clone)]
pub struct RankState {
    nodes: Vec<Node>,
    root: u32,
    n: u64,
}

/// Sequential rank of the latest observation, as integer counts.
///
/// `at_or_below / n` is the empirical CDF evaluated at the observation and
/// `below / n` its left limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankPair {
    pub at_or_below: u64,
    pub below: u64,
    pub n: u64,
}

/// Axis-aligned rectangle on which a randomized rank pair is uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRectangle {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

// splitmix64 finalizer; only used to derive treap priorities from slot indices
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rejects NaN and infinities; maps `-0.0` to `0.0`.
pub fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        // -0.0 and 0.0 compare equal as reals; store a single representative
        Ok(x + 0.0)
    } else {
        Err(Error::InvalidObservation(x))
    }
}

impl Default for RankState {
    fn default() -> Self {
        Self::new()
    }
}

impl RankState {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            root: NIL,
            n: 0,
        }
    }

    /// Number of inserted values, counting multiplicity.
    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Number of distinct stored values.
    pub fn distinct(&self) -> usize {
        self.nodes.len()
    }

    fn size(&self, t: u32) -> u64 {
        if t == NIL {
            0
        } else {
            self.nodes[t as usize].size
        }
    }

    fn pull(&mut self, t: u32) {
        let (l, r) = (self.nodes[t as usize].left, self.nodes[t as usize].right);
        let s = self.size(l) + self.size(r) + self.nodes[t as usize].mult;
        self.nodes[t as usize].size = s;
    }

    fn rotate_right(&mut self, t: u32) -> u32 {
        let l = self.nodes[t as usize].left;
        self.nodes[t as usize].left = self.nodes[l as usize].right;
        self.nodes[l as usize].right = t;
        self.pull(t);
        self.pull(l);
        l
    }

    fn rotate_left(&mut self, t: u32) -> u32 {
        let r = self.nodes[t as usize].right;
        self.nodes[t as usize].right = self.nodes[r as usize].left;
        self.nodes[r as usize].left = t;
        self.pull(t);
        self.pull(r);
        r
    }

    fn insert_at(&mut self, t: u32, key: f64) -> u32 {
        if t == NIL {
            let idx = self.nodes.len();
            assert!(idx < NIL as usize, "rank state capacity exceeded");
            self.nodes.push(Node {
                key,
                mult: 1,
                size: 1,
                prio: mix64(idx as u64),
                left: NIL,
                right: NIL,
            });
            return idx as u32;
        }
        let node_key = self.nodes[t as usize].key;
        match key.partial_cmp(&node_key).expect("finite keys") {
            std::cmp::Ordering::Equal => {
                let node = &mut self.nodes[t as usize];
                node.mult += 1;
                node.size += 1;
                t
            }
            std::cmp::Ordering::Less => {
                let l = self.insert_at(self.nodes[t as usize].left, key);
                self.nodes[t as usize].left = l;
                self.nodes[t as usize].size += 1;
                if self.nodes[l as usize].prio > self.nodes[t as usize].prio {
                    self.rotate_right(t)
                } else {
                    t
                }
            }
            std::cmp::Ordering::Greater => {
                let r = self.insert_at(self.nodes[t as usize].right, key);
                self.nodes[t as usize].right = r;
                self.nodes[t as usize].size += 1;
                if self.nodes[r as usize].prio > self.nodes[t as usize].prio {
                    self.rotate_left(t)
                } else {
                    t
                }
            }
        }
    }

    /// Inserts `x` without computing its rank.
    pub fn insert(&mut self, x: f64) -> Result<()> {
        let x = check_finite(x)?;
        self.root = self.insert_at(self.root, x);
        self.n += 1;
        Ok(())
    }

    /// Returns `(#{x_i < x}, #{x_i == x})` over the stored values.
    pub fn counts(&self, x: f64) -> (u64, u64) {
        let mut below = 0;
        let mut t = self.root;
        while t != NIL {
            let node = &self.nodes[t as usize];
            if x < node.key {
                t = node.left;
            } else if x > node.key {
                below += self.size(node.left) + node.mult;
                t = node.right;
            } else {
                return (below + self.size(node.left), node.mult);
            }
        }
        (below, 0)
    }

    pub fn below(&self, x: f64) -> u64 {
        self.counts(x).0
    }

    pub fn at(&self, x: f64) -> u64 {
        self.counts(x).1
    }

    pub fn above(&self, x: f64) -> u64 {
        let (b, a) = self.counts(x);
        self.n - b - a
    }

    /// Inserts `x` and returns its sequential rank among all values so far.
    pub fn insert_and_rank(&mut self, x: f64) -> Result<RankPair> {
        self.insert(x)?;
        let (below, at) = self.counts(x + 0.0);
        Ok(RankPair {
            at_or_below: below + at,
            below,
            n: self.n,
        })
    }

    /// Stored values in ascending order, repeated by multiplicity.
    pub fn sorted_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n as usize);
        let mut stack = Vec::new();
        let mut t = self.root;
        while t != NIL || !stack.is_empty() {
            while t != NIL {
                stack.push(t);
                t = self.nodes[t as usize].left;
            }
            let top = stack.pop().expect("non-empty stack");
            let node = &self.nodes[top as usize];
            out.extend(std::iter::repeat_n(node.key, node.mult as usize));
            t = node.right;
        }
        out
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut state = Self::new();
        for &v in values {
            state.insert(v)?;
        }
        Ok(state)
    }
}

impl Serialize for RankState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.sorted_values().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RankState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(deserializer)?;
        RankState::from_values(&values).map_err(serde::de::Error::custom)
    }
}

impl RankPair {
    /// The empirical CDF at the observation.
    pub fn fhat(&self) -> f64 {
        self.at_or_below as f64 / self.n as f64
    }

    /// The left limit of the empirical CDF at the observation.
    pub fn fhat_minus(&self) -> f64 {
        self.below as f64 / self.n as f64
    }

    /// How many stored values equal the observation (including itself).
    pub fn multiplicity(&self) -> u64 {
        self.at_or_below - self.below
    }

    pub fn is_tied(&self) -> bool {
        self.multiplicity() > 1
    }

    /// Smoothed rank `u·F̂(x) + (1−u)·F̂(x−)`, uniform on `[0,1]` under iid sampling.
    pub fn randomize(&self, u: f64) -> Result<f64> {
        randomize(self, u)
    }
}

/// Randomized rank `u·fhat + (1−u)·fhat_minus` for `u ∈ (0,1)`.
pub fn randomize(pair: &RankPair, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidRandomizer(u));
    }
    Ok(u * pair.fhat() + (1.0 - u) * pair.fhat_minus())
}

/// Rectangle `[fhat_x − 1/n, fhat_x] × [fhat_y − 1/n, fhat_y]` for tie-free ranks.
pub fn rank_rectangle(px: &RankPair, py: &RankPair) -> Result<RankRectangle> {
    if px.is_tied() || py.is_tied() {
        return Err(Error::TiesPresent(format!(
            "multiplicities ({}, {}) at n = {}",
            px.multiplicity(),
            py.multiplicity(),
            px.n
        )));
    }
    if px.n != py.n || px.n == 0 {
        return Err(Error::InvalidInput(format!(
            "rank pairs from different times ({} vs {})",
            px.n, py.n
        )));
    }
    Ok(RankRectangle {
        x_lo: px.fhat_minus(),
        x_hi: px.fhat(),
        y_lo: py.fhat_minus(),
        y_hi: py.fhat(),
    })
}

/// Non-sequential ranks `F̂_d(x_i) = #{j: x_j ≤ x_i}/d` of a whole batch.
pub fn batch_ranks(values: &[f64]) -> Result<Vec<RankPair>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut sorted = values
        .iter()
        .map(|&v| check_finite(v))
        .collect::<Result<Vec<_>>>()?;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len() as u64;
    Ok(values
        .iter()
        .map(|&v| {
            let v = v + 0.0;
            let below = sorted.partition_point(|&s| s < v) as u64;
            let at_or_below = sorted.partition_point(|&s| s <= v) as u64;
            RankPair {
                at_or_below,
                below,
                n,
            }
        })
        .collect())
}
