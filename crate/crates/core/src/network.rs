//! Sorting-network topologies and their exact (hard) execution.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_all_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// The smaller value ends up on `lo`.
    Ascending,
    /// The larger value ends up on `lo`.
    Descending,
}

impl Direction {
    /// `+1` for ascending, `-1` for descending.
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Direction::Ascending => 1.0,
            Direction::Descending => -1.0,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Direction::Ascending => "asc",
            Direction::Descending => "desc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Comparator {
    pub lo: usize,
    pub hi: usize,
    pub direction: Direction,
}

impl Comparator {
    pub fn ascending(lo: usize, hi: usize) -> Self {
        Comparator {
            lo,
            hi,
            direction: Direction::Ascending,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    OddEven,
    Bitonic,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::OddEven => "odd_even",
            NetworkKind::Bitonic => "bitonic",
        }
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NetworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odd_even" => Ok(NetworkKind::OddEven),
            "bitonic" => Ok(NetworkKind::Bitonic),
            _ => Err(Error::InvalidParameter(format!("unknown network kind {s:?}"))),
        }
    }
}

/// A layered comparator network over `n` wires.
///
/// Comparators within one layer touch disjoint wires and can run in
/// parallel. The same topology drives hard and relaxed execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortingNetwork {
    n: usize,
    kind: NetworkKind,
    layers: Vec<Vec<Comparator>>,
}

impl SortingNetwork {
    pub fn build(kind: NetworkKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::UnsupportedSize {
                network: kind.name(),
                n,
            });
        }
        let layers = match kind {
            NetworkKind::OddEven => odd_even_layers(n),
            NetworkKind::Bitonic => {
                if !n.is_power_of_two() {
                    return Err(Error::UnsupportedSize {
                        network: kind.name(),
                        n,
                    });
                }
                bitonic_layers(n)
            }
        };
        Ok(SortingNetwork { n, kind, layers })
    }

    pub fn odd_even(n: usize) -> Result<Self> {
        Self::build(NetworkKind::OddEven, n)
    }

    pub fn bitonic(n: usize) -> Result<Self> {
        Self::build(NetworkKind::Bitonic, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn layers(&self) -> &[Vec<Comparator>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_comparators(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len == self.n {
            Ok(())
        } else {
            Err(Error::LengthMismatch {
                expected: self.n,
                got: len,
            })
        }
    }

    /// Executes the network with exact min/max.
    ///
    /// Returns the sorted values and `perm`, where `perm[i]` is the output
    /// position (rank) that input `i` ends up in.
    pub fn hard_sort(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        self.check_len(x.len())?;
        ensure_all_finite(x, "hard_sort input")?;
        let mut values = x.to_vec();
        // origin[p] = input index currently on wire p
        let mut origin: Vec<usize> = (0..self.n).collect();
        for layer in &self.layers {
            for c in layer {
                let swap = match c.direction {
                    Direction::Ascending => values[c.lo] > values[c.hi],
                    Direction::Descending => values[c.lo] < values[c.hi],
                };
                if swap {
                    values.swap(c.lo, c.hi);
                    origin.swap(c.lo, c.hi);
                }
            }
        }
        let mut perm = vec![0; self.n];
        for (pos, &i) in origin.iter().enumerate() {
            perm[i] = pos;
        }
        Ok((values, perm))
    }

    /// Hard execution on a 0/1 pattern packed into the low `n` bits.
    pub fn sort_bits(&self, mut bits: u64) -> u64 {
        for layer in &self.layers {
            for c in layer {
                let a = (bits >> c.lo) & 1;
                let b = (bits >> c.hi) & 1;
                let swap = match c.direction {
                    Direction::Ascending => a > b,
                    Direction::Descending => a < b,
                };
                if swap {
                    bits ^= (1 << c.lo) | (1 << c.hi);
                }
            }
        }
        bits
    }

    /// One `lo,hi,dir` line per comparator, layers separated by blank lines.
    pub fn dump_layers(&self) -> String {
        let mut out = String::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for c in layer {
                out.push_str(&format!("{},{},{}\n", c.lo, c.hi, c.direction.code()));
            }
        }
        out
    }
}

fn odd_even_layers(n: usize) -> Vec<Vec<Comparator>> {
    (0..n)
        .map(|l| {
            (l % 2..n.saturating_sub(1))
                .step_by(2)
                .map(|i| Comparator::ascending(i, i + 1))
                .collect()
        })
        .collect()
}

fn bitonic_layers(n: usize) -> Vec<Vec<Comparator>> {
    let mut layers = Vec::new();
    let mut block = 2;
    while block <= n {
        let mut stride = block / 2;
        while stride > 0 {
            let layer = (0..n)
                .filter_map(|i| {
                    let j = i ^ stride;
                    (j > i).then(|| Comparator {
                        lo: i,
                        hi: j,
                        direction: if i & block == 0 {
                            Direction::Ascending
                        } else {
                            Direction::Descending
                        },
                    })
                })
                .collect();
            layers.push(layer);
            stride /= 2;
        }
        block *= 2;
    }
    layers
}
