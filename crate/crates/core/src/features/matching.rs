use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::map::{Descriptor, NORM_TOLERANCE};

/// Default second-best / best similarity ratio.
pub const DEFAULT_NNDR: f64 = 0.8;

const SIMILARITY_NORM_SLACK: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    /// Sorted by `index_a`.
    pub pairs: Vec<MatchPair>,
    /// Set when the ratio test was undefined (fewer than two candidates) and
    /// matches were accepted without it.
    pub degenerate: bool,
}

/// Dot-product similarity, clamped to `[0, 1]`.
pub fn similarity(d1: &Descriptor, d2: &Descriptor) -> Result<f64, FeatureError> {
    for d in [d1, d2] {
        let n = d.norm();
        if (n - 1.0).abs() > SIMILARITY_NORM_SLACK.max(NORM_TOLERANCE) {
            return Err(FeatureError::InvalidDescriptor(n));
        }
    }
    Ok(d1.dot(d2).clamp(0.0, 1.0))
}

/// Best and second-best candidate for each row of a row-major similarity
/// matrix.
fn row_best(sim: &[f64], rows: usize, cols: usize) -> Vec<Option<(usize, f64, f64)>> {
    (0..rows)
        .map(|r| {
            let row = &sim[r * cols..(r + 1) * cols];
            let mut best: Option<(usize, f64)> = None;
            let mut second = f64::NEG_INFINITY;
            for (c, &s) in row.iter().enumerate() {
                match best {
                    Some((_, b)) if s <= b => {
                        if s > second {
                            second = s;
                        }
                    }
                    Some((_, b)) => {
                        second = b;
                        best = Some((c, s));
                    }
                    None => best = Some((c, s)),
                }
            }
            best.map(|(c, s)| (c, s, second))
        })
        .collect()
}

fn passes_ratio(best: f64, second: f64, threshold: f64) -> bool {
    if second == f64::NEG_INFINITY {
        return true;
    }
    best > 0.0 && second.max(0.0) / best < threshold
}

fn similarity_matrix<A: AsRef<Descriptor>, B: AsRef<Descriptor>>(a: &[A], b: &[B]) -> Vec<f64> {
    let mut sim = Vec::with_capacity(a.len() * b.len());
    for da in a {
        let da = da.as_ref();
        sim.extend(b.iter().map(|db| da.dot(db.as_ref()).clamp(0.0, 1.0)));
    }
    sim
}

fn directed(sim: &[f64], rows: usize, cols: usize, threshold: f64) -> Vec<MatchPair> {
    row_best(sim, rows, cols)
        .into_iter()
        .enumerate()
        .filter_map(|(r, best)| {
            let (c, s, second) = best?;
            passes_ratio(s, second, threshold).then_some(MatchPair {
                index_a: r,
                index_b: c,
                similarity: s,
            })
        })
        .collect()
}

fn transpose(sim: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; sim.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = sim[r * cols + c];
        }
    }
    t
}

/// Brute-force matching of every descriptor of `set_a` against `set_b` with
/// the ratio test `second / best < nndr_threshold`.
///
/// Several `a` may share the same `b`; use [`bf_match_bidirectional`] for a
/// one-to-one set.
pub fn bf_match_nndr<A: AsRef<Descriptor>, B: AsRef<Descriptor>>(
    set_a: &[A],
    set_b: &[B],
    nndr_threshold: f64,
) -> MatchSet {
    if set_a.is_empty() || set_b.is_empty() {
        return MatchSet::default();
    }
    let sim = similarity_matrix(set_a, set_b);
    MatchSet {
        pairs: directed(&sim, set_a.len(), set_b.len(), nndr_threshold),
        degenerate: set_b.len() < 2,
    }
}

/// Mutual NNDR matches: pairs accepted in both directions.
pub fn bf_match_bidirectional<A: AsRef<Descriptor>, B: AsRef<Descriptor>>(
    set_a: &[A],
    set_b: &[B],
    nndr_threshold: f64,
) -> MatchSet {
    if set_a.is_empty() || set_b.is_empty() {
        return MatchSet::default();
    }
    let (na, nb) = (set_a.len(), set_b.len());
    let sim = similarity_matrix(set_a, set_b);
    let forward = directed(&sim, na, nb, nndr_threshold);
    let backward = directed(&transpose(&sim, na, nb), nb, na, nndr_threshold);
    let mut back_of_b = vec![None; nb];
    for m in &backward {
        back_of_b[m.index_a] = Some(m.index_b);
    }
    MatchSet {
        pairs: forward
            .into_iter()
            .filter(|m| back_of_b[m.index_b] == Some(m.index_a))
            .collect(),
        degenerate: na < 2 || nb < 2,
    }
}
