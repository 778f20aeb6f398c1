//! Per-class binary hash centers with a guaranteed minimum pairwise
//! Hamming separation.
//!
//! Centers are generated once and stay fixed for the whole training run;
//! the optimizer never updates them.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

/// How the worst-separated random center is resampled before giving up.
const RANDOM_ATTEMPT_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMethod {
    /// Hadamard if feasible for (C, q), otherwise random.
    Auto,
    Hadamard,
    Random,
}

impl CenterMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(CenterMethod::Auto),
            "hadamard" => Ok(CenterMethod::Hadamard),
            "random" => Ok(CenterMethod::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown center method '{other}' (expected auto|hadamard|random)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CenterMethod::Auto => "auto",
            CenterMethod::Hadamard => "hadamard",
            CenterMethod::Random => "random",
        }
    }
}

/// One ±1 center per class, plus the verified minimum pairwise distance.
#[derive(Debug, Clone, PartialEq)]
pub struct HashCenterTable {
    pub code_len: usize,
    /// `num_classes` rows, each of `code_len` entries in {-1.0, +1.0}.
    pub centers: Vec<Vec<f64>>,
    /// Exact minimum pairwise Hamming distance of the rows above.
    pub min_distance: usize,
}

impl HashCenterTable {
    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class]
    }

    /// Text export: one row per class, entries `1` / `-1` space separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.centers {
            let line: Vec<String> = row.iter().map(|v| format!("{}", *v as i64)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

fn hamming_between(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Exact minimum Hamming distance over all unordered distinct pairs.
/// A single-center table returns `q` by convention.
pub fn min_pairwise_hamming(table: &HashCenterTable) -> usize {
    let c = table.centers.len();
    if c <= 1 {
        return table.code_len;
    }
    let mut best = table.code_len;
    for i in 0..c {
        for j in (i + 1)..c {
            best = best.min(hamming_between(&table.centers[i], &table.centers[j]));
        }
    }
    best
}

/// Rows of the order-q Sylvester Hadamard matrix in {+1,-1}.
fn hadamard_rows(q: usize) -> Vec<Vec<f64>> {
    let mut rows = vec![vec![1.0f64]];
    let mut size = 1;
    while size < q {
        let mut next = Vec::with_capacity(size * 2);
        for half in [false, true] {
            for r in &rows {
                let mut row = Vec::with_capacity(size * 2);
                row.extend_from_slice(r);
                if half {
                    row.extend(r.iter().map(|v| -v));
                } else {
                    row.extend_from_slice(r);
                }
                next.push(row);
            }
        }
        // Interleave to the usual [[H,H],[H,-H]] block order.
        let (top, bottom) = next.split_at(size);
        rows = top
            .iter()
            .zip(bottom)
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect();
        size *= 2;
    }
    rows
}

fn generate_hadamard(num_classes: usize, q: usize) -> Result<Vec<Vec<f64>>> {
    if !q.is_power_of_two() {
        return Err(Error::Capability(format!(
            "hadamard centers need a power-of-two code length, got q={q}"
        )));
    }
    if num_classes > 2 * q {
        return Err(Error::Capability(format!(
            "hadamard centers support at most 2q={} classes at q={q}, got {num_classes}",
            2 * q
        )));
    }
    let rows = hadamard_rows(q);
    let mut centers = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if c < q {
            centers.push(rows[c].clone());
        } else {
            centers.push(rows[c - q].iter().map(|v| -v).collect());
        }
    }
    Ok(centers)
}

fn generate_random(
    num_classes: usize,
    q: usize,
    d_floor: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::rng_for(seed, rng::STREAM_CENTERS);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..q)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect()
    };
    let mut centers: Vec<Vec<f64>> = (0..num_classes).map(|_| draw(&mut rng)).collect();
    let mut best_seen = 0usize;
    for _ in 0..RANDOM_ATTEMPT_BUDGET {
        // Locate the worst pair.
        let mut worst = (q + 1, 0usize);
        for i in 0..num_classes {
            for j in (i + 1)..num_classes {
                let d = hamming_between(&centers[i], &centers[j]);
                if d < worst.0 {
                    worst = (d, j);
                }
            }
        }
        let min_d = if num_classes <= 1 { q } else { worst.0 };
        best_seen = best_seen.max(min_d);
        if min_d >= d_floor {
            return Ok(centers);
        }
        centers[worst.1] = draw(&mut rng);
    }
    Err(Error::Generation(format!(
        "random centers did not reach min distance {d_floor} within {RANDOM_ATTEMPT_BUDGET} \
         attempts (best achieved: {best_seen})"
    )))
}

/// Generate a center table. `d_floor` only constrains the random method;
/// Hadamard separation is structural (q/2 between distinct rows).
pub fn generate_centers(
    num_classes: usize,
    q: usize,
    method: CenterMethod,
    d_floor: usize,
    seed: u64,
) -> Result<HashCenterTable> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("code length must be >= 1".into()));
    }
    let centers = match method {
        CenterMethod::Hadamard => generate_hadamard(num_classes, q)?,
        CenterMethod::Random => generate_random(num_classes, q, d_floor, seed)?,
        CenterMethod::Auto => {
            if q.is_power_of_two() && num_classes <= 2 * q {
                generate_hadamard(num_classes, q)?
            } else {
                generate_random(num_classes, q, d_floor, seed)?
            }
        }
    };
    let mut table = HashCenterTable {
        code_len: q,
        centers,
        min_distance: 0,
    };
    table.min_distance = min_pairwise_hamming(&table);
    Ok(table)
}
