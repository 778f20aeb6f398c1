//! Binary codes and retrieval evaluation: sign binarization into bit-packed
//! codes, popcount Hamming search, mAP@K and precision-recall curves,
//! branch selection, and the four-protocol evaluation runner.

use crate::dataset::{Dataset, Protocol, ProtocolKind, ProtocolSets};
use crate::error::{Error, Result};
use crate::network::{forward, Branch, CodePair};
use crate::training::Checkpoint;
use serde::Serialize;
use std::collections::HashMap;

/// A q-bit binary code packed LSB-first into 64-bit words: bit j lives in
/// word j/64 at position j%64; bits beyond q are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCode {
    pub q: usize,
    pub words: Vec<u64>,
}

impl PackedCode {
    pub fn bit(&self, j: usize) -> bool {
        (self.words[j / 64] >> (j % 64)) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.q).map(|j| self.bit(j)).collect()
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (j, &b) in bits.iter().enumerate() {
            if b {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        PackedCode {
            q: bits.len(),
            words,
        }
    }

    /// Lowercase hex of the code's ceil(q/8) bytes, LSB-first.
    pub fn to_hex(&self) -> String {
        let nbytes = self.q.div_ceil(8);
        let mut s = String::with_capacity(nbytes * 2);
        for byte_idx in 0..nbytes {
            let word = self.words[byte_idx / 8];
            let byte = (word >> ((byte_idx % 8) * 8)) as u8;
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }
}

/// Sign binarization with sign(0) := +1.
pub fn binarize(u: &[f64]) -> PackedCode {
    let mut words = vec![0u64; u.len().div_ceil(64)];
    for (j, &v) in u.iter().enumerate() {
        if v >= 0.0 {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    PackedCode { q: u.len(), words }
}

pub fn hamming_distance(a: &PackedCode, b: &PackedCode) -> Result<usize> {
    if a.q != b.q {
        return Err(Error::Shape(format!(
            "hamming distance between codes of length {} and {}",
            a.q, b.q
        )));
    }
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones() as usize)
        .sum())
}

fn pack_labels(labels: &[u8]) -> Vec<u64> {
    let mut words = vec![0u64; labels.len().div_ceil(64)];
    for (j, &v) in labels.iter().enumerate() {
        if v != 0 {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    words
}

fn labels_intersect(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).any(|(x, y)| x & y != 0)
}

/// Immutable database of packed codes with parallel ids and label masks.
#[derive(Debug, Clone)]
pub struct PackedCodeIndex {
    pub q: usize,
    codes: Vec<PackedCode>,
    ids: Vec<u64>,
    labels: Vec<Vec<u64>>,
}

impl PackedCodeIndex {
    pub fn build(entries: Vec<(u64, PackedCode, &[u8])>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Protocol("cannot build an empty index".into()));
        }
        let q = entries[0].1.q;
        let mut codes = Vec::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        for (id, code, label_row) in entries {
            if code.q != q {
                return Err(Error::Shape(format!(
                    "index mixes code lengths {q} and {}",
                    code.q
                )));
            }
            ids.push(id);
            codes.push(code);
            labels.push(pack_labels(label_row));
        }
        Ok(PackedCodeIndex {
            q,
            codes,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn id(&self, pos: usize) -> u64 {
        self.ids[pos]
    }
}

/// Top-K by ascending Hamming distance; ties break by ascending database
/// position. Returns min(K, index size) entries of (id, distance).
pub fn search(index: &PackedCodeIndex, query: &PackedCode, k: usize) -> Result<Vec<(u64, usize)>> {
    if index.is_empty() {
        return Err(Error::Protocol("search over an empty index".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("search needs K >= 1".into()));
    }
    let mut ranked: Vec<(usize, usize)> = Vec::with_capacity(index.len());
    for (pos, code) in index.codes.iter().enumerate() {
        ranked.push((hamming_distance(query, code)?, pos));
    }
    ranked.sort_unstable();
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(dist, pos)| (index.ids[pos], dist))
        .collect())
}

/// AP@K with denominator min(R, K); zero when R = 0 or nothing relevant is
/// retrieved.
pub fn average_precision(relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    let denom = total_relevant.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &rel) in relevance.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    sum / denom as f64
}

/// Mean AP@K over queries; relevance is label intersection. Queries with no
/// relevant database item contribute 0 and stay in the mean.
pub fn mean_average_precision(
    index: &PackedCodeIndex,
    queries: &[(PackedCode, Vec<u8>)],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Protocol("mAP over an empty query set".into()));
    }
    let mut total = 0.0;
    for (code, labels) in queries {
        let mask = pack_labels(labels);
        let total_relevant = index
            .labels
            .iter()
            .filter(|l| labels_intersect(&mask, l))
            .count();
        let ranked = search(index, code, k)?;
        let pos_of: HashMap<u64, usize> =
            index.ids.iter().enumerate().map(|(p, id)| (*id, p)).collect();
        let flags: Vec<bool> = ranked
            .iter()
            .map(|(id, _)| labels_intersect(&mask, &index.labels[pos_of[id]]))
            .collect();
        total += average_precision(&flags, total_relevant, k);
    }
    Ok(total / queries.len() as f64)
}

/// Mean squared distance between the two branches' continuous codes.
pub fn consistency_tau2(u_center: &[Vec<f64>], u_pairwise: &[Vec<f64>]) -> Result<f64> {
    if u_center.len() != u_pairwise.len() || u_center.is_empty() {
        return Err(Error::Shape(format!(
            "tau^2 over {} center rows and {} pairwise rows",
            u_center.len(),
            u_pairwise.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in u_center.iter().zip(u_pairwise) {
        if a.len() != b.len() {
            return Err(Error::Shape("tau^2 row length mismatch".into()));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / u_center.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub radius: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolMetrics {
    pub protocol: String,
    pub num_queries: usize,
    pub num_database: usize,
    pub map_center: f64,
    pub map_pairwise: f64,
    pub map_selected: f64,
    /// Hamming-radius sweep for the selected branch.
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub k: usize,
    pub selected_branch: String,
    /// Mean squared distance between branch codes over the full query set.
    pub tau2: f64,
    pub protocols: Vec<ProtocolMetrics>,
    /// Key=value echo of the checkpoint configuration.
    pub config: String,
}

impl MetricsReport {
    pub fn protocol(&self, kind: ProtocolKind) -> Option<&ProtocolMetrics> {
        self.protocols.iter().find(|p| p.protocol == kind.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Flat CSV: protocol,branch,k,map.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("protocol,branch,k,map\n");
        for p in &self.protocols {
            for (branch, v) in [
                ("center", p.map_center),
                ("pairwise", p.map_pairwise),
                ("selected", p.map_selected),
            ] {
                out.push_str(&format!("{},{},{},{}\n", p.protocol, branch, self.k, v));
            }
        }
        out
    }

    /// PR curves as CSV: protocol,branch,radius,precision,recall.
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("protocol,branch,radius,precision,recall\n");
        for p in &self.protocols {
            for pt in &p.pr_curve {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.protocol, self.selected_branch, pt.radius, pt.precision, pt.recall
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchSelection {
    pub branch: Branch,
    pub map_center: f64,
    pub map_pairwise: f64,
}

fn check_compat(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ds.feature_dim != ckpt.config.model.input_dim {
        return Err(Error::Config(format!(
            "dataset feature dimension {} does not match checkpoint input dimension {}",
            ds.feature_dim, ckpt.config.model.input_dim
        )));
    }
    if ds.num_classes != ckpt.centers.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, checkpoint centers cover {}",
            ds.num_classes,
            ckpt.centers.num_classes()
        )));
    }
    Ok(())
}

/// Forward every requested id once, returning both branch codes.
pub fn encode_samples(
    ckpt: &Checkpoint,
    ds: &Dataset,
    ids: &[u64],
) -> Result<HashMap<u64, CodePair>> {
    check_compat(ckpt, ds)?;
    let by_id = ds.id_index();
    let mut out = HashMap::with_capacity(ids.len());
    for id in ids {
        if out.contains_key(id) {
            continue;
        }
        let pos = *by_id
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("sample id {id} not in dataset")))?;
        let pair = forward(&ckpt.params, &ds.samples[pos].features_f64())?;
        out.insert(*id, pair);
    }
    Ok(out)
}

/// Codes-export lines `id;branch;hex`, in id order.
pub fn export_codes(
    ckpt: &Checkpoint,
    ds: &Dataset,
    branches: &[Branch],
) -> Result<String> {
    check_compat(ckpt, ds)?;
    let mut out = String::new();
    for s in &ds.samples {
        let pair = forward(&ckpt.params, &s.features_f64())?;
        for branch in branches {
            let code = binarize(pair.code(*branch));
            out.push_str(&format!("{};{};{}\n", s.id, branch.as_str(), code.to_hex()));
        }
    }
    Ok(out)
}

fn branch_index(
    codes: &HashMap<u64, CodePair>,
    ds_index: &HashMap<u64, usize>,
    ds: &Dataset,
    ids: &[u64],
    branch: Branch,
) -> Result<PackedCodeIndex> {
    let entries: Vec<(u64, PackedCode, &[u8])> = ids
        .iter()
        .map(|id| {
            let pair = &codes[id];
            let labels = ds.samples[ds_index[id]].labels.as_slice();
            (*id, binarize(pair.code(branch)), labels)
        })
        .collect();
    PackedCodeIndex::build(entries)
}

fn branch_queries(
    codes: &HashMap<u64, CodePair>,
    ds_index: &HashMap<u64, usize>,
    ds: &Dataset,
    ids: &[u64],
    branch: Branch,
) -> Vec<(PackedCode, Vec<u8>)> {
    ids.iter()
        .map(|id| {
            (
                binarize(codes[id].code(branch)),
                ds.samples[ds_index[id]].labels.clone(),
            )
        })
        .collect()
}

/// Micro-averaged precision/recall at every Hamming radius 0..=q. An empty
/// retrieval pool yields precision 1 by convention; recall is 0 when no
/// query has a relevant item.
fn pr_curve(
    index: &PackedCodeIndex,
    queries: &[(PackedCode, Vec<u8>)],
    pr_points: Option<usize>,
) -> Result<Vec<PrPoint>> {
    let q = index.q;
    // Per-radius retrieved / retrieved-and-relevant counts, accumulated
    // over queries, then swept cumulatively.
    let mut retrieved_at = vec![0u64; q + 1];
    let mut relevant_at = vec![0u64; q + 1];
    let mut total_relevant = 0u64;
    for (code, labels) in queries {
        let mask = pack_labels(labels);
        for (pos, db_code) in index.codes.iter().enumerate() {
            let d = hamming_distance(code, db_code)?;
            retrieved_at[d] += 1;
            if labels_intersect(&mask, &index.labels[pos]) {
                relevant_at[d] += 1;
                total_relevant += 1;
            }
        }
    }
    let radii: Vec<usize> = match pr_points {
        Some(p) if p >= 2 && p <= q => {
            // Evenly spaced sample including both endpoints.
            (0..p)
                .map(|i| (i * q + (p - 1) / 2) / (p - 1))
                .collect()
        }
        _ => (0..=q).collect(),
    };
    let mut points = Vec::with_capacity(radii.len());
    let mut cum_ret = 0u64;
    let mut cum_rel = 0u64;
    let mut next = 0usize;
    for r in 0..=q {
        cum_ret += retrieved_at[r];
        cum_rel += relevant_at[r];
        if next < radii.len() && radii[next] == r {
            let precision = if cum_ret == 0 {
                1.0
            } else {
                cum_rel as f64 / cum_ret as f64
            };
            let recall = if total_relevant == 0 {
                0.0
            } else {
                cum_rel as f64 / total_relevant as f64
            };
            points.push(PrPoint {
                radius: r,
                precision,
                recall,
            });
            next += 1;
        }
    }
    Ok(points)
}

/// Pick the stronger branch by mAP on the seen@seen protocol of `split`;
/// ties go to the center branch.
pub fn select_branch(
    ckpt: &Checkpoint,
    ds: &Dataset,
    validation: &Protocol,
    k: usize,
) -> Result<BranchSelection> {
    if validation.queries.is_empty() || validation.database.is_empty() {
        return Err(Error::Protocol(
            "branch selection needs nonempty query and database sets".into(),
        ));
    }
    let mut ids: Vec<u64> = validation
        .queries
        .iter()
        .chain(&validation.database)
        .copied()
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let codes = encode_samples(ckpt, ds, &ids)?;
    let ds_index = ds.id_index();
    let mut maps = [0.0f64; 2];
    for (slot, branch) in Branch::BOTH.iter().enumerate() {
        let index = branch_index(&codes, &ds_index, ds, &validation.database, *branch)?;
        let queries = branch_queries(&codes, &ds_index, ds, &validation.queries, *branch);
        maps[slot] = mean_average_precision(&index, &queries, k)?;
    }
    let branch = if maps[1] > maps[0] {
        Branch::Pairwise
    } else {
        Branch::Center
    };
    Ok(BranchSelection {
        branch,
        map_center: maps[0],
        map_pairwise: maps[1],
    })
}

/// Evaluate every available protocol: both branches' mAP@K, the selected
/// branch (argmax of seen@seen mAP), its PR curves, and the cross-branch
/// consistency over the full query set.
pub fn evaluate_protocols(
    ckpt: &Checkpoint,
    ds: &Dataset,
    protocols: &ProtocolSets,
    k: usize,
    pr_points: Option<usize>,
) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("evaluation needs K >= 1".into()));
    }
    let seen = protocols
        .get(ProtocolKind::SeenAtSeen)
        .ok_or_else(|| Error::Protocol("seen@seen protocol is required".into()))?;

    // Encode every id referenced anywhere, once.
    let mut all_ids: Vec<u64> = protocols
        .protocols
        .iter()
        .flat_map(|p| p.queries.iter().chain(&p.database))
        .copied()
        .collect();
    all_ids.sort_unstable();
    all_ids.dedup();
    let codes = encode_samples(ckpt, ds, &all_ids)?;
    let ds_index = ds.id_index();

    // Branch selection on the seen@seen validation protocol.
    let mut query_ids: Vec<u64> = protocols
        .protocols
        .iter()
        .flat_map(|p| p.queries.iter())
        .copied()
        .collect();
    query_ids.sort_unstable();
    query_ids.dedup();
    let selection = {
        let index = branch_index(&codes, &ds_index, ds, &seen.database, Branch::Center)?;
        let queries = branch_queries(&codes, &ds_index, ds, &seen.queries, Branch::Center);
        let map_center = mean_average_precision(&index, &queries, k)?;
        let index = branch_index(&codes, &ds_index, ds, &seen.database, Branch::Pairwise)?;
        let queries = branch_queries(&codes, &ds_index, ds, &seen.queries, Branch::Pairwise);
        let map_pairwise = mean_average_precision(&index, &queries, k)?;
        BranchSelection {
            branch: if map_pairwise > map_center {
                Branch::Pairwise
            } else {
                Branch::Center
            },
            map_center,
            map_pairwise,
        }
    };

    let mut metrics = Vec::new();
    for protocol in &protocols.protocols {
        let mut maps = [0.0f64; 2];
        for (slot, branch) in Branch::BOTH.iter().enumerate() {
            let index = branch_index(&codes, &ds_index, ds, &protocol.database, *branch)?;
            let queries = branch_queries(&codes, &ds_index, ds, &protocol.queries, *branch);
            maps[slot] = mean_average_precision(&index, &queries, k)?;
        }
        let sel_index =
            branch_index(&codes, &ds_index, ds, &protocol.database, selection.branch)?;
        let sel_queries =
            branch_queries(&codes, &ds_index, ds, &protocol.queries, selection.branch);
        let curve = pr_curve(&sel_index, &sel_queries, pr_points)?;
        metrics.push(ProtocolMetrics {
            protocol: protocol.kind.as_str().to_string(),
            num_queries: protocol.queries.len(),
            num_database: protocol.database.len(),
            map_center: maps[0],
            map_pairwise: maps[1],
            map_selected: if selection.branch == Branch::Center {
                maps[0]
            } else {
                maps[1]
            },
            pr_curve: curve,
        });
    }

    let u_center: Vec<Vec<f64>> = query_ids.iter().map(|id| codes[id].u_center.clone()).collect();
    let u_pairwise: Vec<Vec<f64>> =
        query_ids.iter().map(|id| codes[id].u_pairwise.clone()).collect();
    let tau2 = consistency_tau2(&u_center, &u_pairwise)?;

    Ok(MetricsReport {
        k,
        selected_branch: selection.branch.as_str().to_string(),
        tau2,
        protocols: metrics,
        config: crate::checkpoint::config_echo(&ckpt.config),
    })
}
