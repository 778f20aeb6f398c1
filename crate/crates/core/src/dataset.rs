//! Labeled feature datasets: synthetic generation, the feature-file
//! formats, seen/unseen category splitting, and the four retrieval
//! evaluation protocols.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"UHF1";

/// One labeled feature vector. Features are stored as `f32` so both file
/// formats round-trip bit-exactly; math promotes to `f64` on entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// Multi-hot label vector of length C, entries 0/1.
    pub labels: Vec<u8>,
    pub features: Vec<f32>,
}

impl Sample {
    pub fn label_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(|(i, _)| i)
    }

    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|v| *v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub is_multilabel: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Map from sample id to position in `samples`.
    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen_ids = HashSet::with_capacity(self.samples.len());
        for (row, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.feature_dim {
                return Err(Error::Format(format!(
                    "sample {} (row {}) has {} features, expected {}",
                    s.id,
                    row + 1,
                    s.features.len(),
                    self.feature_dim
                )));
            }
            if s.labels.len() != self.num_classes {
                return Err(Error::Format(format!(
                    "sample {} (row {}) has {} label slots, expected {}",
                    s.id,
                    row + 1,
                    s.labels.len(),
                    self.num_classes
                )));
            }
            if s.labels.iter().any(|v| *v > 1) {
                return Err(Error::Format(format!(
                    "sample {} has a label value outside {{0,1}}",
                    s.id
                )));
            }
            let set = s.labels.iter().filter(|v| **v != 0).count();
            if set == 0 {
                return Err(Error::Format(format!("sample {} has no labels", s.id)));
            }
            if !self.is_multilabel && set != 1 {
                return Err(Error::Format(format!(
                    "sample {} has {} labels in a single-label dataset",
                    s.id, set
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "sample {} has a non-finite feature",
                    s.id
                )));
            }
            if !seen_ids.insert(s.id) {
                return Err(Error::Format(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Deterministic unit-norm class directions: Gram-Schmidt over seeded
/// Gaussian draws. Orthogonalization stops once the ambient dimension is
/// exhausted; later classes are only normalized.
pub fn class_directions(num_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::rng_for(seed, rng::STREAM_DATA_CENTERS);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while dirs.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Orthogonalize only while the ambient dimension allows it; classes
        // beyond D_in are merely normalized.
        if dirs.len() < dim {
            for prev in &dirs {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue; // degenerate draw, take another
        }
        for x in &mut v {
            *x /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Gaussian clusters around fixed unit-norm class directions; one-hot labels.
pub fn generate_synthetic(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "need feature dimension >= 2, got {dim}"
        )));
    }
    if n_per_class < 1 {
        return Err(Error::InvalidArgument(
            "need at least 1 sample per class".into(),
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let dirs = class_directions(num_classes, dim, seed);
    let mut noise = rng::rng_for(seed, rng::STREAM_DATA_NOISE);
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    let mut id = 0u64;
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..n_per_class {
            let features: Vec<f32> = dir
                .iter()
                .map(|&m| {
                    let n: f64 = noise.sample(StandardNormal);
                    (m + spread * n) as f32
                })
                .collect();
            let mut labels = vec![0u8; num_classes];
            labels[c] = 1;
            samples.push(Sample {
                id,
                labels,
                features,
            });
            id += 1;
        }
    }
    let ds = Dataset {
        samples,
        num_classes,
        feature_dim: dim,
        is_multilabel: false,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Text,
    Binary,
}

/// Load a feature file; the binary form is recognized by its magic bytes.
pub fn load_features(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    if bytes.len() >= 4 && &bytes[..4] == FEATURE_MAGIC {
        load_binary(&bytes)
    } else {
        load_text(&bytes)
    }
}

fn load_text(bytes: &[u8]) -> Result<Dataset> {
    let mut lines = bytes.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty file".into()))?
        .map_err(|e| Error::Format(format!("line 1: {e}")))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::Format(
            "line 1: header must be 'n D_in C multilabel'".into(),
        ));
    }
    let n: usize = parse_field(fields[0], 1, "n")?;
    let dim: usize = parse_field(fields[1], 1, "D_in")?;
    let num_classes: usize = parse_field(fields[2], 1, "C")?;
    let multilabel: u8 = parse_field(fields[3], 1, "multilabel")?;
    if multilabel > 1 {
        return Err(Error::Format("line 1: multilabel flag must be 0 or 1".into()));
    }
    if n == 0 {
        return Err(Error::Format("line 1: empty dataset (n = 0)".into()));
    }

    let mut samples = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::Format(format!("line {lineno}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(';').collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "line {lineno}: expected 'id;labels;features' (3 fields, got {})",
                parts.len()
            )));
        }
        let id: u64 = parse_field(parts[0], lineno, "id")?;
        let labels: Vec<u8> = parts[1]
            .split(',')
            .map(|t| parse_field(t, lineno, "label"))
            .collect::<Result<_>>()?;
        if labels.len() != num_classes {
            return Err(Error::Format(format!(
                "line {lineno}: {} labels, header says C={num_classes}",
                labels.len()
            )));
        }
        let features: Vec<f32> = parts[2]
            .split(',')
            .map(|t| parse_field(t, lineno, "feature"))
            .collect::<Result<_>>()?;
        if features.len() != dim {
            return Err(Error::Format(format!(
                "line {lineno}: {} features, header says D_in={dim}",
                features.len()
            )));
        }
        if features.iter().any(|v: &f32| !v.is_finite()) {
            return Err(Error::Format(format!(
                "line {lineno}: non-finite feature value"
            )));
        }
        samples.push(Sample {
            id,
            labels,
            features,
        });
    }
    if samples.len() != n {
        return Err(Error::Format(format!(
            "header says n={n} but file has {} rows",
            samples.len()
        )));
    }
    let ds = Dataset {
        samples,
        num_classes,
        feature_dim: dim,
        is_multilabel: multilabel == 1,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_field<T: std::str::FromStr>(token: &str, lineno: usize, what: &str) -> Result<T> {
    token.trim().parse::<T>().map_err(|_| {
        Error::Format(format!("line {lineno}: cannot parse {what} from '{token}'"))
    })
}

fn load_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = &bytes[4..];
    let mut u64_le = |what: &str| -> Result<u64> {
        let mut buf = [0u8; 8];
        cur.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated header reading {what}")))?;
        Ok(u64::from_le_bytes(buf))
    };
    let n = u64_le("n")? as usize;
    let dim = u64_le("D_in")? as usize;
    let num_classes = u64_le("C")? as usize;
    let mut flag = [0u8; 1];
    cur.read_exact(&mut flag)
        .map_err(|_| Error::Format("truncated header reading multilabel flag".into()))?;
    if flag[0] > 1 {
        return Err(Error::Format("multilabel flag must be 0 or 1".into()));
    }
    if n == 0 {
        return Err(Error::Format("empty dataset (n = 0)".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for row in 0..n {
        let mut labels = vec![0u8; num_classes];
        cur.read_exact(&mut labels)
            .map_err(|_| Error::Format(format!("truncated labels at record {}", row + 1)))?;
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            let mut buf = [0u8; 4];
            cur.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!("truncated features at record {}", row + 1))
            })?;
            features.push(f32::from_le_bytes(buf));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "record {}: non-finite feature value",
                row + 1
            )));
        }
        samples.push(Sample {
            id: row as u64,
            labels,
            features,
        });
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            cur.len(),
            n
        )));
    }
    let ds = Dataset {
        samples,
        num_classes,
        feature_dim: dim,
        is_multilabel: flag[0] == 1,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a dataset in either feature-file form. The binary form does not
/// store ids; it assumes (and `write_features` enforces) ids 0..n-1 in order.
pub fn write_features(ds: &Dataset, path: &Path, format: FileFormat) -> Result<()> {
    ds.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        FileFormat::Text => {
            writeln!(
                out,
                "{} {} {} {}",
                ds.len(),
                ds.feature_dim,
                ds.num_classes,
                u8::from(ds.is_multilabel)
            )?;
            for s in &ds.samples {
                let labels: Vec<String> = s.labels.iter().map(|v| v.to_string()).collect();
                let feats: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
                writeln!(out, "{};{};{}", s.id, labels.join(","), feats.join(","))?;
            }
        }
        FileFormat::Binary => {
            for (i, s) in ds.samples.iter().enumerate() {
                if s.id != i as u64 {
                    return Err(Error::Format(format!(
                        "binary form requires ids 0..n-1 in order; sample at row {} has id {}",
                        i + 1,
                        s.id
                    )));
                }
            }
            out.write_all(FEATURE_MAGIC)?;
            out.write_all(&(ds.len() as u64).to_le_bytes())?;
            out.write_all(&(ds.feature_dim as u64).to_le_bytes())?;
            out.write_all(&(ds.num_classes as u64).to_le_bytes())?;
            out.write_all(&[u8::from(ds.is_multilabel)])?;
            for s in &ds.samples {
                out.write_all(&s.labels)?;
                for v in &s.features {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Seen/unseen category partition plus query/database/train roles.
///
/// Pure subsets hold only samples whose labels fall entirely inside one
/// class group; mixed-label samples appear in `db_all` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train: Vec<u64>,
    pub query_seen: Vec<u64>,
    pub query_unseen: Vec<u64>,
    pub db_seen: Vec<u64>,
    pub db_unseen: Vec<u64>,
    pub db_all: Vec<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitOptions {
    /// Fraction of each class's pure samples held out as queries.
    pub query_frac: f64,
    /// Fraction of db_seen sampled into the training pool.
    pub train_frac: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            query_frac: 0.2,
            train_frac: 1.0,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Partition classes into seen/unseen by a seeded shuffle, then assign
/// sample roles. The seen-class count is round-half-up of `seen_ratio * C`.
pub fn split_seen_unseen(
    ds: &Dataset,
    seen_ratio: f64,
    seed: u64,
    opts: SplitOptions,
) -> Result<SplitDataset> {
    let c = ds.num_classes;
    if !(seen_ratio > 0.0 && seen_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "seen_ratio must be in (0, 1], got {seen_ratio}"
        )));
    }
    if !(opts.query_frac >= 0.0 && opts.query_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "query_frac must be in [0, 1), got {}",
            opts.query_frac
        )));
    }
    if !(opts.train_frac > 0.0 && opts.train_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac must be in (0, 1], got {}",
            opts.train_frac
        )));
    }
    let num_seen = if seen_ratio == 1.0 {
        c
    } else {
        round_half_up(seen_ratio * c as f64)
    };
    if num_seen < 1 || (num_seen >= c && seen_ratio != 1.0) {
        return Err(Error::InvalidArgument(format!(
            "seen_ratio {seen_ratio} leaves {num_seen} of {c} classes seen"
        )));
    }

    let mut class_ids: Vec<usize> = (0..c).collect();
    rng::shuffle(&mut class_ids, &mut rng::rng_for(seed, rng::STREAM_SPLIT));
    let mut seen_classes = class_ids[..num_seen].to_vec();
    let mut unseen_classes = class_ids[num_seen..].to_vec();
    seen_classes.sort_unstable();
    unseen_classes.sort_unstable();
    let seen_set: HashSet<usize> = seen_classes.iter().copied().collect();
    let unseen_set: HashSet<usize> = unseen_classes.iter().copied().collect();

    // Pure subsets keyed by the sample's first label; mixed go to db_all only.
    let mut pure_seen: HashMap<usize, Vec<u64>> = HashMap::new();
    let mut pure_unseen: HashMap<usize, Vec<u64>> = HashMap::new();
    let mut mixed: Vec<u64> = Vec::new();
    for s in &ds.samples {
        let labels: Vec<usize> = s.label_set().collect();
        let all_seen = labels.iter().all(|l| seen_set.contains(l));
        let all_unseen = labels.iter().all(|l| unseen_set.contains(l));
        if all_seen {
            pure_seen.entry(labels[0]).or_default().push(s.id);
        } else if all_unseen {
            pure_unseen.entry(labels[0]).or_default().push(s.id);
        } else {
            mixed.push(s.id);
        }
    }

    let partition = |groups: &mut HashMap<usize, Vec<u64>>| -> (Vec<u64>, Vec<u64>) {
        let mut queries = Vec::new();
        let mut database = Vec::new();
        let mut keys: Vec<usize> = groups.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let ids = groups.get_mut(&key).unwrap();
            rng::shuffle(
                ids,
                &mut rng::rng_for(seed, rng::STREAM_SPLIT + 100 + key as u64),
            );
            let n = ids.len();
            // A singleton class contributes no query so its database
            // side stays populated.
            let n_query = if n < 2 {
                0
            } else {
                round_half_up(opts.query_frac * n as f64).clamp(
                    usize::from(opts.query_frac > 0.0),
                    n - 1,
                )
            };
            queries.extend_from_slice(&ids[..n_query]);
            database.extend_from_slice(&ids[n_query..]);
        }
        queries.sort_unstable();
        database.sort_unstable();
        (queries, database)
    };

    let (query_seen, db_seen) = partition(&mut pure_seen);
    let (query_unseen, db_unseen) = partition(&mut pure_unseen);

    let mut train = db_seen.clone();
    if opts.train_frac < 1.0 {
        rng::shuffle(&mut train, &mut rng::rng_for(seed, rng::STREAM_TRAIN_POOL));
        let keep = round_half_up(opts.train_frac * train.len() as f64).max(1);
        train.truncate(keep.min(train.len()));
        train.sort_unstable();
    }

    mixed.sort_unstable();
    let mut db_all = Vec::with_capacity(db_seen.len() + db_unseen.len() + mixed.len());
    db_all.extend_from_slice(&db_seen);
    db_all.extend_from_slice(&db_unseen);
    db_all.extend_from_slice(&mixed);
    db_all.sort_unstable();

    Ok(SplitDataset {
        seen_classes,
        unseen_classes,
        train,
        query_seen,
        query_unseen,
        db_seen,
        db_unseen,
        db_all,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum ProtocolKind {
    SeenAtSeen,
    SeenAtAll,
    UnseenAtUnseen,
    UnseenAtAll,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::SeenAtSeen,
        ProtocolKind::SeenAtAll,
        ProtocolKind::UnseenAtUnseen,
        ProtocolKind::UnseenAtAll,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolKind::SeenAtSeen => "seen@seen",
            ProtocolKind::SeenAtAll => "seen@all",
            ProtocolKind::UnseenAtUnseen => "unseen@unseen",
            ProtocolKind::UnseenAtAll => "unseen@all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seen@seen" => Ok(ProtocolKind::SeenAtSeen),
            "seen@all" => Ok(ProtocolKind::SeenAtAll),
            "unseen@unseen" => Ok(ProtocolKind::UnseenAtUnseen),
            "unseen@all" => Ok(ProtocolKind::UnseenAtAll),
            other => Err(Error::InvalidArgument(format!(
                "unknown protocol '{other}'"
            ))),
        }
    }
}

/// One (query set, database set) evaluation pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub queries: Vec<u64>,
    pub database: Vec<u64>,
}

/// The available protocols for a split. Unseen protocols are absent (not
/// empty) when the split has no unseen classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSets {
    pub protocols: Vec<Protocol>,
}

impl ProtocolSets {
    pub fn get(&self, kind: ProtocolKind) -> Option<&Protocol> {
        self.protocols.iter().find(|p| p.kind == kind)
    }
}

pub fn build_eval_protocols(split: &SplitDataset) -> Result<ProtocolSets> {
    let mut protocols = Vec::new();
    let mut push = |kind: ProtocolKind, queries: &[u64], database: &[u64]| -> Result<()> {
        if queries.is_empty() {
            return Err(Error::Protocol(format!(
                "{}: empty query set",
                kind.as_str()
            )));
        }
        if database.is_empty() {
            return Err(Error::Protocol(format!(
                "{}: empty database set",
                kind.as_str()
            )));
        }
        let q: HashSet<u64> = queries.iter().copied().collect();
        if database.iter().any(|id| q.contains(id)) {
            return Err(Error::Protocol(format!(
                "{}: query sample present in its paired database",
                kind.as_str()
            )));
        }
        protocols.push(Protocol {
            kind,
            queries: queries.to_vec(),
            database: database.to_vec(),
        });
        Ok(())
    };
    push(ProtocolKind::SeenAtSeen, &split.query_seen, &split.db_seen)?;
    push(ProtocolKind::SeenAtAll, &split.query_seen, &split.db_all)?;
    if !split.unseen_classes.is_empty() {
        push(
            ProtocolKind::UnseenAtUnseen,
            &split.query_unseen,
            &split.db_unseen,
        )?;
        push(ProtocolKind::UnseenAtAll, &split.query_unseen, &split.db_all)?;
    }
    Ok(ProtocolSets { protocols })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_puts_samples_on_class_directions() {
        let ds = generate_synthetic(2, 2, 1, 0.0, 5).unwrap();
        let dirs = class_directions(2, 2, 5);
        assert_eq!(ds.len(), 2);
        for (s, dir) in ds.samples.iter().zip(&dirs) {
            let expect: Vec<f32> = dir.iter().map(|v| *v as f32).collect();
            assert_eq!(s.features, expect);
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(4, 8, 10, 0.25, 7).unwrap();
        let b = generate_synthetic(4, 8, 10, 0.25, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, 8, 10, 0.25, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_counts_and_one_hot_labels() {
        let ds = generate_synthetic(8, 32, 250, 0.3, 1).unwrap();
        assert_eq!(ds.len(), 2000);
        let mut per_class = vec![0usize; 8];
        for s in &ds.samples {
            let set: Vec<usize> = s.label_set().collect();
            assert_eq!(set.len(), 1);
            per_class[set[0]] += 1;
        }
        assert!(per_class.iter().all(|&n| n == 250));
    }

    #[test]
    fn invalid_generation_args() {
        assert!(matches!(
            generate_synthetic(1, 8, 5, 0.1, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_synthetic(3, 1, 5, 0.1, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_synthetic(3, 8, 0, 0.1, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the tempdir so the path survives this helper; tests are short-lived.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn text_round_trip_is_identity() {
        let ds = generate_synthetic(3, 5, 4, 0.7, 21).unwrap();
        let path = tmp("ds.txt");
        write_features(&ds, &path, FileFormat::Text).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn binary_round_trip_is_identity() {
        let ds = generate_synthetic(3, 5, 4, 0.7, 21).unwrap();
        let path = tmp("ds.uhf");
        write_features(&ds, &path, FileFormat::Binary).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn text_parse_small_file() {
        let path = tmp("two.txt");
        std::fs::write(&path, "2 3 2 0\n0;1,0;0.5,-1.25,3\n1;0,1;1,2,3.5\n").unwrap();
        let ds = load_features(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim, 3);
        assert_eq!(ds.samples[0].features, vec![0.5, -1.25, 3.0]);
    }

    #[test]
    fn text_row_width_mismatch_names_the_line() {
        let path = tmp("bad.txt");
        std::fs::write(&path, "2 3 2 0\n0;1,0;0.5,1.5,2.5\n1;0,1;1,2\n").unwrap();
        match load_features(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("line 3"), "msg: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_nonfinite_files_are_rejected() {
        let path = tmp("empty.txt");
        std::fs::write(&path, "").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));

        let path = tmp("nan.txt");
        std::fs::write(&path, "1 2 2 0\n0;1,0;NaN,1\n").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }

    #[test]
    fn split_counts_match_ratios() {
        let ds = generate_synthetic(10, 4, 3, 0.1, 2).unwrap();
        let split = split_seen_unseen(&ds, 0.8, 9, SplitOptions::default()).unwrap();
        assert_eq!(split.seen_classes.len(), 8);
        assert_eq!(split.unseen_classes.len(), 2);

        let ds = generate_synthetic(20, 4, 3, 0.1, 2).unwrap();
        let split = split_seen_unseen(&ds, 0.85, 9, SplitOptions::default()).unwrap();
        assert_eq!(split.seen_classes.len(), 17);
        assert_eq!(split.unseen_classes.len(), 3);
    }

    fn multilabel_fixture() -> Dataset {
        // 4 classes; ids 0..7. Sample 6 mixes classes {0, 3}.
        let mk = |id: u64, labels: Vec<u8>| Sample {
            id,
            labels,
            features: vec![id as f32, 1.0],
        };
        Dataset {
            samples: vec![
                mk(0, vec![1, 0, 0, 0]),
                mk(1, vec![1, 0, 0, 0]),
                mk(2, vec![0, 1, 0, 0]),
                mk(3, vec![0, 1, 0, 0]),
                mk(4, vec![0, 0, 1, 0]),
                mk(5, vec![0, 0, 0, 1]),
                mk(6, vec![1, 0, 0, 1]),
                mk(7, vec![0, 0, 1, 1]),
            ],
            num_classes: 4,
            feature_dim: 2,
            is_multilabel: true,
        }
    }

    #[test]
    fn mixed_label_samples_only_reach_db_all() {
        let ds = multilabel_fixture();
        for seed in 0..20u64 {
            let split = split_seen_unseen(&ds, 0.5, seed, SplitOptions::default()).unwrap();
            let seen: HashSet<usize> = split.seen_classes.iter().copied().collect();
            let unseen: HashSet<usize> = split.unseen_classes.iter().copied().collect();
            for s in &ds.samples {
                let labels: Vec<usize> = s.label_set().collect();
                let pure_seen = labels.iter().all(|l| seen.contains(l));
                let pure_unseen = labels.iter().all(|l| unseen.contains(l));
                if !pure_seen && !pure_unseen {
                    assert!(split.db_all.contains(&s.id));
                    for list in [
                        &split.train,
                        &split.query_seen,
                        &split.query_unseen,
                        &split.db_seen,
                        &split.db_unseen,
                    ] {
                        assert!(!list.contains(&s.id), "mixed sample {} leaked", s.id);
                    }
                }
            }
        }
    }

    #[test]
    fn purity_and_train_invariants_hold_across_seeds() {
        let ds = multilabel_fixture();
        let by_id = ds.id_index();
        for seed in 0..30u64 {
            let split = split_seen_unseen(&ds, 0.5, seed, SplitOptions::default()).unwrap();
            let seen: HashSet<usize> = split.seen_classes.iter().copied().collect();
            let unseen: HashSet<usize> = split.unseen_classes.iter().copied().collect();
            assert!(seen.is_disjoint(&unseen));
            assert_eq!(seen.len() + unseen.len(), ds.num_classes);
            for id in split.train.iter().chain(&split.query_seen).chain(&split.db_seen) {
                let s = &ds.samples[by_id[id]];
                assert!(s.label_set().all(|l| seen.contains(&l)));
            }
            for id in split.query_unseen.iter().chain(&split.db_unseen) {
                let s = &ds.samples[by_id[id]];
                assert!(s.label_set().all(|l| unseen.contains(&l)));
            }
            let db_all: HashSet<u64> = split.db_all.iter().copied().collect();
            assert!(split.db_seen.iter().all(|id| db_all.contains(id)));
            assert!(split.db_unseen.iter().all(|id| db_all.contains(id)));
        }
    }

    #[test]
    fn split_is_pure_function_of_inputs() {
        let ds = generate_synthetic(6, 4, 12, 0.2, 3).unwrap();
        let a = split_seen_unseen(&ds, 0.75, 4, SplitOptions::default()).unwrap();
        let b = split_seen_unseen(&ds, 0.75, 4, SplitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn protocols_pair_queries_with_databases() {
        let ds = generate_synthetic(8, 4, 10, 0.2, 3).unwrap();
        let split = split_seen_unseen(&ds, 0.75, 1, SplitOptions::default()).unwrap();
        let protos = build_eval_protocols(&split).unwrap();
        assert_eq!(protos.protocols.len(), 4);
        let by_id = ds.id_index();
        let unseen: HashSet<usize> = split.unseen_classes.iter().copied().collect();
        let uu = protos.get(ProtocolKind::UnseenAtUnseen).unwrap();
        for id in &uu.database {
            let s = &ds.samples[by_id[id]];
            assert!(s.label_set().all(|l| unseen.contains(&l)));
        }
        for p in &protos.protocols {
            let q: HashSet<u64> = p.queries.iter().copied().collect();
            assert!(p.database.iter().all(|id| !q.contains(id)));
        }
        let all = protos.get(ProtocolKind::SeenAtAll).unwrap();
        let seen = protos.get(ProtocolKind::SeenAtSeen).unwrap();
        assert!(all.database.len() >= seen.database.len());
    }

    #[test]
    fn full_seen_split_reports_unseen_protocols_absent() {
        let ds = generate_synthetic(5, 4, 10, 0.2, 3).unwrap();
        let split = split_seen_unseen(&ds, 1.0, 1, SplitOptions::default()).unwrap();
        assert!(split.unseen_classes.is_empty());
        let protos = build_eval_protocols(&split).unwrap();
        assert!(protos.get(ProtocolKind::SeenAtSeen).is_some());
        assert!(protos.get(ProtocolKind::SeenAtAll).is_some());
        assert!(protos.get(ProtocolKind::UnseenAtUnseen).is_none());
        assert!(protos.get(ProtocolKind::UnseenAtAll).is_none());
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let ds = generate_synthetic(10, 4, 3, 0.1, 2).unwrap();
        assert!(split_seen_unseen(&ds, 0.0, 1, SplitOptions::default()).is_err());
        assert!(split_seen_unseen(&ds, 1.2, 1, SplitOptions::default()).is_err());
        // round(0.99 * 10) = 10 = C without ratio being exactly 1.
        assert!(split_seen_unseen(&ds, 0.99, 1, SplitOptions::default()).is_err());
    }
}
