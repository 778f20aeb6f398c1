//! Training objectives: center-based supervision, pairwise similarity
//! supervision, the cross-branch mutual alignment term, and their weighted
//! total. Each loss also exposes its exact gradient with respect to the
//! continuous codes; the network-side chain rule lives in `training`.

use crate::centers::HashCenterTable;
use crate::error::{Error, Result};

/// Floor applied inside logs and cosine denominators.
pub const NUMERIC_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub center: f64,
    pub pairwise: f64,
    pub mutual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            center: 4.0,
            pairwise: 1.0,
            mutual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(center: f64, pairwise: f64, mutual: f64) -> Result<Self> {
        let w = LossWeights {
            center,
            pairwise,
            mutual,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.center),
            ("lambda2", self.pairwise),
            ("lambda3", self.mutual),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which branch's code is treated as a constant target in the mutual loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachSide {
    /// The pairwise code is the frozen target; gradient flows into the
    /// center branch only.
    DetachPairwise,
    /// The center code is the frozen target; gradient flows into the
    /// pairwise branch only.
    DetachCenter,
}

impl DetachSide {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetachSide::DetachPairwise => "detach_pairwise",
            DetachSide::DetachCenter => "detach_center",
        }
    }
}

/// Binary pair-similarity matrix: 1 iff two samples share at least one label.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    data: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }
}

pub fn similarity_matrix(labels: &[Vec<u8>]) -> SimilarityMatrix {
    let n = labels.len();
    let mut data = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let shared = labels[i]
                .iter()
                .zip(&labels[j])
                .any(|(a, b)| *a != 0 && *b != 0);
            data[i * n + j] = shared;
            data[j * n + i] = shared;
        }
    }
    SimilarityMatrix { n, data }
}

fn row_norm(u: &[f64], row: usize, what: &str) -> Result<f64> {
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric(format!(
            "{what}: code row {row} has zero norm; cosine is undefined"
        )));
    }
    Ok(norm)
}

fn clamped_ln(x: f64) -> f64 {
    x.max(NUMERIC_GUARD).ln()
}

/// Center-based loss: binary cross-entropy of the class assignment
/// probabilities obtained from sqrt(q)-scaled code/center cosines.
pub fn center_loss(
    codes: &[Vec<f64>],
    labels: &[Vec<u8>],
    centers: &HashCenterTable,
) -> Result<f64> {
    Ok(center_loss_with_grad(codes, labels, centers)?.0)
}

/// Loss plus dL/dU for every code row.
pub fn center_loss_with_grad(
    codes: &[Vec<f64>],
    labels: &[Vec<u8>],
    centers: &HashCenterTable,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = codes.len();
    let c = centers.num_classes();
    let q = centers.code_len;
    if n == 0 {
        return Err(Error::InvalidArgument("center loss needs N >= 1".into()));
    }
    if c < 2 {
        return Err(Error::InvalidArgument(
            "center loss needs at least 2 classes".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} code rows but {} label rows",
            n,
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = vec![vec![0.0; q]; n];
    for i in 0..n {
        let u = &codes[i];
        if u.len() != q {
            return Err(Error::Shape(format!(
                "code row {i} has length {}, centers have q={q}",
                u.len()
            )));
        }
        if labels[i].len() != c {
            return Err(Error::Shape(format!(
                "label row {i} has length {}, centers have C={c}",
                labels[i].len()
            )));
        }
        let norm = row_norm(u, i, "center loss")?;
        let guarded = norm + NUMERIC_GUARD;
        // sqrt(q) * cos(u, h_c) = (u . h_c) / ||u||  since ||h_c|| = sqrt(q).
        let logits: Vec<f64> = (0..c)
            .map(|cls| {
                let dot: f64 = u.iter().zip(centers.center(cls)).map(|(a, b)| a * b).sum();
                dot / guarded
            })
            .collect();
        let probs = crate::network::softmax(&logits);

        let mut dlogits = vec![0.0; c];
        let mut dprob_dot = 0.0; // sum_c dL/dP_c * P_c, reused by the softmax jacobian
        let mut dprobs = vec![0.0; c];
        for cls in 0..c {
            let y = f64::from(labels[i][cls]);
            total -= y * clamped_ln(probs[cls]) + (1.0 - y) * clamped_ln(1.0 - probs[cls]);
            let mut d = 0.0;
            if probs[cls] > NUMERIC_GUARD {
                d -= y / probs[cls];
            }
            if 1.0 - probs[cls] > NUMERIC_GUARD {
                d += (1.0 - y) / (1.0 - probs[cls]);
            }
            dprobs[cls] = d;
            dprob_dot += d * probs[cls];
        }
        for cls in 0..c {
            dlogits[cls] = probs[cls] * (dprobs[cls] - dprob_dot);
        }
        // d logit_c / du = h_c / guarded - dot_c * u / (norm * guarded^2)
        for cls in 0..c {
            let dl = dlogits[cls];
            if dl == 0.0 {
                continue;
            }
            let h = centers.center(cls);
            let dot: f64 = u.iter().zip(h).map(|(a, b)| a * b).sum();
            let radial = dot / (norm * guarded * guarded);
            for j in 0..q {
                grads[i][j] += dl * (h[j] / guarded - radial * u[j]);
            }
        }
    }
    let scale = 1.0 / n as f64;
    total *= scale;
    for row in &mut grads {
        for g in row {
            *g *= scale;
        }
    }
    Ok((total, grads))
}

/// One pairwise term: softplus(I) - S*I, evaluated in the overflow-safe
/// log1p(exp(-|I|)) + max(0, I) form.
pub fn pairwise_term(inner: f64, similar: bool) -> f64 {
    let stable = (-inner.abs()).exp().ln_1p() + inner.max(0.0);
    stable - if similar { inner } else { 0.0 }
}

/// Pairwise loss over ordered pairs, with I_ij = (u_i . u_j) / 2. The mean
/// runs over all included pairs; `include_diagonal` controls whether i = j
/// pairs (always similar) participate.
pub fn pairwise_loss(
    codes: &[Vec<f64>],
    sim: &SimilarityMatrix,
    include_diagonal: bool,
) -> Result<f64> {
    Ok(pairwise_loss_with_grad(codes, sim, include_diagonal)?.0)
}

pub fn pairwise_loss_with_grad(
    codes: &[Vec<f64>],
    sim: &SimilarityMatrix,
    include_diagonal: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::InvalidArgument("pairwise loss needs N >= 2".into()));
    }
    if sim.n != n {
        return Err(Error::Shape(format!(
            "similarity matrix is {}x{} but there are {n} code rows",
            sim.n, sim.n
        )));
    }
    let q = codes[0].len();
    let num_pairs = if include_diagonal { n * n } else { n * n - n };
    let scale = 1.0 / num_pairs as f64;

    let mut total = 0.0;
    // dL/dI as a dense matrix; grad_u_i = scale * sum_j dterm(I_ij) * u_j
    // using symmetry of I and S.
    let mut dterm = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if !include_diagonal && i == j {
                continue;
            }
            let inner: f64 =
                0.5 * codes[i].iter().zip(&codes[j]).map(|(a, b)| a * b).sum::<f64>();
            let similar = sim.get(i, j);
            total += pairwise_term(inner, similar);
            // d/dI [softplus(I) - S*I] = sigmoid(I) - S
            dterm[i * n + j] =
                crate::network::sigmoid(inner) - if similar { 1.0 } else { 0.0 };
        }
    }
    total *= scale;

    let mut grads = vec![vec![0.0; q]; n];
    for i in 0..n {
        for j in 0..n {
            let d = dterm[i * n + j];
            if d == 0.0 {
                continue;
            }
            for t in 0..q {
                grads[i][t] += scale * d * codes[j][t];
            }
        }
    }
    Ok((total, grads))
}

/// Mutual alignment loss: mean over samples of 1 - cos(u_c, u_p),
/// evaluated in the cancellation-free half-angle form
/// ||a/||a|| - b/||b||||^2 / 2, which is exactly zero for identical rows.
/// The detach side does not change the value, only which branch the
/// gradient variant reports.
pub fn mutual_loss(codes_center: &[Vec<f64>], codes_pairwise: &[Vec<f64>]) -> Result<f64> {
    // Value is detach-independent; reuse the gradient path with either side.
    Ok(mutual_loss_with_grad(codes_center, codes_pairwise, DetachSide::DetachPairwise)?.0)
}

/// Loss plus (dL/dU_c, dL/dU_p); the detached side's gradient is zero.
pub fn mutual_loss_with_grad(
    codes_center: &[Vec<f64>],
    codes_pairwise: &[Vec<f64>],
    detach: DetachSide,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = codes_center.len();
    if n == 0 || codes_pairwise.len() != n {
        return Err(Error::Shape(format!(
            "mutual loss got {} center rows and {} pairwise rows",
            n,
            codes_pairwise.len()
        )));
    }
    let q = codes_center[0].len();
    let mut total = 0.0;
    let mut grads_c = vec![vec![0.0; q]; n];
    let mut grads_p = vec![vec![0.0; q]; n];
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let uc = &codes_center[i];
        let up = &codes_pairwise[i];
        if uc.len() != q || up.len() != q {
            return Err(Error::Shape(format!("mutual loss row {i}: length mismatch")));
        }
        let nc_raw = row_norm(uc, i, "mutual loss (center)")?;
        let np_raw = row_norm(up, i, "mutual loss (pairwise)")?;
        let nc = nc_raw + NUMERIC_GUARD;
        let np = np_raw + NUMERIC_GUARD;
        let diff: Vec<f64> = uc
            .iter()
            .zip(up)
            .map(|(a, b)| a / nc - b / np)
            .collect();
        total += 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        // With a_hat = a / (||a|| + guard):
        // dL/da = (diff/nc - a * (a . diff) / (||a|| * nc^2)) / N
        if detach != DetachSide::DetachCenter {
            let proj: f64 = uc.iter().zip(&diff).map(|(a, d)| a * d).sum();
            for t in 0..q {
                grads_c[i][t] = scale * (diff[t] / nc - uc[t] * proj / (nc_raw * nc * nc));
            }
        }
        if detach != DetachSide::DetachPairwise {
            let proj: f64 = up.iter().zip(&diff).map(|(b, d)| b * d).sum();
            for t in 0..q {
                grads_p[i][t] = -scale * (diff[t] / np - up[t] * proj / (np_raw * np * np));
            }
        }
    }
    Ok((total * scale, grads_c, grads_p))
}

/// Weighted total objective.
pub fn total_loss(l_center: f64, l_pairwise: f64, l_mutual: f64, weights: &LossWeights) -> f64 {
    weights.center * l_center + weights.pairwise * l_pairwise + weights.mutual * l_mutual
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centers::HashCenterTable;

    fn table(rows: Vec<Vec<f64>>) -> HashCenterTable {
        let q = rows[0].len();
        let mut t = HashCenterTable {
            code_len: q,
            centers: rows,
            min_distance: 0,
        };
        t.min_distance = crate::centers::min_pairwise_hamming(&t);
        t
    }

    #[test]
    fn center_loss_symmetric_case_is_two_ln_two() {
        let centers = table(vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
        let codes = vec![vec![1.0, -1.0]];
        let labels = vec![vec![1u8, 0]];
        let loss = center_loss(&codes, &labels, &centers).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn center_loss_aligned_case_matches_sigmoid_form() {
        // u = h_1 with h_2 = -h_1 at q=4: logits +-2, so
        // P_1 = softmax gap sigma(4) and L = -2 ln sigma(4).
        let h1 = vec![1.0, -1.0, 1.0, 1.0];
        let h2: Vec<f64> = h1.iter().map(|v| -v).collect();
        let centers = table(vec![h1.clone(), h2]);
        let codes = vec![h1];
        let labels = vec![vec![1u8, 0]];
        let loss = center_loss(&codes, &labels, &centers).unwrap();
        let expect = -2.0 * crate::network::sigmoid(4.0).ln();
        assert!((loss - expect).abs() < 1e-6, "loss {loss} vs {expect}");
    }

    #[test]
    fn center_loss_scalar_code_case() {
        let centers = table(vec![vec![1.0], vec![-1.0]]);
        let codes = vec![vec![0.5]];
        let labels = vec![vec![1u8, 0]];
        let loss = center_loss(&codes, &labels, &centers).unwrap();
        // logits = +-(0.5/0.5) = +-1, P_1 = sigma(2), L = -2 ln sigma(2).
        let expect = -2.0 * crate::network::sigmoid(2.0).ln();
        assert!((loss - expect).abs() < 1e-9, "loss {loss} vs {expect}");
        assert!((crate::network::sigmoid(2.0) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn center_loss_rejects_zero_rows_and_tiny_c() {
        let centers = table(vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
        let err = center_loss(&vec![vec![0.0, 0.0]], &[vec![1, 0]], &centers).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("row 0")),
            other => panic!("unexpected {other:?}"),
        }
        let one = table(vec![vec![1.0, 1.0]]);
        assert!(center_loss(&vec![vec![1.0, 0.5]], &[vec![1]], &one).is_err());
    }

    #[test]
    fn center_loss_decreases_toward_own_center() {
        let centers = table(vec![
            vec![1.0, 1.0, -1.0, 1.0],
            vec![-1.0, 1.0, 1.0, -1.0],
            vec![1.0, -1.0, 1.0, 1.0],
        ]);
        let labels = vec![vec![1u8, 0, 0]];
        // Moving farther along the ray toward the own center increases the
        // scaled cosine margin and must reduce the loss.
        let h = centers.center(0);
        let near: Vec<f64> = h.iter().map(|v| 0.2 * v + 0.1).collect();
        let far: Vec<f64> = h.iter().map(|v| 0.9 * v + 0.01).collect();
        let l_near = center_loss(&vec![near], &labels, &centers).unwrap();
        let l_far = center_loss(&vec![far], &labels, &centers).unwrap();
        assert!(l_far < l_near);
    }

    #[test]
    fn similarity_matrix_label_intersection() {
        let labels = vec![
            vec![1u8, 0, 0, 0, 0, 0],
            vec![1u8, 0, 0, 0, 0, 0],
            vec![0u8, 1, 0, 0, 0, 0],
            vec![0u8, 1, 0, 1, 0, 0],     // {1,3}
            vec![0u8, 0, 0, 1, 0, 1],     // {3,5}
            vec![0u8, 0, 1, 0, 0, 1],     // {2,5}
        ];
        let s = similarity_matrix(&labels);
        assert!(s.get(0, 1)); // identical one-hot
        assert!(!s.get(0, 2)); // disjoint one-hot
        assert!(s.get(3, 4)); // {1,3} meets {3,5}
        assert!(!s.get(3, 5)); // {1,3} vs {2,5}
        for i in 0..labels.len() {
            assert!(s.get(i, i));
            for j in 0..labels.len() {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn pairwise_term_values() {
        assert!((pairwise_term(0.0, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((pairwise_term(0.0, false) - std::f64::consts::LN_2).abs() < 1e-12);
        // all-ones codes at q=8: I = 4.
        let expect_sim = (-4.0f64).exp().ln_1p();
        assert!((pairwise_term(4.0, true) - expect_sim).abs() < 1e-12);
        assert!((pairwise_term(4.0, false) - (expect_sim + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn pairwise_loss_reduces_to_term_means() {
        let codes = vec![vec![1.0; 8], vec![1.0; 8]];
        let sim = similarity_matrix(&[vec![1u8, 0], vec![1u8, 0]]);
        // All four ordered pairs have I = 4 and S = 1.
        let loss = pairwise_loss(&codes, &sim, true).unwrap();
        assert!((loss - pairwise_term(4.0, true)).abs() < 1e-12);
        let loss = pairwise_loss(&codes, &sim, false).unwrap();
        assert!((loss - pairwise_term(4.0, true)).abs() < 1e-12);
    }

    #[test]
    fn pairwise_loss_is_permutation_invariant() {
        let codes = vec![
            vec![0.4, -0.2, 0.9],
            vec![-0.7, 0.1, 0.3],
            vec![0.2, 0.8, -0.5],
        ];
        let labels = vec![vec![1u8, 0], vec![0u8, 1], vec![1u8, 0]];
        let l1 = pairwise_loss(&codes, &similarity_matrix(&labels), true).unwrap();
        let perm = [2usize, 0, 1];
        let codes_p: Vec<Vec<f64>> = perm.iter().map(|&i| codes[i].clone()).collect();
        let labels_p: Vec<Vec<u8>> = perm.iter().map(|&i| labels[i].clone()).collect();
        let l2 = pairwise_loss(&codes_p, &similarity_matrix(&labels_p), true).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn mutual_loss_cases() {
        let u = vec![vec![0.3, -0.6], vec![0.9, 0.1]];
        assert!(mutual_loss(&u, &u).unwrap().abs() < 1e-12);
        let neg: Vec<Vec<f64>> = u.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        assert!((mutual_loss(&u, &neg).unwrap() - 2.0).abs() < 1e-9);
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 1.0]];
        assert!((mutual_loss(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mutual_loss_stays_in_range() {
        let mut rng = crate::rng::rng_for(5, 77);
        use rand::Rng;
        for _ in 0..200 {
            let a: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let b: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let l = mutual_loss(&a, &b).unwrap();
            assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        }
    }

    #[test]
    fn mutual_grad_respects_detach_side() {
        let a = vec![vec![0.4, -0.3, 0.8]];
        let b = vec![vec![-0.1, 0.9, 0.2]];
        let (_, gc, gp) = mutual_loss_with_grad(&a, &b, DetachSide::DetachPairwise).unwrap();
        assert!(gc[0].iter().any(|v| *v != 0.0));
        assert!(gp[0].iter().all(|v| *v == 0.0));
        let (_, gc, gp) = mutual_loss_with_grad(&a, &b, DetachSide::DetachCenter).unwrap();
        assert!(gc[0].iter().all(|v| *v == 0.0));
        assert!(gp[0].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let zero = LossWeights::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss(3.0, 4.0, 5.0, &zero), 0.0);
        let default = LossWeights::default();
        assert!((total_loss(0.5, 0.2, 0.1, &default) - 2.3).abs() < 1e-12);
        let proj = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(total_loss(0.7, 9.0, 9.0, &proj), 0.7);
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
    }
}
