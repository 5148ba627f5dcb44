//! Representation-space diagnostics.
//!
//! * SAM: pairwise angles inside one modality at one snapshot. Differences
//!   between snapshots measure how much the topology changed.
//! * RAM: angle between a sample's embeddings in two snapshots, a measure of
//!   global rotation.
//! * ImAV: change of the vision–language angle of each sample between two
//!   snapshots, over the samples the older snapshot retrieved correctly.
//!
//! Plus R@K retrieval and a numeric check of how a rotation applied to one
//! modality alone breaks retrieval while leaving each modality's topology
//! intact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datastream::PhaseDataset;
use crate::encoder::DualEncoderSnapshot;
use crate::error::{Error, Result};
use crate::losses::ContrastiveMatrix;
use crate::numeric::{
    angle_deg, child_seed, cosine_matrix, dot, l2_normalize_rows, negate_identity, seeded_rng, Matrix, UnitEmbeddings,
};

/// Bin edges for SAM-delta and ImAV histograms.
pub const SAM_BINS: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 180.0];
/// Bin edges for RAM histograms.
pub const RAM_BINS: [f64; 6] = [0.0, 15.0, 20.0, 25.0, 30.0, 180.0];

/// Degree histogram. The first bin is closed `[e0, e1]`, later bins are
/// `(e_k, e_k+1]`. Values outside the edges land in the nearest end bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    pub bin_edges_deg: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl AngleHistogram {
    pub fn from_angles(edges: &[f64], angles: &[f64]) -> Result<Self> {
        validate_edges(edges)?;
        let mut counts = vec![0usize; edges.len() - 1];
        for &a in angles {
            // First edge strictly above a closes the bin; a == edge goes left.
            let bin = edges[1..edges.len() - 1].iter().filter(|&&e| a > e).count();
            counts[bin] += 1;
        }
        let total = angles.len();
        let fractions = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect();
        Ok(Self {
            bin_edges_deg: edges.to_vec(),
            counts,
            fractions,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Human-readable bin labels, e.g. `[0,5]`, `(5,10]`.
    pub fn labels(&self) -> Vec<String> {
        bin_labels(&self.bin_edges_deg)
    }
}

pub fn bin_labels(edges: &[f64]) -> Vec<String> {
    edges
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let open = if k == 0 { '[' } else { '(' };
            format!("{open}{},{}]", w[0], w[1])
        })
        .collect()
}

fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "bin edges must be strictly ascending with at least two entries, got {edges:?}"
        )));
    }
    Ok(())
}

/// Pairwise angles (degrees) between rows; symmetric with a zero diagonal.
pub fn sam(e: &UnitEmbeddings) -> Matrix {
    let n = e.len();
    let mut out = Matrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let angle = angle_deg(dot(e.row(a), e.row(b)));
            out[(a, b)] = angle;
            out[(b, a)] = angle;
        }
    }
    out
}

fn check_same_batch(e_i: &UnitEmbeddings, e_j: &UnitEmbeddings) -> Result<()> {
    if e_i.len() != e_j.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} samples vs {} samples",
            e_i.len(),
            e_j.len()
        )));
    }
    Ok(())
}

/// `|SAM_i − SAM_j|` over unordered off-diagonal pairs.
pub fn sam_delta(e_i: &UnitEmbeddings, e_j: &UnitEmbeddings) -> Result<Vec<f64>> {
    check_same_batch(e_i, e_j)?;
    let (si, sj) = (sam(e_i), sam(e_j));
    let n = e_i.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            out.push((si[(a, b)] - sj[(a, b)]).abs());
        }
    }
    Ok(out)
}

pub fn sam_delta_hist(e_i: &UnitEmbeddings, e_j: &UnitEmbeddings, edges: &[f64]) -> Result<AngleHistogram> {
    AngleHistogram::from_angles(edges, &sam_delta(e_i, e_j)?)
}

/// Per-sample angle between the same sample in two snapshots.
pub fn ram(e_i: &UnitEmbeddings, e_j: &UnitEmbeddings) -> Result<Vec<f64>> {
    check_same_batch(e_i, e_j)?;
    if e_i.dim() != e_j.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding widths {} and {}",
            e_i.dim(),
            e_j.dim()
        )));
    }
    Ok((0..e_i.len()).map(|a| angle_deg(dot(e_i.row(a), e_j.row(a)))).collect())
}

pub fn ram_hist(e_i: &UnitEmbeddings, e_j: &UnitEmbeddings, edges: &[f64]) -> Result<AngleHistogram> {
    AngleHistogram::from_angles(edges, &ram(e_i, e_j)?)
}

/// Embeddings of one batch under one snapshot.
#[derive(Debug, Clone)]
pub struct PairedEmbeddings {
    pub vision: UnitEmbeddings,
    pub language: UnitEmbeddings,
}

impl PairedEmbeddings {
    pub fn encode(snapshot: &DualEncoderSnapshot, data: &PhaseDataset) -> Result<Self> {
        let (vision, language) = snapshot.encode_pair(&data.vision_inputs, &data.language_inputs)?;
        Ok(Self { vision, language })
    }

    pub fn contrastive(&self) -> Result<ContrastiveMatrix> {
        ContrastiveMatrix::from_embeddings(&self.vision, &self.language)
    }
}

/// Indices the old snapshot retrieves correctly (image→text, optionally
/// also text→image).
pub fn correctly_retrieved(m: &ContrastiveMatrix, both_directions: bool) -> Vec<usize> {
    (0..m.n())
        .filter(|&i| m.row_argmax(i) == i && (!both_directions || m.col_argmax(i) == i))
        .collect()
}

/// `|∠(V_old, L_old) − ∠(V_new, L_new)|` per correctly retrieved sample.
pub fn imav_angles(old: &PairedEmbeddings, new: &PairedEmbeddings, both_directions: bool) -> Result<Vec<f64>> {
    check_same_batch(&old.vision, &new.vision)?;
    check_same_batch(&old.language, &new.language)?;
    let correct = correctly_retrieved(&old.contrastive()?, both_directions);
    if correct.is_empty() {
        return Err(Error::EmptyCorrectSet);
    }
    Ok(correct
        .into_iter()
        .map(|a| {
            let before = angle_deg(dot(old.vision.row(a), old.language.row(a)));
            let after = angle_deg(dot(new.vision.row(a), new.language.row(a)));
            (before - after).abs()
        })
        .collect())
}

pub fn imav(
    old: &DualEncoderSnapshot,
    new: &DualEncoderSnapshot,
    data: &PhaseDataset,
    edges: &[f64],
    both_directions: bool,
) -> Result<AngleHistogram> {
    if data.is_empty() {
        return Err(Error::DimensionMismatch("ImAV needs a nonempty dataset".into()));
    }
    let old_e = PairedEmbeddings::encode(old, data)?;
    let new_e = PairedEmbeddings::encode(new, data)?;
    AngleHistogram::from_angles(edges, &imav_angles(&old_e, &new_e, both_directions)?)
}

/// Recall@K for both retrieval directions; map keys are the requested K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: BTreeMap<usize, f64>,
    pub text_to_image: BTreeMap<usize, f64>,
}

impl RetrievalReport {
    pub fn r1(&self) -> (f64, f64) {
        (
            self.image_to_text.get(&1).copied().unwrap_or(f64::NAN),
            self.text_to_image.get(&1).copied().unwrap_or(f64::NAN),
        )
    }
}

/// Zero-based rank of `values[target]` in descending order; equal values at
/// lower indices rank earlier.
fn rank_of(values: &[f64], target: usize) -> usize {
    let t = values[target];
    values
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > t || (x == t && j < target))
        .count()
}

pub fn recall_at_k(m: &ContrastiveMatrix, ks: &[usize]) -> RetrievalReport {
    let n = m.n();
    let row_ranks: Vec<usize> = (0..n).map(|i| rank_of(m.matrix().row(i), i)).collect();
    let col_ranks: Vec<usize> = (0..n).map(|j| rank_of(&m.matrix().column(j), j)).collect();
    let recall = |ranks: &[usize], k: usize| {
        if n == 0 {
            return 0.0;
        }
        let k = k.min(n);
        ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64
    };
    RetrievalReport {
        image_to_text: ks.iter().map(|&k| (k, recall(&row_ranks, k))).collect(),
        text_to_image: ks.iter().map(|&k| (k, recall(&col_ranks, k))).collect(),
    }
}

/// Contrastive matrix before and after a rotation of the language side only.
#[derive(Debug, Clone, Serialize)]
pub struct FlipOutcome {
    pub before: Matrix,
    pub after: Matrix,
    pub argmax_before: Vec<usize>,
    pub argmax_after: Vec<usize>,
    /// Every entry of `after` equals minus the matching entry of `before`.
    pub all_negated: bool,
}

/// Negate the language side of a contrastive matrix (`R = −I`).
pub fn flip_language_side(m: &ContrastiveMatrix) -> FlipOutcome {
    let before = m.matrix().clone();
    let after = before.scale(-1.0);
    flip_outcome(before, after)
}

fn flip_outcome(before: Matrix, after: Matrix) -> FlipOutcome {
    let n = before.rows();
    let argmax = |m: &Matrix| -> Vec<usize> { (0..n).map(|i| crate::numeric::argmax_prefer(m.row(i), i)).collect() };
    let all_negated = before.as_slice().iter().zip(after.as_slice()).all(|(b, a)| *a == -*b);
    FlipOutcome {
        argmax_before: argmax(&before),
        argmax_after: argmax(&after),
        before,
        after,
        all_negated,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RotationDemo {
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    /// Sample the original embeddings retrieve correctly.
    pub correct_sample: usize,
    /// Sample the original embeddings misretrieve.
    pub missed_sample: usize,
    pub rotation: Matrix,
    /// `max |RᵀR − I|`.
    pub orthogonality_error: f64,
    pub language_only: FlipOutcome,
    /// The correct sample's row argmax left the diagonal after the flip.
    pub correct_sample_flipped: bool,
    /// Contrastive matrix after rotating both modalities, minus the original.
    pub both_sides_max_change: f64,
    pub retrieval_before: RetrievalReport,
    pub retrieval_both_sides: RetrievalReport,
    /// Resampling attempts needed to satisfy the construction.
    pub attempts: usize,
}

const DEMO_MAX_ATTEMPTS: usize = 1000;

/// Build unit embeddings where one sample is retrieved correctly and another
/// is not, then apply `R = −I` to the language side only, and to both sides.
pub fn rotation_flip_demo(d: usize, n: usize, seed: u64) -> Result<RotationDemo> {
    if d < 2 || n < 2 {
        return Err(Error::Config(format!(
            "rotation demo needs dim >= 2 and n >= 2, got dim {d}, n {n}"
        )));
    }
    for attempt in 0..DEMO_MAX_ATTEMPTS {
        let mut rng = seeded_rng(child_seed(seed, attempt as u64));
        let v = l2_normalize_rows(&Matrix::gaussian(n, d, &mut rng))?;
        // Language rows near their vision partner so some pairs align.
        let noise = Matrix::gaussian(n, d, &mut rng).scale(0.8);
        let mut l_raw = v.matrix().clone();
        l_raw.add_scaled(&noise, 1.0)?;
        let l = l2_normalize_rows(&l_raw)?;
        let m = ContrastiveMatrix::from_embeddings(&v, &l)?;
        let correct = (0..n).find(|&i| m.row_argmax(i) == i && strictly_best(m.matrix().row(i), i));
        let missed = (0..n).find(|&i| m.row_argmax(i) != i);
        let (Some(a), Some(b)) = (correct, missed) else {
            continue;
        };

        let r = negate_identity(d);
        let orthogonality_error = r.t_matmul(&r)?.max_abs_diff(&Matrix::identity(d));
        let l_rot = l.transform(&r)?;
        let after = cosine_matrix(&v, &l_rot)?;
        let language_only = flip_outcome(m.matrix().clone(), after);
        let correct_sample_flipped = language_only.argmax_after[a] != a;

        let v_rot = v.transform(&r)?;
        let m_both = ContrastiveMatrix::from_embeddings(&v_rot, &l_rot)?;
        let ks = [1, 5, 10];
        return Ok(RotationDemo {
            dim: d,
            n,
            seed,
            correct_sample: a,
            missed_sample: b,
            rotation: r,
            orthogonality_error,
            correct_sample_flipped,
            both_sides_max_change: m_both.matrix().max_abs_diff(m.matrix()),
            retrieval_before: recall_at_k(&m, &ks),
            retrieval_both_sides: recall_at_k(&m_both, &ks),
            language_only,
            attempts: attempt + 1,
        });
    }
    Err(Error::ConstructionFailure(format!(
        "no instance with both a correct and a missed sample in {DEMO_MAX_ATTEMPTS} draws"
    )))
}

fn strictly_best(row: &[f64], i: usize) -> bool {
    row.iter().enumerate().all(|(j, &x)| j == i || x < row[i])
}

fn fmt_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    for r in m.row_iter() {
        let cells: Vec<String> = r.iter().map(|x| format!("{x:>8.4}")).collect();
        out.push_str("  [");
        out.push_str(&cells.join(" "));
        out.push_str(" ]\n");
    }
    out
}

impl RotationDemo {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "rotation flip demo: dim={} n={} seed={} (attempts {})\n",
            self.dim, self.n, self.seed, self.attempts
        ));
        s.push_str(&format!("R = -I, max|R^T R - I| = {:e}\n\n", self.orthogonality_error));
        s.push_str("contrastive matrix before:\n");
        s.push_str(&fmt_matrix(&self.language_only.before));
        s.push_str(&format!(
            "row argmax before: {:?}\n\n",
            self.language_only.argmax_before
        ));
        s.push_str("after rotating the language side only:\n");
        s.push_str(&fmt_matrix(&self.language_only.after));
        s.push_str(&format!("row argmax after:  {:?}\n\n", self.language_only.argmax_after));
        s.push_str(&format!(
            "every entry negated: {}\n",
            yes_no(self.language_only.all_negated)
        ));
        s.push_str(&format!(
            "sample {} (correct before) flipped off the diagonal: {}\n",
            self.correct_sample,
            yes_no(self.correct_sample_flipped)
        ));
        s.push_str(&format!(
            "sample {} was misretrieved before the rotation\n",
            self.missed_sample
        ));
        s.push_str(&format!(
            "rotating both sides: max change {:e}, retrieval unchanged: {}\n",
            self.both_sides_max_change,
            yes_no(self.retrieval_before == self.retrieval_both_sides)
        ));
        s
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}
