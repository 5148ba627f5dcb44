//! Synthetic paired vision/language data with controllable domain shift.
//!
//! Each sample has a latent unit vector `z` drawn around a domain mean. The
//! two modalities observe `z` through different fixed linear maps (shared by
//! every domain) plus independent Gaussian noise.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian, l2_normalize_rows, norm, orthonormal_columns, seeded_rng, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub latent_dim: usize,
    pub vision_dim: usize,
    pub language_dim: usize,
    /// Unit vector in latent space.
    pub domain_mean: Vec<f64>,
    pub latent_noise: f64,
    pub modality_noise: f64,
    /// Seed of the per-sample noise.
    pub seed: u64,
    /// Seed of the modality maps; domains of one benchmark share it.
    pub map_seed: u64,
    /// Sample ids are `id_offset + index`.
    pub id_offset: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 || self.vision_dim < 2 || self.language_dim < 2 {
            return Err(Error::Config("domain dimensions must be at least 2".into()));
        }
        if self.vision_dim < self.latent_dim || self.language_dim < self.latent_dim {
            return Err(Error::Config("input widths must be at least the latent width".into()));
        }
        if self.domain_mean.len() != self.latent_dim {
            return Err(Error::Config(format!(
                "domain mean has {} entries, latent width is {}",
                self.domain_mean.len(),
                self.latent_dim
            )));
        }
        if (norm(&self.domain_mean) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("domain mean must be a unit vector".into()));
        }
        if !(self.latent_noise >= 0.0) || !(self.modality_noise >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if self.name.is_empty() || self.name.contains([',', '"', '\n', '\r']) {
            return Err(Error::Config(format!("invalid domain name '{}'", self.name)));
        }
        Ok(())
    }
}

/// Two latent unit means separated by `angle_deg`, in the plane of the
/// first two latent axes.
pub fn domain_means(latent_dim: usize, angle_deg: f64) -> (Vec<f64>, Vec<f64>) {
    let mut a = vec![0.0; latent_dim];
    let mut b = vec![0.0; latent_dim];
    a[0] = 1.0;
    let t = angle_deg.to_radians();
    b[0] = t.cos();
    b[1] = t.sin();
    (a, b)
}

/// Linear maps from latent space into each modality's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMaps {
    /// `vision_dim × latent_dim`, orthonormal columns.
    pub vision: Matrix,
    /// `language_dim × latent_dim`, orthonormal columns.
    pub language: Matrix,
}

impl ModalityMaps {
    pub fn new(latent_dim: usize, vision_dim: usize, language_dim: usize, map_seed: u64) -> Self {
        let mut rng = seeded_rng(map_seed);
        let vision = orthonormal_columns(vision_dim, latent_dim, &mut rng);
        let language = orthonormal_columns(language_dim, latent_dim, &mut rng);
        Self { vision, language }
    }
}

/// Paired samples of one training phase (or any subset of a domain).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDataset {
    pub vision_inputs: Matrix,
    pub language_inputs: Matrix,
    pub sample_ids: Vec<u64>,
    /// Domain name per row.
    pub domains: Vec<String>,
}

/// A training batch has the same layout as a dataset.
pub type PhaseBatch = PhaseDataset;

impl PhaseDataset {
    pub fn empty(vision_dim: usize, language_dim: usize) -> Self {
        Self {
            vision_inputs: Matrix::zeros(0, vision_dim),
            language_inputs: Matrix::zeros(0, language_dim),
            sample_ids: Vec::new(),
            domains: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PhaseDataset {
        PhaseDataset {
            vision_inputs: self.vision_inputs.select_rows(idx),
            language_inputs: self.language_inputs.select_rows(idx),
            sample_ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i].clone()).collect(),
        }
    }

    pub fn concat(&self, other: &PhaseDataset) -> Result<PhaseDataset> {
        let mut sample_ids = self.sample_ids.clone();
        sample_ids.extend_from_slice(&other.sample_ids);
        let mut domains = self.domains.clone();
        domains.extend_from_slice(&other.domains);
        Ok(PhaseDataset {
            vision_inputs: self.vision_inputs.vstack(&other.vision_inputs)?,
            language_inputs: self.language_inputs.vstack(&other.language_inputs)?,
            sample_ids,
            domains,
        })
    }

    /// Seeded permutation of the rows.
    pub fn shuffled(&self, seed: u64) -> PhaseDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded_rng(seed));
        self.select(&idx)
    }

    pub fn has_unique_ids(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.len());
        self.sample_ids.iter().all(|id| seen.insert(*id))
    }

    /// UTF-8 CSV: `id,domain,v_0..,l_0..` with 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let dv = self.vision_inputs.cols();
        let dl = self.language_inputs.cols();
        let mut out = String::from("id,domain");
        for k in 0..dv {
            out.push_str(&format!(",v_{k}"));
        }
        for k in 0..dl {
            out.push_str(&format!(",l_{k}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!("{},{}", self.sample_ids[i], self.domains[i]));
            for &x in self.vision_inputs.row(i).iter().chain(self.language_inputs.row(i)) {
                out.push_str(&format!(",{x:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<PhaseDataset> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(file).map_err(|msg| Error::format(path, msg))
    }

    pub fn parse_csv(reader: impl std::io::Read) -> std::result::Result<PhaseDataset, String> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| e.to_string())?.clone();
        if header.get(0) != Some("id") || header.get(1) != Some("domain") {
            return Err("header must start with id,domain".into());
        }
        let dv = header.iter().filter(|h| h.starts_with("v_")).count();
        let dl = header.iter().filter(|h| h.starts_with("l_")).count();
        for (k, h) in header.iter().skip(2).enumerate() {
            let expected = if k < dv {
                format!("v_{k}")
            } else {
                format!("l_{}", k - dv)
            };
            if h != expected {
                return Err(format!("unexpected column '{h}', wanted '{expected}'"));
            }
        }
        let mut vision = Vec::new();
        let mut language = Vec::new();
        let mut sample_ids = Vec::new();
        let mut domains = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| e.to_string())?;
            if rec.len() != 2 + dv + dl {
                return Err(format!("row {} has {} fields", line + 1, rec.len()));
            }
            let id = rec[0]
                .parse::<u64>()
                .map_err(|e| format!("row {}: bad id: {e}", line + 1))?;
            sample_ids.push(id);
            domains.push(rec[1].to_string());
            for (k, field) in rec.iter().skip(2).enumerate() {
                let x = field
                    .parse::<f64>()
                    .map_err(|e| format!("row {}: bad value '{field}': {e}", line + 1))?;
                if !x.is_finite() {
                    return Err(format!("row {}: non-finite value", line + 1));
                }
                if k < dv {
                    vision.push(x);
                } else {
                    language.push(x);
                }
            }
        }
        let n = sample_ids.len();
        let d = PhaseDataset {
            vision_inputs: Matrix::from_vec(n, dv, vision).map_err(|e| e.to_string())?,
            language_inputs: Matrix::from_vec(n, dl, language).map_err(|e| e.to_string())?,
            sample_ids,
            domains,
        };
        if !d.has_unique_ids() {
            return Err("duplicate sample ids".into());
        }
        Ok(d)
    }
}

/// Latent vectors `normalize(mean + σ_z g)` for `n` samples.
///
/// Consumes the domain's noise stream in the same order as
/// [`generate_domain`], so the latents match the generated samples.
pub fn generate_latents(spec: &DomainSpec, n: usize) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let k = spec.latent_dim;
    let mut latents = Matrix::zeros(n, k);
    for i in 0..n {
        let row = latents.row_mut(i);
        for (z, &m) in row.iter_mut().zip(&spec.domain_mean) {
            *z = m + spec.latent_noise * gaussian(&mut rng);
        }
        // Skip this sample's modality noise draws.
        for _ in 0..spec.vision_dim + spec.language_dim {
            gaussian(&mut rng);
        }
    }
    Ok(l2_normalize_rows(&latents)?.into_matrix())
}

pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<PhaseDataset> {
    spec.validate()?;
    let maps = ModalityMaps::new(spec.latent_dim, spec.vision_dim, spec.language_dim, spec.map_seed);
    let mut rng = seeded_rng(spec.seed);
    let mut vision = Matrix::zeros(n, spec.vision_dim);
    let mut language = Matrix::zeros(n, spec.language_dim);
    let mut z = vec![0.0; spec.latent_dim];
    for i in 0..n {
        for (zk, &m) in z.iter_mut().zip(&spec.domain_mean) {
            *zk = m + spec.latent_noise * gaussian(&mut rng);
        }
        let zn = norm(&z);
        if !(zn > 1e-12) {
            return Err(Error::DegenerateRow { row: i, norm: zn });
        }
        z.iter_mut().for_each(|x| *x /= zn);
        for (out, map) in [(&mut vision, &maps.vision), (&mut language, &maps.language)] {
            let row = out.row_mut(i);
            for (r, x) in row.iter_mut().enumerate() {
                let signal: f64 = map.row(r).iter().zip(&z).map(|(a, b)| a * b).sum();
                *x = signal + spec.modality_noise * gaussian(&mut rng);
            }
        }
    }
    Ok(PhaseDataset {
        vision_inputs: vision,
        language_inputs: language,
        sample_ids: (0..n as u64).map(|i| spec.id_offset + i).collect(),
        domains: vec![spec.name.clone(); n],
    })
}

/// Seeded split into `(train, test)` with `round(test_fraction · n)` test rows.
pub fn split_holdout(d: &PhaseDataset, test_fraction: f64, seed: u64) -> Result<(PhaseDataset, PhaseDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let n_test = (test_fraction * d.len() as f64).round() as usize;
    let (test, train) = idx.split_at(n_test);
    Ok((d.select(train), d.select(test)))
}

/// Shuffle, then cut into `n_phases` contiguous slices whose sizes differ by
/// at most one (earlier phases take the remainder).
pub fn split_phases(d: &PhaseDataset, n_phases: usize, seed: u64) -> Result<Vec<PhaseDataset>> {
    if n_phases == 0 || d.len() < n_phases {
        return Err(Error::TooFewSamples {
            samples: d.len(),
            parts: n_phases,
        });
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let base = d.len() / n_phases;
    let extra = d.len() % n_phases;
    let mut out = Vec::with_capacity(n_phases);
    let mut at = 0;
    for p in 0..n_phases {
        let size = base + usize::from(p < extra);
        out.push(d.select(&idx[at..at + size]));
        at += size;
    }
    Ok(out)
}

/// Rehearsal memory with an equal share per phase seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    phases_seen: usize,
    /// Stored rows per phase, in phase order. Each is a uniform random
    /// sample of that phase, so any prefix is one too.
    per_phase: Vec<PhaseDataset>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer capacity must be > 0".into()));
        }
        Ok(Self {
            capacity,
            phases_seen: 0,
            per_phase: Vec::new(),
        })
    }

    pub fn phases_seen(&self) -> usize {
        self.phases_seen
    }

    pub fn len(&self) -> usize {
        self.per_phase.iter().map(PhaseDataset::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows stored for each phase, in the order phases were added.
    pub fn phase_counts(&self) -> Vec<usize> {
        self.per_phase.iter().map(PhaseDataset::len).collect()
    }

    /// All stored rows as one dataset.
    pub fn contents(&self) -> Option<PhaseDataset> {
        let mut it = self.per_phase.iter();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, p| acc.concat(p).expect("buffer rows share widths")))
    }
}

/// Add `phase` to the buffer, rebalancing to `⌊capacity / phases_seen⌋`
/// rows per phase.
pub fn buffer_update(buf: &ReplayBuffer, phase: &PhaseDataset, seed: u64) -> Result<ReplayBuffer> {
    let mut next = buf.clone();
    next.phases_seen += 1;
    let quota = next.capacity / next.phases_seen;
    for stored in &mut next.per_phase {
        if stored.len() > quota {
            let keep: Vec<usize> = (0..quota).collect();
            *stored = stored.select(&keep);
        }
    }
    let mut idx: Vec<usize> = (0..phase.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    idx.truncate(quota);
    let fresh = phase.select(&idx);
    let existing: HashSet<u64> = next
        .per_phase
        .iter()
        .flat_map(|p| p.sample_ids.iter().copied())
        .collect();
    let dedup: Vec<usize> = (0..fresh.len())
        .filter(|&i| !existing.contains(&fresh.sample_ids[i]))
        .collect();
    next.per_phase.push(fresh.select(&dedup));
    Ok(next)
}
