//! Synthetic task generation with exactly known ground truth.
//!
//! An ID task is a vMF mixture on `S^(d-1)` whose samples are lifted into a
//! higher-dimensional input space by a fixed random orthogonal embedding plus
//! small isotropic noise. Because the generating mixture is returned alongside
//! the data, every score can be checked against the exact marginal density.
//!
//! Embedding file format (little-endian), magic `SSEM`:
//!
//! ```text
//! magic    4 bytes  "SSEM"
//! version  u32      1
//! flags    u32      bit 0 = has_labels
//! dim      u32
//! count    u64
//! coords   count * dim * f64
//! labels   count * u32          (only when bit 0 is set)
//! ```
//!
//! The byte layout is normative; round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{self, orthonormal_columns};
use crate::seeding::derive_seed;
use crate::vmf::{uniform_direction, UnitVector, VmfMixture};
use crate::{Error, Result};

const SSEM_MAGIC: [u8; 4] = *b"SSEM";
const SSEM_VERSION: u32 = 1;
const FLAG_HAS_LABELS: u32 = 1;

/// Unnormalized inputs `x` in the pre-embedding space, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInputSet {
    dim_in: usize,
    points: Vec<f64>,
    labels: Option<Vec<u32>>,
}

impl RawInputSet {
    pub fn new(dim_in: usize, points: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        if dim_in == 0 {
            return Err(Error::invalid("dim_in", "must be >= 1"));
        }
        if points.len() % dim_in != 0 {
            return Err(Error::invalid(
                "points",
                format!("length {} is not a multiple of dim_in {dim_in}", points.len()),
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("points", "non-finite value"));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() / dim_in {
                return Err(Error::DimensionMismatch {
                    expected: points.len() / dim_in,
                    got: l.len(),
                });
            }
        }
        Ok(Self { dim_in, points, labels })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim_in
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim_in..(i + 1) * self.dim_in]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim_in)
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_ssem(
            path.as_ref(),
            self.dim_in as u32,
            self.len() as u64,
            &self.points,
            self.labels.as_deref(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (dim, _, coords, labels) = read_ssem(path.as_ref())?;
        Self::new(dim as usize, coords, labels)
    }

    /// Load and require a specific input dimension.
    pub fn load_with_dim(path: impl AsRef<Path>, expected_dim: usize) -> Result<Self> {
        let set = Self::load(path)?;
        if set.dim_in != expected_dim {
            return Err(Error::DimensionMismatch {
                expected: expected_dim,
                got: set.dim_in,
            });
        }
        Ok(set)
    }
}

/// Labeled points on the unit sphere, e.g. encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    pub dim: usize,
    pub points: Vec<UnitVector>,
    pub labels: Vec<u32>,
    pub name: String,
}

impl LabeledEmbeddingSet {
    pub fn new(points: Vec<UnitVector>, labels: Vec<u32>, name: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("embedding set"));
        }
        if points.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: labels.len(),
            });
        }
        let dim = points[0].dim();
        if points.iter().any(|p| p.dim() != dim) {
            return Err(Error::invalid("points", "mixed dimensions"));
        }
        Ok(Self { dim, points, labels, name: name.into() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let coords: Vec<f64> = self
            .points
            .iter()
            .flat_map(|p| p.coords().iter().copied())
            .collect();
        write_ssem(
            path.as_ref(),
            self.dim as u32,
            self.points.len() as u64,
            &coords,
            Some(&self.labels),
        )
    }

    /// The file stores no name; the reconstructed set is named after the
    /// file stem. Points must be unit-norm within 1e-9.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dim, count, coords, labels) = read_ssem(path)?;
        let dim = dim as usize;
        if dim < 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: dim });
        }
        let labels = labels.ok_or_else(|| {
            Error::MalformedHeader("embedding set requires the labels flag".into())
        })?;
        let mut points = Vec::with_capacity(count as usize);
        for chunk in coords.chunks_exact(dim) {
            let n = linalg::norm(chunk);
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "points",
                    format!("stored vector has norm {n}, not unit within 1e-9"),
                ));
            }
            points.push(UnitVector::from_raw(chunk.to_vec()));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(points, labels, name)
    }
}

fn write_ssem(
    path: &Path,
    dim: u32,
    count: u64,
    coords: &[f64],
    labels: Option<&[u32]>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&SSEM_MAGIC)?;
    w.write_all(&SSEM_VERSION.to_le_bytes())?;
    let flags = if labels.is_some() { FLAG_HAS_LABELS } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for v in coords {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = labels {
        for l in labels {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_ssem(path: &Path) -> Result<(u32, u64, Vec<f64>, Option<Vec<u32>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if magic != SSEM_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {magic:?}, expected {SSEM_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r).map_err(|_| Error::MalformedHeader("missing version".into()))?;
    if version != SSEM_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let flags = read_u32(&mut r).map_err(|_| Error::MalformedHeader("missing flags".into()))?;
    if flags & !FLAG_HAS_LABELS != 0 {
        return Err(Error::MalformedHeader(format!("unknown flag bits {flags:#x}")));
    }
    let dim = read_u32(&mut r).map_err(|_| Error::MalformedHeader("missing dim".into()))?;
    if dim == 0 {
        return Err(Error::MalformedHeader("dim is zero".into()));
    }
    let count = read_u64(&mut r).map_err(|_| Error::MalformedHeader("missing count".into()))?;
    let values = (count as usize)
        .checked_mul(dim as usize)
        .ok_or_else(|| Error::MalformedHeader("count * dim overflows".into()))?;

    let mut coords = Vec::with_capacity(values);
    let mut buf = [0u8; 8];
    for i in 0..values {
        r.read_exact(&mut buf).map_err(|_| {
            Error::TruncatedPayload(format!("coordinate {i} of {values} missing"))
        })?;
        coords.push(f64::from_le_bytes(buf));
    }
    let labels = if flags & FLAG_HAS_LABELS != 0 {
        let mut labels = Vec::with_capacity(count as usize);
        let mut lbuf = [0u8; 4];
        for i in 0..count {
            r.read_exact(&mut lbuf)
                .map_err(|_| Error::TruncatedPayload(format!("label {i} of {count} missing")))?;
            labels.push(u32::from_le_bytes(lbuf));
        }
        Some(labels)
    } else {
        None
    };
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::MalformedHeader("trailing bytes after payload".into()));
    }
    Ok((dim, count, coords, labels))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// The fixed orthogonal embedding `x = Q z + sigma * eps` shared by an ID
/// task and its paired OOD sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftMap {
    columns: Vec<Vec<f64>>, // `dim` orthonormal columns of length `dim_in`
    sigma: f64,
}

impl LiftMap {
    pub fn random(dim_in: usize, dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if dim_in < dim {
            return Err(Error::invalid("dim_in", "must be >= sphere dimension"));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid("sigma_lift", "must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            columns: orthonormal_columns(dim_in, dim, &mut rng),
            sigma,
        })
    }

    pub(crate) fn from_parts(columns: Vec<Vec<f64>>, sigma: f64) -> Self {
        Self { columns, sigma }
    }

    pub fn dim_in(&self) -> usize {
        self.columns[0].len()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Lift a sphere point into the input space with fresh isotropic noise.
    pub fn lift<R: Rng>(&self, z: &[f64], rng: &mut R) -> Vec<f64> {
        let mut x = vec![0.0; self.dim_in()];
        for (col, zi) in self.columns.iter().zip(z) {
            for (xi, ci) in x.iter_mut().zip(col) {
                *xi += zi * ci;
            }
        }
        if self.sigma > 0.0 {
            for xi in x.iter_mut() {
                let eps: f64 = StandardNormal.sample(rng);
                *xi += self.sigma * eps;
            }
        }
        x
    }

    /// Project an input back onto the sphere coordinates (transpose of the
    /// orthonormal embedding).
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|col| linalg::dot(col, x)).collect()
    }
}

/// Parameters of a synthetic ID task. Defaults train in seconds while
/// leaving clear ID/OOD separation headroom.
#[derive(Debug, Clone)]
pub struct IdTaskConfig {
    pub dim_in: usize,
    pub dim: usize,
    pub classes: usize,
    pub kappa: f64,
    pub priors: Vec<f64>,
    /// Total sample count, split 80/20 into train/test.
    pub n_samples: usize,
    pub sigma_lift: f64,
    pub seed: u64,
}

impl Default for IdTaskConfig {
    fn default() -> Self {
        Self {
            dim_in: 64,
            dim: 16,
            classes: 10,
            kappa: 30.0,
            priors: VmfMixture::uniform_priors(10),
            n_samples: 10_000,
            sigma_lift: 0.05,
            seed: 0,
        }
    }
}

/// A generated ID task: lifted train/test splits plus the generating truth.
#[derive(Debug, Clone)]
pub struct IdTask {
    pub train: RawInputSet,
    pub test: RawInputSet,
    pub truth: VmfMixture,
    pub lift: LiftMap,
}

/// Generate a labeled ID task from a well-separated vMF mixture.
pub fn make_id_task(cfg: &IdTaskConfig) -> Result<IdTask> {
    if cfg.dim < 2 {
        return Err(Error::invalid("dim", "sphere dimension must be >= 2"));
    }
    if cfg.dim_in < cfg.dim {
        return Err(Error::invalid("dim_in", "must be >= sphere dimension"));
    }
    if cfg.classes < 2 {
        return Err(Error::invalid("classes", "must be >= 2"));
    }
    if !(cfg.kappa > 0.0) {
        return Err(Error::invalid("kappa", "must be > 0"));
    }
    if cfg.n_samples < 2 {
        return Err(Error::invalid("n_samples", "need at least 2 samples to split"));
    }

    let mut placement_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let means = place_separated_means(cfg.dim, cfg.classes, &mut placement_rng)?;
    // Prior validation (including the sum-to-1 check) happens here.
    let truth = VmfMixture::from_means(means, cfg.kappa, cfg.priors.clone())?;

    let samples = truth.sample(cfg.n_samples, derive_seed(cfg.seed, 1))?;
    let lift = LiftMap::random(cfg.dim_in, cfg.dim, cfg.sigma_lift, derive_seed(cfg.seed, 2))?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut points = Vec::with_capacity(cfg.n_samples * cfg.dim_in);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    for (z, label) in &samples {
        points.extend_from_slice(&lift.lift(z.coords(), &mut noise_rng));
        labels.push(*label);
    }

    let n_train = cfg.n_samples * 8 / 10;
    let n_train = n_train.max(1).min(cfg.n_samples - 1);
    let split = n_train * cfg.dim_in;
    let train = RawInputSet::new(
        cfg.dim_in,
        points[..split].to_vec(),
        Some(labels[..n_train].to_vec()),
    )?;
    let test = RawInputSet::new(
        cfg.dim_in,
        points[split..].to_vec(),
        Some(labels[n_train..].to_vec()),
    )?;
    Ok(IdTask { train, test, truth, lift })
}

/// Uniform draws repelled by pairwise-cosine gradient descent, approximating
/// a simplex arrangement so no two classes start near-duplicate.
fn place_separated_means<R: Rng>(dim: usize, classes: usize, rng: &mut R) -> Result<Vec<UnitVector>> {
    const STEPS: usize = 50;
    const STEP_SIZE: f64 = 0.1;
    const TEMPERATURE: f64 = 0.3;

    let mut means: Vec<Vec<f64>> = (0..classes)
        .map(|_| Ok(uniform_direction(dim, rng)?.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..STEPS {
        let grads: Vec<Vec<f64>> = (0..classes)
            .map(|i| {
                let mut g = vec![0.0; dim];
                for j in 0..classes {
                    if i == j {
                        continue;
                    }
                    let w = (linalg::dot(&means[i], &means[j]) / TEMPERATURE).exp();
                    for (gi, mj) in g.iter_mut().zip(&means[j]) {
                        *gi += w * mj;
                    }
                }
                g
            })
            .collect();
        for (mu, g) in means.iter_mut().zip(grads) {
            let radial = linalg::dot(mu, &g);
            for (mi, gi) in mu.iter_mut().zip(&g) {
                *mi -= STEP_SIZE * (gi - radial * *mi);
            }
            linalg::normalize_in_place(mu)?;
        }
    }
    means.into_iter().map(UnitVector::new).collect()
}

/// The family of synthetic OOD sets paired with an ID task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OodKind {
    /// Uniform draws on the sphere; the far-OOD analogue.
    UniformSphere,
    /// Means rotated toward their nearest neighbour; the near-OOD analogue.
    /// `None` rotates by half the minimum inter-mean angle.
    ShiftedMixture { angle: Option<f64> },
    /// The reference means at a quarter of the concentration.
    LowKappa,
}

impl OodKind {
    pub fn name(&self) -> &'static str {
        match self {
            OodKind::UniformSphere => "uniform_sphere",
            OodKind::ShiftedMixture { .. } => "shifted_mixture",
            OodKind::LowKappa => "low_kappa",
        }
    }
}

/// Generate an OOD set lifted through the same embedding as the ID task.
pub fn make_ood_set(
    kind: OodKind,
    reference: &VmfMixture,
    lift: &LiftMap,
    n: usize,
    seed: u64,
) -> Result<RawInputSet> {
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be >= 1"));
    }
    if lift.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            got: lift.dim(),
        });
    }
    let sphere_points: Vec<UnitVector> = match kind {
        OodKind::UniformSphere => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10));
            (0..n)
                .map(|_| uniform_direction(reference.dim(), &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
        OodKind::ShiftedMixture { angle } => {
            let theta = angle.unwrap_or_else(|| 0.5 * min_inter_mean_angle(reference));
            let means = shifted_means(reference, theta)?;
            let shifted =
                VmfMixture::from_means(means, reference.kappa(), reference.priors().to_vec())?;
            shifted
                .sample(n, derive_seed(seed, 11))?
                .into_iter()
                .map(|(z, _)| z)
                .collect()
        }
        OodKind::LowKappa => {
            let means: Vec<UnitVector> = reference.means().cloned().collect();
            let relaxed =
                VmfMixture::from_means(means, reference.kappa() / 4.0, reference.priors().to_vec())?;
            relaxed
                .sample(n, derive_seed(seed, 12))?
                .into_iter()
                .map(|(z, _)| z)
                .collect()
        }
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13));
    let mut points = Vec::with_capacity(n * lift.dim_in());
    for z in &sphere_points {
        points.extend_from_slice(&lift.lift(z.coords(), &mut noise_rng));
    }
    RawInputSet::new(lift.dim_in(), points, None)
}

/// Smallest pairwise angle between mixture means, in radians.
pub fn min_inter_mean_angle(mixture: &VmfMixture) -> f64 {
    let means: Vec<&UnitVector> = mixture.means().collect();
    let mut min_angle = std::f64::consts::PI;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let angle = means[i].dot(means[j]).clamp(-1.0, 1.0).acos();
            min_angle = min_angle.min(angle);
        }
    }
    min_angle
}

fn shifted_means(reference: &VmfMixture, theta: f64) -> Result<Vec<UnitVector>> {
    let means: Vec<&UnitVector> = reference.means().collect();
    means
        .iter()
        .enumerate()
        .map(|(i, mu)| {
            // Rotate toward the nearest other mean.
            let mut best = usize::MAX;
            let mut best_cos = -2.0;
            for (j, other) in means.iter().enumerate() {
                if j == i {
                    continue;
                }
                let c = mu.dot(other);
                if c > best_cos {
                    best_cos = c;
                    best = j;
                }
            }
            rotate_toward(mu, means[best], theta)
        })
        .collect()
}

/// Rotate `u` by `theta` radians in the plane spanned by `u` and `v`.
fn rotate_toward(u: &UnitVector, v: &UnitVector, theta: f64) -> Result<UnitVector> {
    let cos_uv = u.dot(v);
    let mut tangent: Vec<f64> = v
        .coords()
        .iter()
        .zip(u.coords())
        .map(|(vi, ui)| vi - cos_uv * ui)
        .collect();
    let n = linalg::norm(&tangent);
    if n < 1e-12 {
        // Collinear means; nothing to rotate toward.
        return Ok(u.clone());
    }
    for t in tangent.iter_mut() {
        *t /= n;
    }
    let coords: Vec<f64> = u
        .coords()
        .iter()
        .zip(&tangent)
        .map(|(ui, ti)| theta.cos() * ui + theta.sin() * ti)
        .collect();
    UnitVector::normalize(coords)
}

/// Multiplicative speckle noise `x + x .* eps`, `eps ~ N(0, sigma^2)`,
/// used as the synthetic validation-OOD set for temperature selection.
pub fn speckle_corrupt(set: &RawInputSet, sigma: f64, seed: u64) -> Result<RawInputSet> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("sigma", "must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<f64> = set
        .points
        .iter()
        .map(|x| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            x + x * sigma * eps
        })
        .collect();
    RawInputSet::new(set.dim_in, points, set.labels.clone())
}

const TRUTH_MAGIC: &str = "sstruth/1";

/// Write the ground-truth mixture and lift as a plain-text sidecar.
pub fn save_truth(mixture: &VmfMixture, lift: &LiftMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{TRUTH_MAGIC}")?;
    writeln!(w, "dim {}", mixture.dim())?;
    writeln!(w, "dim_in {}", lift.dim_in())?;
    writeln!(w, "classes {}", mixture.num_components())?;
    writeln!(w, "kappa {}", mixture.kappa())?;
    writeln!(w, "sigma_lift {}", lift.sigma())?;
    writeln!(w, "priors {}", join_floats(mixture.priors()))?;
    for mu in mixture.means() {
        writeln!(w, "mean {}", join_floats(mu.coords()))?;
    }
    for col in lift.columns() {
        writeln!(w, "lift_col {}", join_floats(col))?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a truth sidecar written by [`save_truth`].
pub fn load_truth(path: impl AsRef<Path>) -> Result<(VmfMixture, LiftMap)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRUTH_MAGIC) {
        return Err(Error::MalformedHeader(format!("expected `{TRUTH_MAGIC}` first line")));
    }
    let mut dim = None;
    let mut dim_in = None;
    let mut classes = None;
    let mut kappa = None;
    let mut sigma = None;
    let mut priors: Option<Vec<f64>> = None;
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::MalformedHeader(format!("bad sidecar line `{line}`")))?;
        match key {
            "dim" => dim = Some(parse_usize(rest)?),
            "dim_in" => dim_in = Some(parse_usize(rest)?),
            "classes" => classes = Some(parse_usize(rest)?),
            "kappa" => kappa = Some(parse_f64(rest)?),
            "sigma_lift" => sigma = Some(parse_f64(rest)?),
            "priors" => priors = Some(parse_floats(rest)?),
            "mean" => means.push(parse_floats(rest)?),
            "lift_col" => cols.push(parse_floats(rest)?),
            _ => return Err(Error::MalformedHeader(format!("unknown sidecar key `{key}`"))),
        }
    }
    let dim = dim.ok_or_else(|| Error::TruncatedPayload("sidecar missing dim".into()))?;
    let dim_in = dim_in.ok_or_else(|| Error::TruncatedPayload("sidecar missing dim_in".into()))?;
    let classes = classes.ok_or_else(|| Error::TruncatedPayload("sidecar missing classes".into()))?;
    let kappa = kappa.ok_or_else(|| Error::TruncatedPayload("sidecar missing kappa".into()))?;
    let sigma = sigma.ok_or_else(|| Error::TruncatedPayload("sidecar missing sigma_lift".into()))?;
    let priors = priors.ok_or_else(|| Error::TruncatedPayload("sidecar missing priors".into()))?;
    if means.len() != classes || cols.len() != dim {
        return Err(Error::TruncatedPayload(format!(
            "sidecar has {} means and {} lift columns, expected {classes} and {dim}",
            means.len(),
            cols.len()
        )));
    }
    if means.iter().any(|m| m.len() != dim) || cols.iter().any(|c| c.len() != dim_in) {
        return Err(Error::MalformedHeader("sidecar vector length mismatch".into()));
    }
    let means = means
        .into_iter()
        .map(UnitVector::new)
        .collect::<Result<Vec<_>>>()?;
    let mixture = VmfMixture::from_means(means, kappa, priors)?;
    Ok((mixture, LiftMap::from_parts(cols, sigma)))
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad float `{s}`")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad integer `{s}`")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_f64).collect()
}
