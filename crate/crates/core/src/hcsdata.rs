//! The batch/plate/well/perturbation data model, the on-disk dataset
//! format, and a synthetic high-content-screening generator.
//!
//! A dataset directory looks like:
//!
//! ```text
//! manifest.csv                       batch_id,plate_id,well_id,perturbation_id,kind,image_path,C,H,W
//! images/<batch>/<plate>/<well>.ndt  multi-channel well images (NDT1 tensors)
//! truth/relationships.csv            perturbation_a,perturbation_b
//! truth/compound_targets.csv         compound_id,gene_id
//! ```
//!
//! The generator plants a known phenotype-cluster structure: perturbations
//! in the same cluster render related blob patterns, per-batch gain/offset
//! nuisances confound raw intensities, and every perturbation's wells are
//! spread round-robin over batches and plates so that cross-well pairs
//! usually cross batches.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::ndtensor::{Tensor, read_ndt1, write_ndt1};
use crate::streams::stream_rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("duplicate well key ({batch},{plate},{well})")]
    DuplicateWell { batch: String, plate: String, well: String },
    #[error("missing image file: {0}")]
    MissingImage(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Tensor(#[from] crate::ndtensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PerturbationKind {
    Compound,
    GeneKnockout,
    Control,
}

impl PerturbationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Compound => "compound",
            PerturbationKind::GeneKnockout => "gene-knockout",
            PerturbationKind::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "compound" => Some(PerturbationKind::Compound),
            "gene-knockout" => Some(PerturbationKind::GeneKnockout),
            "control" => Some(PerturbationKind::Control),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationId {
    pub id: String,
    pub kind: PerturbationKind,
}

#[derive(Debug, Clone)]
pub struct WellRecord {
    pub batch_id: String,
    pub plate_id: String,
    pub well_id: String,
    pub perturbation: PerturbationId,
    /// Path relative to the dataset root, slash-separated.
    pub image_path: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl WellRecord {
    pub fn well_key(&self) -> (String, String, String) {
        (self.batch_id.clone(), self.plate_id.clone(), self.well_id.clone())
    }
}

/// Per-perturbation index entry: which records belong to it.
#[derive(Debug, Clone)]
pub struct PerturbationEntry {
    pub kind: PerturbationKind,
    pub record_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<WellRecord>,
    index: BTreeMap<String, PerturbationEntry>,
}

impl DatasetManifest {
    pub fn from_records(root: PathBuf, records: Vec<WellRecord>) -> Result<Self> {
        let mut keys = BTreeSet::new();
        let mut index: BTreeMap<String, PerturbationEntry> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !keys.insert(r.well_key()) {
                return Err(DataError::DuplicateWell {
                    batch: r.batch_id.clone(),
                    plate: r.plate_id.clone(),
                    well: r.well_id.clone(),
                });
            }
            let entry = index.entry(r.perturbation.id.clone()).or_insert_with(|| PerturbationEntry {
                kind: r.perturbation.kind,
                record_indices: Vec::new(),
            });
            if entry.kind != r.perturbation.kind {
                return Err(DataError::Integrity(format!(
                    "perturbation {} appears with two kinds",
                    r.perturbation.id
                )));
            }
            entry.record_indices.push(i);
        }
        Ok(DatasetManifest { root, records, index })
    }

    /// Perturbation ids in deterministic (lexicographic) order.
    pub fn perturbation_ids(&self) -> impl Iterator<Item = &String> {
        self.index.keys()
    }

    pub fn perturbation(&self, id: &str) -> Option<&PerturbationEntry> {
        self.index.get(id)
    }

    /// Number of wells under a perturbation (its M_i).
    pub fn well_count(&self, id: &str) -> usize {
        self.index.get(id).map_or(0, |e| e.record_indices.len())
    }

    pub fn n_perturbations(&self) -> usize {
        self.index.len()
    }

    pub fn load_well_image(&self, record: &WellRecord) -> Result<Tensor<f32>> {
        let path = self.root.join(&record.image_path);
        let t = read_ndt1(&path)?;
        let expect = [record.channels, record.height, record.width];
        if t.shape() != expect {
            return Err(DataError::Integrity(format!(
                "{}: image header {:?} does not match record {:?}",
                record.image_path,
                t.shape(),
                expect
            )));
        }
        if !t.is_finite() {
            return Err(DataError::Integrity(format!("{}: non-finite pixels", record.image_path)));
        }
        Ok(t)
    }
}

/// Loads and indexes `manifest.csv`; the dataset root is its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != MANIFEST_HEADER {
        return Err(DataError::Parse {
            path: display,
            line: 1,
            msg: format!("bad header {header:?}, expected {MANIFEST_HEADER:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(DataError::Parse {
                path: display,
                line: lineno,
                msg: format!("expected 9 columns, got {}", fields.len()),
            });
        }
        let kind = PerturbationKind::parse(fields[4]).ok_or_else(|| DataError::Parse {
            path: display.clone(),
            line: lineno,
            msg: format!("unknown perturbation kind {:?}", fields[4]),
        })?;
        let dim = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| DataError::Parse {
                    path: display.clone(),
                    line: lineno,
                    msg: format!("bad {what} {s:?}"),
                })
        };
        let record = WellRecord {
            batch_id: fields[0].to_string(),
            plate_id: fields[1].to_string(),
            well_id: fields[2].to_string(),
            perturbation: PerturbationId { id: fields[3].to_string(), kind },
            image_path: fields[5].to_string(),
            channels: dim(fields[6], "channel count")?,
            height: dim(fields[7], "height")?,
            width: dim(fields[8], "width")?,
        };
        if !root.join(&record.image_path).is_file() {
            return Err(DataError::MissingImage(record.image_path));
        }
        records.push(record);
    }
    DatasetManifest::from_records(root, records)
}

pub const MANIFEST_HEADER: &str = "batch_id,plate_id,well_id,perturbation_id,kind,image_path,C,H,W";

// ── synthetic generation ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_perturbations: usize,
    pub n_clusters: usize,
    pub wells_per_perturbation: usize,
    pub n_batches: usize,
    pub plates_per_batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch_gain_std: f32,
    pub batch_offset_std: f32,
    pub pixel_noise_std: f32,
    /// Spread of per-perturbation phenotype around its cluster center.
    pub phenotype_jitter: f32,
    /// How many of the clustered perturbations are compounds (the rest are
    /// gene knockouts); compounds target the genes of their cluster.
    pub n_compounds: usize,
    /// Extra unclustered control perturbations appended after the N
    /// clustered ones.
    pub n_controls: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_perturbations: 40,
            n_clusters: 4,
            wells_per_perturbation: 6,
            n_batches: 3,
            plates_per_batch: 2,
            channels: 5,
            height: 64,
            width: 64,
            batch_gain_std: 0.35,
            batch_offset_std: 0.12,
            pixel_noise_std: 0.04,
            phenotype_jitter: 0.12,
            n_compounds: 8,
            n_controls: 0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(DataError::Config(msg.to_string())) };
        c(self.n_clusters >= 1, "n_clusters must be >= 1")?;
        c(self.n_perturbations >= self.n_clusters, "n_perturbations must be >= n_clusters")?;
        c(self.wells_per_perturbation >= 1, "wells_per_perturbation must be >= 1")?;
        c(self.n_batches >= 1 && self.plates_per_batch >= 1, "need at least one batch and plate")?;
        c(self.channels >= 1 && self.height >= 8 && self.width >= 8, "image dims too small")?;
        c(self.batch_gain_std >= 0.0, "batch_gain_std must be >= 0")?;
        c(self.batch_offset_std >= 0.0, "batch_offset_std must be >= 0")?;
        c(self.pixel_noise_std >= 0.0, "pixel_noise_std must be >= 0")?;
        c(self.phenotype_jitter >= 0.0, "phenotype_jitter must be >= 0")?;
        c(
            self.n_compounds + self.n_clusters <= self.n_perturbations,
            "need at least one gene per cluster after assigning compounds",
        )?;
        Ok(())
    }
}

/// Planted ground truth: cluster assignments, same-cluster relationship
/// pairs, and the compound → target-gene map.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthGraph {
    /// Cluster per perturbation id; controls carry no cluster.
    pub cluster: BTreeMap<String, Option<usize>>,
    /// Unordered same-cluster pairs, stored with the smaller id first.
    pub pairs: BTreeSet<(String, String)>,
    pub compound_targets: BTreeMap<String, BTreeSet<String>>,
}

const PHENOTYPE_DIM: usize = 12;
const MAX_BLOBS: usize = 8;

struct Phenotype {
    /// Per channel: (blob count, radius, intensity).
    blobs: Vec<(usize, f32, f32)>,
}

/// Maps a phenotype vector to per-channel blob parameters through fixed
/// random projections (count 2..=7, radius 3..9 px, intensity 0.35..0.9).
fn derive_blob_params(phi: &[f32], basis: &[Vec<f32>]) -> Phenotype {
    let channels = basis.len() / 3;
    let sigmoid = |x: f32| 1.0 / (1.0 + (-x).exp());
    let project = |v: &[f32]| -> f32 {
        let dot: f32 = v.iter().zip(phi).map(|(a, b)| a * b).sum();
        dot / (PHENOTYPE_DIM as f32).sqrt()
    };
    let mut blobs = Vec::with_capacity(channels);
    for c in 0..channels {
        let count = 2 + (6.0 * sigmoid(project(&basis[3 * c]))) as usize;
        let radius = 3.0 + 6.0 * sigmoid(project(&basis[3 * c + 1]));
        let intensity = 0.35 + 0.55 * sigmoid(project(&basis[3 * c + 2]));
        blobs.push((count.min(MAX_BLOBS), radius, intensity));
    }
    Phenotype { blobs }
}

fn render_well(cfg: &SyntheticConfig, phenotype: &Phenotype, centers: &[(f32, f32)]) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0f32; cfg.channels * h * w];
    for (c, &(count, radius, intensity)) in phenotype.blobs.iter().enumerate() {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        let inv_2r2 = 1.0 / (2.0 * radius * radius);
        let cutoff2 = (3.5 * radius) * (3.5 * radius);
        for &(cy, cx) in &centers[..count] {
            let y0 = (cy - 3.5 * radius).floor().max(0.0) as usize;
            let y1 = (cy + 3.5 * radius).ceil().min(h as f32 - 1.0) as usize;
            let x0 = (cx - 3.5 * radius).floor().max(0.0) as usize;
            let x1 = (cx + 3.5 * radius).ceil().min(w as f32 - 1.0) as usize;
            for y in y0..=y1 {
                let dy = y as f32 - cy;
                for x in x0..=x1 {
                    let dx = x as f32 - cx;
                    let d2 = dy * dy + dx * dx;
                    if d2 <= cutoff2 {
                        plane[y * w + x] += intensity * (-d2 * inv_2r2).exp();
                    }
                }
            }
        }
    }
    img
}

struct PerturbationSpec {
    id: String,
    kind: PerturbationKind,
    cluster: Option<usize>,
    phi: Vec<f32>,
}

fn plan_perturbations(cfg: &SyntheticConfig) -> Vec<PerturbationSpec> {
    let k = cfg.n_clusters;
    // Cluster phenotype centers.
    let centers: Vec<Vec<f32>> = (0..k)
        .map(|c| {
            let mut rng = stream_rng(cfg.seed, "generate.phenotype", &[c as u64]);
            (0..PHENOTYPE_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
        })
        .collect();
    // Within each cluster the highest member ranks become compounds.
    let mut compounds_in_cluster = vec![cfg.n_compounds / k; k];
    for (c, slot) in compounds_in_cluster.iter_mut().enumerate() {
        if c < cfg.n_compounds % k {
            *slot += 1;
        }
    }
    let cluster_size = |c: usize| (cfg.n_perturbations + k - 1 - c) / k;

    let mut specs = Vec::with_capacity(cfg.n_perturbations + cfg.n_controls);
    for i in 0..cfg.n_perturbations {
        let cluster = i % k;
        let rank = i / k;
        let kind = if rank >= cluster_size(cluster) - compounds_in_cluster[cluster] {
            PerturbationKind::Compound
        } else {
            PerturbationKind::GeneKnockout
        };
        let prefix = match kind {
            PerturbationKind::Compound => "cmpd",
            _ => "gene",
        };
        let mut rng = stream_rng(cfg.seed, "generate.pert-jitter", &[i as u64]);
        let phi: Vec<f32> = centers[cluster]
            .iter()
            .map(|&x| x + cfg.phenotype_jitter * rng.sample::<f32, _>(StandardNormal))
            .collect();
        specs.push(PerturbationSpec {
            id: format!("{prefix}_{i:03}"),
            kind,
            cluster: Some(cluster),
            phi,
        });
    }
    for j in 0..cfg.n_controls {
        specs.push(PerturbationSpec {
            id: format!("ctrl_{j:03}"),
            kind: PerturbationKind::Control,
            cluster: None,
            phi: vec![0.0; PHENOTYPE_DIM],
        });
    }
    specs
}

fn build_truth(specs: &[PerturbationSpec]) -> GroundTruthGraph {
    let mut truth = GroundTruthGraph::default();
    for s in specs {
        truth.cluster.insert(s.id.clone(), s.cluster);
    }
    for (i, a) in specs.iter().enumerate() {
        for b in specs.iter().skip(i + 1) {
            if a.cluster.is_some() && a.cluster == b.cluster {
                let (x, y) = if a.id < b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
                truth.pairs.insert((x.clone(), y.clone()));
            }
        }
    }
    for s in specs.iter().filter(|s| s.kind == PerturbationKind::Compound) {
        let targets: BTreeSet<String> = specs
            .iter()
            .filter(|g| g.kind == PerturbationKind::GeneKnockout && g.cluster == s.cluster)
            .map(|g| g.id.clone())
            .collect();
        truth.compound_targets.insert(s.id.clone(), targets);
    }
    truth
}

/// Generates a dataset directory and its ground truth.
///
/// Pixel model per channel c: `x = g_b * render_c(phi_p, xi_w) + o_b + eps`,
/// clamped to `[0, 1]`. `g_b = exp(batch_gain_std * n)` and
/// `o_b = batch_offset_std * n` are per-batch scalars shared by every well
/// of batch b; `eps` is i.i.d. per-pixel Gaussian noise.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<(DatasetManifest, GroundTruthGraph)> {
    cfg.validate()?;
    let specs = plan_perturbations(cfg);
    let truth = build_truth(&specs);

    // Per-batch nuisances: one stream per batch, gain draw then offset draw.
    let mut gains = Vec::with_capacity(cfg.n_batches);
    let mut offsets = Vec::with_capacity(cfg.n_batches);
    for b in 0..cfg.n_batches {
        let mut rng = stream_rng(cfg.seed, "generate.batch-nuisance", &[b as u64]);
        let g: f32 = rng.sample(StandardNormal);
        let o: f32 = rng.sample(StandardNormal);
        gains.push((cfg.batch_gain_std * g).exp());
        offsets.push(cfg.batch_offset_std * o);
    }

    // Rendering basis shared by the whole dataset.
    let basis: Vec<Vec<f32>> = (0..cfg.channels * 3)
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, "generate.render-basis", &[j as u64]);
            (0..PHENOTYPE_DIM).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
        })
        .collect();

    std::fs::create_dir_all(out_dir.join("truth")).map_err(|e| io_err(out_dir, e))?;

    let mut records = Vec::new();
    for (pi, spec) in specs.iter().enumerate() {
        let phenotype = derive_blob_params(&spec.phi, &basis);
        for j in 0..cfg.wells_per_perturbation {
            // Round-robin spread over batches, then plates.
            let batch = j % cfg.n_batches;
            let plate = (j / cfg.n_batches) % cfg.plates_per_batch;
            let batch_id = format!("batch_{batch:02}");
            let plate_id = format!("plate_{plate:02}");
            let well_id = format!("{}_r{j:02}", spec.id);
            let rel_path = format!("images/{batch_id}/{plate_id}/{well_id}.ndt");

            let mut layout = stream_rng(cfg.seed, "generate.well-layout", &[pi as u64, j as u64]);
            let centers: Vec<(f32, f32)> = (0..MAX_BLOBS)
                .map(|_| {
                    let y: f32 = layout.gen_range(0.0..cfg.height as f32);
                    let x: f32 = layout.gen_range(0.0..cfg.width as f32);
                    (y, x)
                })
                .collect();
            let mut pixels = render_well(cfg, &phenotype, &centers);
            let mut noise = stream_rng(cfg.seed, "generate.pixel-noise", &[pi as u64, j as u64]);
            let (g, o) = (gains[batch], offsets[batch]);
            for p in pixels.iter_mut() {
                let eps: f32 = noise.sample(StandardNormal);
                *p = (g * *p + o + cfg.pixel_noise_std * eps).clamp(0.0, 1.0);
            }

            let img = Tensor::from_vec(vec![cfg.channels, cfg.height, cfg.width], pixels)?;
            let abs = out_dir.join(&rel_path);
            std::fs::create_dir_all(abs.parent().unwrap()).map_err(|e| io_err(&abs, e))?;
            write_ndt1(&abs, &img)?;

            records.push(WellRecord {
                batch_id,
                plate_id,
                well_id,
                perturbation: PerturbationId { id: spec.id.clone(), kind: spec.kind },
                image_path: rel_path,
                channels: cfg.channels,
                height: cfg.height,
                width: cfg.width,
            });
        }
    }

    write_manifest(&out_dir.join("manifest.csv"), &records)?;
    write_relationships(&out_dir.join("truth/relationships.csv"), &truth)?;
    write_compound_targets(&out_dir.join("truth/compound_targets.csv"), &truth)?;

    let manifest = DatasetManifest::from_records(out_dir.to_path_buf(), records)?;
    Ok((manifest, truth))
}

fn write_manifest(path: &Path, records: &[WellRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(f, "{MANIFEST_HEADER}").map_err(|e| io_err(path, e))?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.batch_id,
            r.plate_id,
            r.well_id,
            r.perturbation.id,
            r.perturbation.kind.as_str(),
            r.image_path,
            r.channels,
            r.height,
            r.width
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn write_relationships(path: &Path, truth: &GroundTruthGraph) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(f, "perturbation_a,perturbation_b").map_err(|e| io_err(path, e))?;
    for (a, b) in &truth.pairs {
        writeln!(f, "{a},{b}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn write_compound_targets(path: &Path, truth: &GroundTruthGraph) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(f, "compound_id,gene_id").map_err(|e| io_err(path, e))?;
    for (compound, genes) in &truth.compound_targets {
        for gene in genes {
            writeln!(f, "{compound},{gene}").map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_perturbations: 8,
            n_clusters: 2,
            wells_per_perturbation: 3,
            n_batches: 2,
            plates_per_batch: 2,
            channels: 2,
            height: 16,
            width: 16,
            n_compounds: 2,
            n_controls: 0,
            seed: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn default_truth_has_180_pairs() {
        let specs = plan_perturbations(&SyntheticConfig::default());
        let truth = build_truth(&specs);
        // 4 clusters of 10 members each.
        assert_eq!(truth.pairs.len(), 4 * (10 * 9) / 2);
    }

    #[test]
    fn truth_pairs_have_no_self_pairs_and_are_ordered() {
        let specs = plan_perturbations(&tiny_cfg());
        let truth = build_truth(&specs);
        assert!(!truth.pairs.is_empty());
        for (a, b) in &truth.pairs {
            assert!(a < b);
        }
    }

    #[test]
    fn compounds_target_their_cluster_genes() {
        let specs = plan_perturbations(&SyntheticConfig::default());
        let truth = build_truth(&specs);
        assert_eq!(truth.compound_targets.len(), 8);
        for targets in truth.compound_targets.values() {
            assert_eq!(targets.len(), 8); // 10 per cluster - 2 compounds
            assert!(targets.iter().all(|g| g.starts_with("gene_")));
        }
    }

    #[test]
    fn generate_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let (manifest, _) = generate_synthetic(&cfg, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 8 * 3);
        let loaded = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.records.len(), manifest.records.len());
        let ids: Vec<String> = loaded.perturbation_ids().cloned().collect();
        for id in &ids {
            assert_eq!(loaded.well_count(id), 3);
        }
        let img = loaded.load_well_image(&loaded.records[0]).unwrap();
        assert_eq!(img.shape(), &[2, 16, 16]);
        assert!(img.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = tiny_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_synthetic(&cfg, dir_a.path()).unwrap();
        generate_synthetic(&cfg, dir_b.path()).unwrap();
        let mut paths = walk_files(dir_a.path());
        paths.sort();
        assert!(!paths.is_empty());
        for rel in paths {
            let a = std::fs::read(dir_a.path().join(&rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(&rel)).unwrap();
            assert_eq!(a, b, "file {rel} differs between runs");
        }
    }

    fn walk_files(root: &Path) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_string_lossy().to_string());
                }
            }
        }
        out
    }

    #[test]
    fn wells_span_multiple_batches() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let ids: Vec<String> = manifest.perturbation_ids().cloned().collect();
        for id in &ids {
            let batches: BTreeSet<String> = manifest
                .perturbation(id)
                .unwrap()
                .record_indices
                .iter()
                .map(|&i| manifest.records[i].batch_id.clone())
                .collect();
            assert!(batches.len() >= 2, "{id} only spans {batches:?}");
        }
    }

    #[test]
    fn missing_image_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let manifest = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        let victim = manifest.records[5].image_path.clone();
        std::fs::remove_file(dir.path().join(&victim)).unwrap();
        let err = load_manifest(&dir.path().join("manifest.csv")).unwrap_err();
        assert!(err.to_string().contains(&victim), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let mpath = dir.path().join("manifest.csv");
        let mut text = std::fs::read_to_string(&mpath).unwrap();
        text.push_str("only,three,columns\n");
        std::fs::write(&mpath, text).unwrap();
        let err = load_manifest(&mpath).unwrap_err();
        let msg = err.to_string();
        // 24 data rows + header, appended row is line 26.
        assert!(msg.contains(":26:"), "expected line number in {msg}");
    }

    #[test]
    fn header_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _) = generate_synthetic(&tiny_cfg(), dir.path()).unwrap();
        let mut record = manifest.records[0].clone();
        record.channels = 5; // file actually has 2
        let err = manifest.load_well_image(&record).unwrap_err();
        assert!(matches!(err, DataError::Integrity(_)), "{err}");
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.csv");
        std::fs::write(&mpath, format!("{MANIFEST_HEADER}\n")).unwrap();
        let m = load_manifest(&mpath).unwrap();
        assert_eq!(m.n_perturbations(), 0);
    }

    #[test]
    fn nuisance_free_wells_differ_only_by_layout() {
        // With all nuisance stds at zero a well's pixels must not depend on
        // which batch it lands in: regenerating with a different batch count
        // reassigns batches but yields bit-identical images. Wells still
        // differ from each other through per-well layout randomness.
        let base = SyntheticConfig {
            batch_gain_std: 0.0,
            batch_offset_std: 0.0,
            pixel_noise_std: 0.0,
            ..tiny_cfg()
        };
        let moved = SyntheticConfig { n_batches: 1, ..base.clone() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (man_a, _) = generate_synthetic(&base, dir_a.path()).unwrap();
        let (man_b, _) = generate_synthetic(&moved, dir_b.path()).unwrap();
        for (ra, rb) in man_a.records.iter().zip(&man_b.records) {
            assert_eq!(ra.well_id, rb.well_id);
            let ia = man_a.load_well_image(ra).unwrap();
            let ib = man_b.load_well_image(rb).unwrap();
            assert_eq!(ia.data(), ib.data(), "well {} depends on batch assignment", ra.well_id);
        }
        // Layout randomness still distinguishes sibling wells.
        let entry = man_a.perturbation("gene_000").unwrap();
        let i0 = man_a.load_well_image(&man_a.records[entry.record_indices[0]]).unwrap();
        let i1 = man_a.load_well_image(&man_a.records[entry.record_indices[1]]).unwrap();
        assert_ne!(i0.data(), i1.data());
    }

    #[test]
    fn batch_gain_raises_between_batch_variance_of_controls() {
        // Phenotype signal disabled (single cluster): raising batch_gain_std
        // must strictly raise between-batch variance of control-well means.
        for seed in 0..5u64 {
            let mut variances = Vec::new();
            for &gain in &[0.0f32, 0.3, 0.6] {
                let cfg = SyntheticConfig {
                    n_perturbations: 4,
                    n_clusters: 1,
                    n_compounds: 0,
                    n_controls: 3,
                    wells_per_perturbation: 6,
                    n_batches: 3,
                    plates_per_batch: 1,
                    channels: 2,
                    height: 32,
                    width: 32,
                    batch_gain_std: gain,
                    batch_offset_std: 0.0,
                    pixel_noise_std: 0.0,
                    seed: 100 + seed,
                    ..SyntheticConfig::default()
                };
                let dir = tempfile::tempdir().unwrap();
                let (manifest, _) = generate_synthetic(&cfg, dir.path()).unwrap();
                let mut per_batch: BTreeMap<String, Vec<f32>> = BTreeMap::new();
                for r in &manifest.records {
                    if r.perturbation.kind == PerturbationKind::Control {
                        let img = manifest.load_well_image(r).unwrap();
                        let mean = img.data().iter().sum::<f32>() / img.numel() as f32;
                        per_batch.entry(r.batch_id.clone()).or_default().push(mean);
                    }
                }
                let batch_means: Vec<f32> =
                    per_batch.values().map(|v| v.iter().sum::<f32>() / v.len() as f32).collect();
                let grand = batch_means.iter().sum::<f32>() / batch_means.len() as f32;
                let var = batch_means.iter().map(|m| (m - grand) * (m - grand)).sum::<f32>()
                    / batch_means.len() as f32;
                variances.push(var);
            }
            assert!(
                variances[0] < variances[1] && variances[1] < variances[2],
                "seed {seed}: variances {variances:?} not strictly increasing"
            );
        }
    }
}
