//! Embedding-retrieval benchmarks: gene–gene relationship recall over
//! extreme-similarity pairs, and compound–gene ranking metrics (AUC,
//! average precision) with permutation z-scores.
//!
//! Wells aggregate to one vector per perturbation (mean, then L2
//! normalization), so cosine similarity between aggregates is a plain dot
//! product. Ranking metrics are computed with midrank tie handling, which
//! agrees exactly with pair-counting oracles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::streams::stream_rng;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{0}")]
    Invalid(String),
    #[error("empty known relationship set for source {0}")]
    EmptyKnownSet(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

fn io_err(path: &Path, source: std::io::Error) -> RetrievalError {
    RetrievalError::Io { path: path.display().to_string(), source }
}

// ── embedding tables ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub batch_id: String,
    pub plate_id: String,
    pub well_id: String,
    pub perturbation_id: String,
    pub feature: Vec<f32>,
}

/// Per-well feature vectors with their well keys and perturbation ids.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, |r| r.feature.len())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
        let d = self.width();
        let header: Vec<String> = ["batch_id", "plate_id", "well_id", "perturbation_id"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..d).map(|i| format!("f{i}")))
            .collect();
        writeln!(f, "{}", header.join(",")).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            let mut line = format!("{},{},{},{}", r.batch_id, r.plate_id, r.well_id, r.perturbation_id);
            for x in &r.feature {
                line.push(',');
                line.push_str(&format!("{x}"));
            }
            writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<EmbeddingTable> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let display = path.display().to_string();
        let mut rows = Vec::new();
        let mut width = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if !line.starts_with("batch_id,plate_id,well_id,perturbation_id") {
                    return Err(RetrievalError::Parse {
                        path: display,
                        line: 1,
                        msg: "bad embedding table header".into(),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 5 {
                return Err(RetrievalError::Parse {
                    path: display.clone(),
                    line: i + 1,
                    msg: "too few columns".into(),
                });
            }
            let feature: Vec<f32> = fields[4..]
                .iter()
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| RetrievalError::Parse { path: display.clone(), line: i + 1, msg: e.to_string() })?;
            if *width.get_or_insert(feature.len()) != feature.len() {
                return Err(RetrievalError::Parse {
                    path: display.clone(),
                    line: i + 1,
                    msg: "inconsistent feature width".into(),
                });
            }
            rows.push(EmbeddingRow {
                batch_id: fields[0].to_string(),
                plate_id: fields[1].to_string(),
                well_id: fields[2].to_string(),
                perturbation_id: fields[3].to_string(),
                feature,
            });
        }
        Ok(EmbeddingTable { rows })
    }
}

/// Per-perturbation aggregate vectors (mean of well features, then L2
/// normalized), in lexicographic id order.
#[derive(Debug, Clone, Default)]
pub struct Aggregates {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
    /// Perturbations whose aggregate had zero norm, excluded from `ids`.
    pub flagged: Vec<String>,
}

impl Aggregates {
    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok().map(|i| self.vectors[i].as_slice())
    }
}

/// Mean-aggregates the table per perturbation and L2-normalizes. Zero-norm
/// aggregates are flagged and excluded.
pub fn aggregate(table: &EmbeddingTable) -> Result<Aggregates> {
    if table.rows.is_empty() {
        return Ok(Aggregates::default());
    }
    let d = table.width();
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &table.rows {
        if r.feature.len() != d {
            return Err(RetrievalError::Invalid("inconsistent feature width".into()));
        }
        let entry = sums.entry(r.perturbation_id.clone()).or_insert_with(|| (vec![0.0; d], 0));
        for (s, &x) in entry.0.iter_mut().zip(&r.feature) {
            *s += x as f64;
        }
        entry.1 += 1;
    }
    let mut out = Aggregates::default();
    for (id, (sum, count)) in sums {
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.flagged.push(id);
            continue;
        }
        out.ids.push(id);
        out.vectors.push(mean.iter().map(|x| (x / norm) as f32).collect());
    }
    Ok(out)
}

// ── relationship sets ────────────────────────────────────────────────

/// Known associations: symmetric gene–gene pairs or a compound → gene map,
/// labeled by source.
#[derive(Debug, Clone)]
pub struct RelationshipSet {
    pub source: String,
    pub pairs: BTreeSet<(String, String)>,
}

impl RelationshipSet {
    pub fn from_pairs(source: impl Into<String>, pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(RetrievalError::Invalid(format!("self-pair {a}")));
            }
            let (x, y) = if a < b { (a, b) } else { (b, a) };
            set.insert((x, y));
        }
        Ok(RelationshipSet { source: source.into(), pairs: set })
    }

    /// Loads a two-column `perturbation_a,perturbation_b` file; the source
    /// label is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let display = path.display().to_string();
        let source = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "unknown".into());
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue; // header
            }
            let (a, b) = line.split_once(',').ok_or_else(|| RetrievalError::Parse {
                path: display.clone(),
                line: i + 1,
                msg: "expected two columns".into(),
            })?;
            pairs.push((a.to_string(), b.to_string()));
        }
        Self::from_pairs(source, pairs)
    }
}

/// Compound → target-gene sets.
#[derive(Debug, Clone, Default)]
pub struct TargetMap {
    pub targets: BTreeMap<String, BTreeSet<String>>,
}

impl TargetMap {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let display = path.display().to_string();
        let mut targets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let (c, g) = line.split_once(',').ok_or_else(|| RetrievalError::Parse {
                path: display.clone(),
                line: i + 1,
                msg: "expected two columns".into(),
            })?;
            targets.entry(c.to_string()).or_default().insert(g.to_string());
        }
        Ok(TargetMap { targets })
    }
}

// ── gene-gene recall ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SourceRecall {
    pub source: String,
    pub known: usize,
    pub resolvable: usize,
    pub discovered: usize,
    pub recall: f64,
}

#[derive(Debug, Clone)]
pub struct GeneGeneReport {
    pub n_perturbations: usize,
    pub n_pairs: usize,
    pub selected: usize,
    pub fraction: f64,
    pub per_source: Vec<SourceRecall>,
    /// Known pairs whose ids were not in the table (reported, dropped).
    pub dropped_pairs: usize,
}

/// Selects the `k` highest and `k` lowest cosine-similarity pairs with
/// `k = max(1, round(fraction * n_pairs))`, ties broken by lexicographic
/// pair id, and scores recall per source.
///
/// `universe` optionally restricts which table ids participate (the
/// gene-kind filter); known pairs outside the universe are dropped and
/// counted.
pub fn gene_gene_recall(
    aggregates: &Aggregates,
    known: &[RelationshipSet],
    fraction: f64,
    universe: Option<&BTreeSet<String>>,
) -> Result<GeneGeneReport> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(RetrievalError::Invalid(format!("fraction must be in (0, 0.5], got {fraction}")));
    }
    let ids: Vec<&String> = aggregates
        .ids
        .iter()
        .filter(|id| universe.map_or(true, |u| u.contains(*id)))
        .collect();
    let n = ids.len();
    if n < 2 {
        return Err(RetrievalError::Invalid(format!("need at least 2 perturbations, got {n}")));
    }
    for set in known {
        if set.pairs.is_empty() {
            return Err(RetrievalError::EmptyKnownSet(set.source.clone()));
        }
    }

    // All unordered pairs with cosine similarity (aggregates are unit norm).
    let mut sims: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let vi = aggregates.get(ids[i]).expect("id from aggregates");
        for j in i + 1..n {
            let vj = aggregates.get(ids[j]).expect("id from aggregates");
            let dot: f64 = vi.iter().zip(vj).map(|(&a, &b)| a as f64 * b as f64).sum();
            sims.push((dot, i, j));
        }
    }
    let n_pairs = sims.len();
    let k = ((fraction * n_pairs as f64).round() as usize).max(1);

    let pair_name = |i: usize, j: usize| -> (String, String) {
        let (a, b) = (ids[i].clone(), ids[j].clone());
        if a < b { (a, b) } else { (b, a) }
    };
    // Ties broken by lexicographic pair id for determinism.
    let mut by_sim: Vec<usize> = (0..n_pairs).collect();
    by_sim.sort_by(|&x, &y| {
        sims[y].0
            .partial_cmp(&sims[x].0)
            .unwrap()
            .then_with(|| pair_name(sims[x].1, sims[x].2).cmp(&pair_name(sims[y].1, sims[y].2)))
    });
    let mut selected: BTreeSet<(String, String)> = BTreeSet::new();
    for &idx in by_sim.iter().take(k) {
        selected.insert(pair_name(sims[idx].1, sims[idx].2));
    }
    for &idx in by_sim.iter().rev().take(k) {
        selected.insert(pair_name(sims[idx].1, sims[idx].2));
    }

    let in_universe: BTreeSet<&String> = ids.iter().copied().collect();
    let mut per_source = Vec::new();
    let mut dropped_total = 0usize;
    for set in known {
        let resolvable: Vec<&(String, String)> = set
            .pairs
            .iter()
            .filter(|(a, b)| in_universe.contains(a) && in_universe.contains(b))
            .collect();
        dropped_total += set.pairs.len() - resolvable.len();
        let discovered = resolvable.iter().filter(|p| selected.contains(**p)).count();
        let denom = resolvable.len();
        per_source.push(SourceRecall {
            source: set.source.clone(),
            known: set.pairs.len(),
            resolvable: denom,
            discovered,
            recall: if denom == 0 { 0.0 } else { discovered as f64 / denom as f64 },
        });
    }
    Ok(GeneGeneReport {
        n_perturbations: n,
        n_pairs,
        selected: selected.len(),
        fraction,
        per_source,
        dropped_pairs: dropped_total,
    })
}

// ── compound-gene metrics ────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CompoundScore {
    pub compound: String,
    pub n_targets: usize,
    pub n_genes: usize,
    pub auc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone)]
pub struct CompoundGeneReport {
    pub per_compound: Vec<CompoundScore>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_ap: f64,
    pub std_ap: f64,
    /// Compounds with no resolvable target or no non-target genes.
    pub excluded: Vec<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ranks genes by similarity to each compound. AUC is the Mann–Whitney
/// statistic with ties counted 0.5; AP is the mean over known targets of
/// precision at that target's rank. Gene-id ties rank lexicographically.
pub fn compound_gene_metrics(
    aggregates: &Aggregates,
    targets: &TargetMap,
    genes: &BTreeSet<String>,
) -> Result<CompoundGeneReport> {
    let gene_ids: Vec<&String> = aggregates.ids.iter().filter(|id| genes.contains(*id)).collect();
    let mut per_compound = Vec::new();
    let mut excluded = Vec::new();
    for (compound, target_set) in &targets.targets {
        let Some(cvec) = aggregates.get(compound) else {
            excluded.push(compound.clone());
            continue;
        };
        let resolvable: BTreeSet<&String> = target_set.iter().filter(|g| aggregates.get(g).is_some() && genes.contains(*g)).collect();
        let n_pos = resolvable.len();
        let n_neg = gene_ids.len().saturating_sub(n_pos);
        if n_pos == 0 || n_neg == 0 {
            excluded.push(compound.clone());
            continue;
        }
        // Rank genes by similarity, descending; ties by gene id.
        let mut scored: Vec<(f64, &String)> = gene_ids
            .iter()
            .map(|g| {
                let gv = aggregates.get(g).expect("gene id from aggregates");
                let dot: f64 = cvec.iter().zip(gv).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot, *g)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
        let is_target: Vec<bool> = scored.iter().map(|(_, g)| resolvable.contains(g)).collect();
        let scores: Vec<f64> = scored.iter().map(|(s, _)| *s).collect();
        let auc = auc_midrank(&scores, &is_target);
        let ap = average_precision(&is_target);
        per_compound.push(CompoundScore {
            compound: compound.clone(),
            n_targets: n_pos,
            n_genes: gene_ids.len(),
            auc,
            ap,
        });
    }
    if per_compound.is_empty() {
        return Err(RetrievalError::Invalid("no compound had resolvable targets".into()));
    }
    let (mean_auc, std_auc) = mean_std(&per_compound.iter().map(|c| c.auc).collect::<Vec<_>>());
    let (mean_ap, std_ap) = mean_std(&per_compound.iter().map(|c| c.ap).collect::<Vec<_>>());
    Ok(CompoundGeneReport { per_compound, mean_auc, std_auc, mean_ap, std_ap, excluded })
}

/// Mann–Whitney AUC over a list sorted descending by score: equal scores
/// share a midrank, which counts tied positive/negative pairs as 0.5.
fn auc_midrank(scores_desc: &[f64], is_positive: &[bool]) -> f64 {
    let n = scores_desc.len();
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    // Ascending ranks 1..=n with midranks for ties; list is descending.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores_desc[j + 1] == scores_desc[i] {
            j += 1;
        }
        // Positions i..=j (descending) correspond to ascending ranks
        // (n - j)..=(n - i); the shared midrank is their mean.
        let midrank = ((n - j) + (n - i)) as f64 / 2.0;
        for k in i..=j {
            if is_positive[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos as f64 * n_neg as f64)
}

/// Mean over targets of precision at the target's 1-indexed rank.
fn average_precision(is_positive: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0f64;
    for (i, &pos) in is_positive.iter().enumerate() {
        if pos {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / hits as f64
}

// ── permutation z-scores ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ZScores {
    pub z_auc: Option<f64>,
    pub z_ap: Option<f64>,
    pub baseline_mean_auc: f64,
    pub baseline_std_auc: f64,
    pub baseline_mean_ap: f64,
    pub baseline_std_ap: f64,
    pub n_permutations: usize,
}

/// Permutation baseline: redraw each compound's target set uniformly with
/// the same cardinality, recompute mean AUC/AP, and standardize the
/// observed means against that distribution. Zero baseline spread yields
/// an undefined (None) z-score.
pub fn zscore_vs_random(
    report: &CompoundGeneReport,
    aggregates: &Aggregates,
    targets: &TargetMap,
    genes: &BTreeSet<String>,
    n_permutations: usize,
    seed: u64,
) -> Result<ZScores> {
    if n_permutations < 100 {
        return Err(RetrievalError::Invalid(format!(
            "need at least 100 permutations, got {n_permutations}"
        )));
    }
    let gene_pool: Vec<String> = aggregates.ids.iter().filter(|id| genes.contains(*id)).cloned().collect();
    let mut baseline_auc = Vec::with_capacity(n_permutations);
    let mut baseline_ap = Vec::with_capacity(n_permutations);
    for p in 0..n_permutations {
        let mut rng = stream_rng(seed, "permute.targets", &[p as u64]);
        let mut permuted = TargetMap::default();
        for (compound, target_set) in &targets.targets {
            let take = target_set.len().min(gene_pool.len());
            // Partial Fisher-Yates over the gene pool.
            let mut pool: Vec<usize> = (0..gene_pool.len()).collect();
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let drawn: BTreeSet<String> = pool[..take].iter().map(|&i| gene_pool[i].clone()).collect();
            permuted.targets.insert(compound.clone(), drawn);
        }
        let rep = compound_gene_metrics(aggregates, &permuted, genes)?;
        baseline_auc.push(rep.mean_auc);
        baseline_ap.push(rep.mean_ap);
    }
    let (mean_auc, std_auc) = mean_std(&baseline_auc);
    let (mean_ap, std_ap) = mean_std(&baseline_ap);
    Ok(ZScores {
        z_auc: (std_auc > 0.0).then(|| (report.mean_auc - mean_auc) / std_auc),
        z_ap: (std_ap > 0.0).then(|| (report.mean_ap - mean_ap) / std_ap),
        baseline_mean_auc: mean_auc,
        baseline_std_auc: std_auc,
        baseline_mean_ap: mean_ap,
        baseline_std_ap: std_ap,
        n_permutations,
    })
}

// ── report serialization ─────────────────────────────────────────────

pub fn gene_gene_report_csv(report: &GeneGeneReport) -> String {
    let mut out = String::from("source,known,resolvable,discovered,recall,selected,pairs,fraction\n");
    for s in &report.per_source {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.source, s.known, s.resolvable, s.discovered, s.recall, report.selected, report.n_pairs, report.fraction
        ));
    }
    out
}

pub fn compound_gene_report_csv(report: &CompoundGeneReport, z: Option<&ZScores>) -> String {
    let mut out = String::from("metric,mean,std,z_score\n");
    let fmt_z = |z: Option<f64>| z.map_or("undefined".to_string(), |v| format!("{v}"));
    let (z_auc, z_ap) = z.map_or((None, None), |z| (z.z_auc, z.z_ap));
    out.push_str(&format!("auc,{},{},{}\n", report.mean_auc, report.std_auc, fmt_z(z_auc)));
    out.push_str(&format!("ap,{},{},{}\n", report.mean_ap, report.std_ap, fmt_z(z_ap)));
    out.push_str("compound,n_targets,n_genes,auc,ap\n");
    for c in &report.per_compound {
        out.push_str(&format!("{},{},{},{},{}\n", c.compound, c.n_targets, c.n_genes, c.auc, c.ap));
    }
    out
}
