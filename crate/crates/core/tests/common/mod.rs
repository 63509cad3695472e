//! Brute-force oracles shared by the integration suites. These stay
//! deliberately naive: direct enumeration and definition-level arithmetic,
//! independent of the library's streaming implementations.

use std::collections::BTreeSet;

use crosswell_core::retrieval::EmbeddingTable;

/// All-pairs gene-gene selection by exhaustive enumeration. Cosine
/// similarities are recomputed from the raw per-perturbation means
/// (`dot / (|a||b|)`), not from the library's normalized aggregates.
pub struct OracleGeneGene {
    pub selected: BTreeSet<(String, String)>,
    pub n_pairs: usize,
}

pub fn oracle_gene_gene_selection(table: &EmbeddingTable, fraction: f64) -> OracleGeneGene {
    use std::collections::BTreeMap;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let d = table.rows[0].feature.len();
    for r in &table.rows {
        let e = sums.entry(r.perturbation_id.clone()).or_insert_with(|| (vec![0.0; d], 0));
        for (s, &x) in e.0.iter_mut().zip(&r.feature) {
            *s += x as f64;
        }
        e.1 += 1;
    }
    let means: Vec<(String, Vec<f64>)> = sums
        .into_iter()
        .map(|(id, (sum, count))| (id, sum.iter().map(|x| x / count as f64).collect()))
        .collect();
    let n = means.len();
    let mut pairs: Vec<(f64, (String, String))> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (ref id_a, ref va) = means[i];
            let (ref id_b, ref vb) = means[j];
            let dot: f64 = va.iter().zip(vb).map(|(a, b)| a * b).sum();
            let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = dot / (na * nb);
            let key = if id_a < id_b { (id_a.clone(), id_b.clone()) } else { (id_b.clone(), id_a.clone()) };
            pairs.push((cos, key));
        }
    }
    let n_pairs = pairs.len();
    let k = ((fraction * n_pairs as f64).round() as usize).max(1);
    let mut by_desc = pairs.clone();
    by_desc.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    let mut selected: BTreeSet<(String, String)> = by_desc.iter().take(k).map(|(_, p)| p.clone()).collect();
    let mut by_asc = pairs;
    by_asc.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    for (_, p) in by_asc.into_iter().take(k) {
        selected.insert(p);
    }
    OracleGeneGene { selected, n_pairs }
}

/// AUC by counting concordant/tied positive-negative pairs, per the
/// Mann-Whitney definition.
pub fn oracle_auc(scores: &[f64], is_positive: &[bool]) -> f64 {
    let mut concordant = 0.0f64;
    let mut total = 0usize;
    for (i, &pi) in is_positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in is_positive.iter().enumerate() {
            if pj {
                continue;
            }
            total += 1;
            if scores[i] > scores[j] {
                concordant += 1.0;
            } else if scores[i] == scores[j] {
                concordant += 0.5;
            }
        }
    }
    concordant / total as f64
}

/// AP per its definition: for each positive, precision at its rank
/// (1-indexed, ranked by descending score with the supplied tie-break
/// order already applied); terms are summed in rank order.
pub fn oracle_ap(is_positive_ranked: &[bool]) -> f64 {
    let mut total = 0.0f64;
    let mut hits = 0usize;
    for (i, &pos) in is_positive_ranked.iter().enumerate() {
        if pos {
            hits += 1;
            let mut above = 0usize;
            for &q in &is_positive_ranked[..i] {
                if q {
                    above += 1;
                }
            }
            total += (above + 1) as f64 / (i + 1) as f64;
        }
    }
    total / hits as f64
}
