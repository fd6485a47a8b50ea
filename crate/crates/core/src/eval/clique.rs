use std::collections::BTreeMap;

use super::tsne::TsneLayout;
use crate::error::{Error, Result};

/// Mean 2-D distance between members of the same translation clique divided
/// by the mean distance over every pair drawn from different cliques.
/// Smaller means translations sit closer together. Only points in `langs`
/// take part, and every clique must contain each of them.
pub fn clique_compactness(layout: &TsneLayout, langs: &[String]) -> Result<f64> {
    let mut cliques: BTreeMap<u64, Vec<Option<[f64; 2]>>> = BTreeMap::new();
    for p in &layout.points {
        if let Some(k) = langs.iter().position(|l| *l == p.lang) {
            cliques.entry(p.sentence_id).or_insert_with(|| vec![None; langs.len()])[k] =
                Some([p.x, p.y]);
        }
    }
    let mut members = Vec::with_capacity(cliques.len());
    for (id, slots) in &cliques {
        let pts = slots
            .iter()
            .enumerate()
            .map(|(k, s)| s.ok_or_else(|| Error::MissingCliqueMember(format!("{id}/{}", langs[k]))))
            .collect::<Result<Vec<_>>>()?;
        members.push(pts);
    }
    if members.len() < 2 || langs.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let (mut within, mut nw) = (0.0, 0usize);
    for c in &members {
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                within += dist(c[i], c[j]);
                nw += 1;
            }
        }
    }
    let (mut cross, mut nc) = (0.0, 0usize);
    for a in 0..members.len() {
        for b in a + 1..members.len() {
            for &p in &members[a] {
                for &q in &members[b] {
                    cross += dist(p, q);
                    nc += 1;
                }
            }
        }
    }
    Ok((within / nw as f64) / (cross / nc as f64))
}
