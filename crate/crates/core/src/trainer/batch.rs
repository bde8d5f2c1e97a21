use rand::seq::index;
use rand::Rng;

use crate::error::Result;
use crate::model::{PlateBatch, TemplateGraph};

/// Draws `B_i[t]`: for every plate, `N̆` distinct indices uniformly without
/// replacement, sorted. Plates batched at full cardinality use every index
/// and consume no randomness.
pub fn sample_batch<R: Rng + ?Sized>(graph: &TemplateGraph, rng: &mut R) -> Result<PlateBatch> {
    let cards = graph.full_cards();
    let indices = graph
        .plates()
        .iter()
        .map(|p| {
            if p.reduced_card == p.card {
                (0..p.card).collect()
            } else {
                let mut v = index::sample(rng, p.card, p.reduced_card).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    PlateBatch::new(&cards, indices)
}

/// Every possible batch, in lexicographic order per plate.
pub fn enumerate_batches(graph: &TemplateGraph) -> Result<Vec<PlateBatch>> {
    let cards = graph.full_cards();
    let mut out: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for p in graph.plates() {
        let subsets = combinations(p.card, p.reduced_card);
        let mut next = Vec::with_capacity(out.len() * subsets.len());
        for prefix in &out {
            for s in &subsets {
                let mut v = prefix.clone();
                v.push(s.clone());
                next.push(v);
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|i| PlateBatch::new(&cards, i))
        .collect()
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] != i + n - k) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}
