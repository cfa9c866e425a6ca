//! Definitional corpus BLEU over whitespace tokens, written without reference
//! to the library implementation.

use std::collections::BTreeMap;

fn grams(tokens: &[&str], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *m.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

pub fn oracle_bleu(cands: &[String], refs: &[String]) -> f64 {
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in cands.iter().zip(refs) {
        let ct: Vec<&str> = cand.split_whitespace().collect();
        let rt: Vec<&str> = reference.split_whitespace().collect();
        c += ct.len();
        r += rt.len();
        for n in 1..=4 {
            let rg = grams(&rt, n);
            for (g, k) in grams(&ct, n) {
                total[n - 1] += k;
                clipped[n - 1] += k.min(*rg.get(&g).unwrap_or(&0));
            }
        }
    }
    if c == 0 {
        return if r == 0 { 1.0 } else { 0.0 };
    }
    let used: Vec<usize> = (0..4).filter(|&i| total[i] > 0).collect();
    let mut product = 1.0f64;
    for &i in &used {
        product *= clipped[i] as f64 / total[i] as f64;
    }
    let geo = product.powf(1.0 / used.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * geo
}
