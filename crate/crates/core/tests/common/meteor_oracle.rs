//! Exhaustive METEOR alignment search for short inputs.

use std::collections::HashMap;

fn max_matches(cand: &[String], refr: &[String]) -> usize {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for w in cand {
        counts.entry(w).or_default().0 += 1;
    }
    for w in refr {
        counts.entry(w).or_default().1 += 1;
    }
    counts.values().map(|(c, r)| c.min(r)).copied().sum()
}

fn chunks(pairs: &[(usize, usize)]) -> usize {
    let mut n = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in pairs {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => n += 1,
        }
        prev = Some((i, j));
    }
    n
}

fn search(
    cand: &[String],
    refr: &[String],
    i: usize,
    used: &mut Vec<bool>,
    acc: &mut Vec<(usize, usize)>,
    target: usize,
    best: &mut usize,
) {
    if acc.len() + (cand.len() - i) < target {
        return;
    }
    if i == cand.len() {
        if acc.len() == target {
            *best = (*best).min(chunks(acc));
        }
        return;
    }
    for j in 0..refr.len() {
        if !used[j] && refr[j] == cand[i] {
            used[j] = true;
            acc.push((i, j));
            search(cand, refr, i + 1, used, acc, target, best);
            acc.pop();
            used[j] = false;
        }
    }
    search(cand, refr, i + 1, used, acc, target, best);
}

/// (matches, minimal chunks) over all maximum alignments.
pub fn align(cand: &[String], refr: &[String]) -> (usize, usize) {
    let target = max_matches(cand, refr);
    if target == 0 {
        return (0, 0);
    }
    let mut best = usize::MAX;
    search(cand, refr, 0, &mut vec![false; refr.len()], &mut Vec::new(), target, &mut best);
    (target, best)
}

pub fn meteor(cand: &[String], refr: &[String]) -> f64 {
    let (m, ch) = align(cand, refr);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / cand.len() as f64;
    let r = m / refr.len() as f64;
    let fmean = p * r / (0.9 * p + 0.1 * r);
    fmean * (1.0 - 0.5 * (ch as f64 / m).powi(3))
}
