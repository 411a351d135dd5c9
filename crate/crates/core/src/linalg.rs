//! Small vector helpers shared by the index, the evaluators and the KGE code.

use ndarray::{Array2, ArrayView1, Axis};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn cosine_view(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(&b) / (na * nb))
}

/// Copy of `m` with every row scaled to unit L2 norm (zero rows stay zero).
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

/// Indices of the `k` rows of `sims` (a score per candidate) with the highest
/// score, descending, ties to the lower index. `eligible` filters candidates.
pub fn top_k_by_score(scores: &[f64], k: usize, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    // Min-heap on (score, -index) keeps the current best k.
    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        // "greater" = worse, so the heap top is the weakest kept entry.
        fn cmp(&self, other: &Self) -> Ordering {
            other.0.total_cmp(&self.0).then(self.1.cmp(&other.1))
        }
    }

    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(k + 1);
    for (i, &s) in scores.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        if heap.len() < k {
            heap.push(Entry(s, i));
        } else if let Some(worst) = heap.peek() {
            if Entry(s, i).cmp(worst) == Ordering::Less {
                heap.pop();
                heap.push(Entry(s, i));
            }
        }
    }
    let mut out: Vec<Entry> = heap.into_vec();
    out.sort();
    out.into_iter().map(|e| e.1).collect()
}
