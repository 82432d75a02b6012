use msgcoop::descriptions::filter_embeddings;
use proptest::prelude::*;

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

// Best k-subset by total mean similarity, searched exhaustively.
fn best_total(embs: &[Vec<f64>], k: usize) -> f64 {
    let n = embs.len();
    let score: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                (0..n).filter(|&j| j != i).map(|j| cos(&embs[i], &embs[j])).sum::<f64>() / (n - 1) as f64
            }
        })
        .collect();
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k.min(n))
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| score[i]).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..=8)
        .prop_filter("nonzero", |v| v.iter().all(|x| x.iter().any(|c| c.abs() > 1e-3)))
}

proptest! {
    #[test]
    fn selection_is_optimal_and_ordered(embs in vectors(), k in 1usize..=8, dup in any::<bool>()) {
        let mut embs = embs;
        if dup {
            embs.push(embs[0].clone());
        }
        let sel = filter_embeddings(&embs, k).unwrap();
        prop_assert_eq!(sel.indices.len(), k.min(embs.len()));
        let total: f64 = sel.indices.iter().map(|&i| sel.mean_sims[i]).sum();
        prop_assert!((total - best_total(&embs, k)).abs() < 1e-12);
        for w in sel.indices.windows(2) {
            let (a, b) = (sel.mean_sims[w[0]], sel.mean_sims[w[1]]);
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
    }
}
