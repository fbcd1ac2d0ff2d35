use knnplus::embed::l2_normalize;
use knnplus::{BinaryLabel, Execution, Index};
use proptest::prelude::*;

fn brute_force(index: &Index, q: &[f64], k: usize, exclude: Option<&str>) -> Vec<(String, f64)> {
    let q = l2_normalize(q);
    let mut all: Vec<(String, f64)> = (0..index.len())
        .filter(|&i| Some(index.ids()[i].as_str()) != exclude)
        .map(|i| {
            let score = index.row(i).iter().zip(&q).fold(0.0, |acc, (&x, &y)| acc + y * f64::from(x));
            (index.ids()[i].clone(), score)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn index_strategy() -> impl Strategy<Value = (Index, Vec<f64>, usize)> {
    (1usize..12, 1usize..80).prop_flat_map(|(d, n)| {
        // Values on a coarse grid so duplicate rows and exact ties show up.
        let row = prop::collection::vec((-3i8..=3).prop_map(f32::from), d);
        (
            prop::collection::vec(row, n),
            prop::collection::vec((-3i8..=3).prop_map(f64::from), d),
            1..=n,
        )
            .prop_filter_map("valid index", move |(mut rows, mut q, k)| {
                for v in rows.iter_mut() {
                    if v.iter().all(|x| *x == 0.0) {
                        v[0] = 1.0;
                    }
                }
                if q.iter().all(|x| *x == 0.0) {
                    q[0] = -1.0;
                }
                let ids = (0..rows.len()).map(|i| format!("x{:03}", (i * 37) % 101)).collect();
                let labels = (0..rows.len()).map(|i| if i % 2 == 0 { BinaryLabel::Flagged } else { BinaryLabel::Neutral }).collect();
                let index = Index::from_parts(d, ids, labels, rows.concat()).ok()?;
                Some((index, q, k))
            })
    })
}

proptest! {
    #[test]
    fn topk_matches_brute_force((index, q, k) in index_strategy()) {
        let got = index.query_topk("q", &q, k, None).unwrap();
        let got: Vec<_> = got.hits.iter().map(|h| (h.id.clone(), h.score)).collect();
        prop_assert_eq!(got, brute_force(&index, &q, k, None));
    }

    #[test]
    fn exclusion_matches_brute_force((index, q, k) in index_strategy()) {
        let skip = index.ids()[0].clone();
        let k = k.min(index.len().saturating_sub(1)).max(1);
        if index.len() > 1 {
            let got = index.query_topk_with("q", &q, k, Some(&skip), Execution::Parallel).unwrap();
            prop_assert!(got.hits.iter().all(|h| h.id != skip));
            let got: Vec<_> = got.hits.iter().map(|h| (h.id.clone(), h.score)).collect();
            prop_assert_eq!(got, brute_force(&index, &q, k, Some(&skip)));
        }
    }

    #[test]
    fn bytes_round_trip((index, q, k) in index_strategy()) {
        let back = Index::from_bytes(&index.to_bytes()).unwrap();
        prop_assert_eq!(back.ids(), index.ids());
        prop_assert_eq!(back.labels(), index.labels());
        prop_assert_eq!(
            back.query_topk("q", &q, k, None).unwrap().hits,
            index.query_topk("q", &q, k, None).unwrap().hits
        );
    }
}

#[test]
fn large_index_parallel_scan_agrees() {
    // Above the chunking threshold, so the parallel path splits the scan.
    let (n, d) = (40_000, 8);
    let rows: Vec<f32> = (0..n * d).map(|i| ((i * 2654435761usize) % 17) as f32 - 8.0).collect();
    let ids = (0..n).map(|i| format!("r{i:05}")).collect();
    let labels = vec![BinaryLabel::Neutral; n];
    let index = Index::from_parts(d, ids, labels, rows).unwrap();
    let q = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0, 2.0, 1.5];
    let seq = index.query_topk_with("q", &q, 50, None, Execution::Sequential).unwrap();
    let par = index.query_topk_with("q", &q, 50, None, Execution::Parallel).unwrap();
    assert_eq!(seq.hits, par.hits);
    let want = brute_force(&index, &q, 50, None);
    assert_eq!(seq.hits.iter().map(|h| (h.id.clone(), h.score)).collect::<Vec<_>>(), want);
}
