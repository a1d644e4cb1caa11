use xmreg_core::imaging::GrayImage;
use xmreg_core::matching::{Matcher, MatcherSpec};
use xmreg_core::retrieval::{rank_candidates, retrieval_params, score_candidates, summarize_retrieval, Candidate, RetrievalQuery};
use xmreg_core::synthgen::{generate_retrieval_pool, PoolSpec};

fn scored(spec: &PoolSpec) -> Vec<RetrievalQuery> {
    let matcher = Matcher::from_spec(&MatcherSpec::builtin()).unwrap();
    generate_retrieval_pool(spec)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let images: Vec<GrayImage> = q.candidates.iter().map(|(_, img)| img.clone()).collect();
            let scores = score_candidates(&q.image, &images, &matcher, &retrieval_params(i as u64));
            RetrievalQuery {
                query_id: q.query_id.clone(),
                candidates: q
                    .candidates
                    .iter()
                    .zip(scores)
                    .map(|((id, _), s)| Candidate {
                        id: id.clone(),
                        positive: *id == q.positive_id,
                        score: s as f64,
                    })
                    .collect(),
            }
        })
        .collect()
}

#[test]
fn clean_two_candidate_pools_rank_the_positive_first() {
    for q in scored(&PoolSpec::new(6, 2, 3)) {
        assert!(rank_candidates(&q)[0].positive, "{}", q.query_id);
    }
}

#[test]
fn heavy_degradation_drives_auroc_toward_chance() {
    let spec = PoolSpec {
        speckle_strength: 0.8,
        invert_contrast: true,
        ..PoolSpec::new(6, 4, 5)
    };
    let s = summarize_retrieval(&scored(&spec), &[1]);
    let auroc = s.auroc.unwrap();
    assert!(auroc <= 0.6, "AUROC {auroc}");
}
