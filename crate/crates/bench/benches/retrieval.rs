use cograg_bench::synthetic_kb;
use cograg_core::kb::Tag;
use cograg_core::llm::{Embedder, MockHashEmbedder};
use cograg_core::retrieval::{
    bm25_search, dense_search, format_evidence, rrf_fuse, tag_constrained_search, Bm25Params,
    DEFAULT_RRF_K,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::collections::BTreeSet;
use std::hint::black_box;

const DIM: usize = 64;
const QUERY: &str = "iron absorption deficiency screening";

fn bench_retrieval(c: &mut Criterion) {
    let embedder = MockHashEmbedder::new(DIM, 7);
    for &n in &[1_000usize, 10_000] {
        let kb = synthetic_kb(n, DIM);
        let query_vec = embedder.embed_one(QUERY).unwrap();
        let tags: BTreeSet<Tag> = [Tag::T2, Tag::T3].into_iter().collect();

        let mut group = c.benchmark_group("retrieval");
        group.bench_with_input(BenchmarkId::new("bm25", n), &kb, |b, kb| {
            b.iter(|| black_box(bm25_search(kb, QUERY, 5, Bm25Params::default())))
        });
        group.bench_with_input(BenchmarkId::new("dense_exact", n), &kb, |b, kb| {
            b.iter(|| black_box(dense_search(kb, &query_vec, None, 5).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("tag_dense", n), &kb, |b, kb| {
            b.iter(|| {
                black_box(tag_constrained_search(kb, QUERY, &tags, 5, &embedder).unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("hybrid_rrf", n), &kb, |b, kb| {
            let sparse = bm25_search(kb, QUERY, 50, Bm25Params::default());
            let dense = dense_search(kb, &query_vec, None, 50).unwrap();
            b.iter(|| black_box(rrf_fuse(&[&sparse, &dense], DEFAULT_RRF_K, 5)))
        });
        group.bench_with_input(BenchmarkId::new("format_evidence", n), &kb, |b, kb| {
            let ranked = dense_search(kb, &query_vec, None, 20).unwrap();
            b.iter(|| black_box(format_evidence(&ranked, kb, 512)))
        });
        group.finish();
    }
}

criterion_group!(benches, bench_retrieval);
criterion_main!(benches);
