use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use nar_decode::distill::{
    decoder_frame_kd_loss, frame_kd_loss, mlm_loss, nbest_normalize, sequence_kd_loss,
    FrameDistributionPair,
};
use nar_decode_bench::loss_fixture;

fn losses(c: &mut Criterion) {
    let f = loss_fixture(7, 32, 64, 10);
    let pair = FrameDistributionPair::all_rows(f.teacher.clone(), f.logits.clone()).unwrap();
    let rows: Vec<usize> = (0..f.logits.nrows()).step_by(2).collect();

    c.bench_function("frame_kd_32x64", |b| {
        b.iter(|| black_box(frame_kd_loss(&pair).unwrap()))
    });
    c.bench_function("decoder_frame_kd_32x64", |b| {
        b.iter(|| black_box(decoder_frame_kd_loss(&pair, &rows).unwrap()))
    });
    c.bench_function("sequence_kd_32x64_n10", |b| {
        b.iter(|| black_box(sequence_kd_loss(&f.nbest, &f.logits, &f.mask, f.seq_len).unwrap()))
    });
    c.bench_function("mlm_32x64", |b| {
        b.iter(|| black_box(mlm_loss(&f.logits, &f.targets).unwrap()))
    });
    c.bench_function("nbest_normalize_n10", |b| {
        b.iter(|| black_box(nbest_normalize(&f.nbest)))
    });
}

criterion_group!(benches, losses);
criterion_main!(benches);
