use anfc_bench::{container, image, laplace_symbols, laplace_tables, tiny_model};
use anfc_core::codec::{decode_image, encode_image, DecodeOptions, EncodeOptions};
use anfc_core::rangecoder::{decode_sequence, encode_sequence, SymbolSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn codec(c: &mut Criterion) {
    let model = tiny_model().unwrap();
    let mut g = c.benchmark_group("codec");
    g.sample_size(10);
    for side in [64, 128] {
        let x = image(side).unwrap();
        g.throughput(Throughput::Elements((side * side) as u64));
        for residual in [false, true] {
            let tag = if residual { "residual" } else { "lossy" };
            let opts = EncodeOptions {
                residual,
                ..EncodeOptions::default()
            };
            g.bench_with_input(
                BenchmarkId::new(format!("encode/{tag}"), side),
                &x,
                |b, x| b.iter(|| encode_image(&model, black_box(x), &opts).unwrap()),
            );
            let bytes = container(&model, &x, residual).unwrap();
            g.bench_with_input(
                BenchmarkId::new(format!("decode/{tag}"), side),
                &bytes,
                |b, s| {
                    b.iter(|| {
                        decode_image(&model, black_box(s), &DecodeOptions::default()).unwrap()
                    })
                },
            );
        }
    }
    g.finish();
}

fn range_coder(c: &mut Criterion) {
    let tables = laplace_tables(8).unwrap();
    let n = 100_000;
    let raw = laplace_symbols(&tables, n, 1);
    let specs: Vec<SymbolSpec> = raw
        .iter()
        .map(|&(symbol, t)| SymbolSpec {
            symbol,
            table: &tables[t],
        })
        .collect();
    let mut per_symbol: Vec<_> = raw.iter().map(|&(_, t)| tables[t].clone()).collect();
    let bytes = encode_sequence(&specs).unwrap();

    let mut g = c.benchmark_group("range_coder");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("encode", |b| {
        b.iter(|| encode_sequence(black_box(&specs)).unwrap())
    });
    g.bench_function("decode", |b| {
        b.iter(|| decode_sequence(black_box(&bytes), per_symbol.as_mut_slice(), n).unwrap())
    });
    g.finish();
}

criterion_group!(benches, codec, range_coder);
criterion_main!(benches);
