use alaska_core::handle::{classify, Handle, HandleTable};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn encode_classify(c: &mut Criterion) {
    c.bench_function("encode_classify", |b| {
        let mut i = 0u32;
        b.iter(|| {
            i = i.wrapping_add(1) & 0x7FFF_FFFF;
            let h = Handle::encode(i, i.wrapping_mul(13)).unwrap();
            black_box(classify(h.bits()))
        })
    });
}

fn translate(c: &mut Criterion) {
    let mut table = HandleTable::new();
    for i in 0..1024u64 {
        let id = table.allocate().unwrap();
        table.set_backing(id, 0x10_0000 + i * 64, 64).unwrap();
    }
    let handles: Vec<u64> = (0..1024u32)
        .map(|id| Handle::encode(id, 8).unwrap().bits())
        .collect();
    c.bench_function("translate_checked", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) & 1023;
            black_box(table.translate(black_box(handles[i])).unwrap())
        })
    });
    // The production fast path: bounds diagnostics compiled out.
    c.bench_function("translate_unchecked", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) & 1023;
            black_box(table.translate_unchecked(black_box(handles[i])))
        })
    });
    c.bench_function("translate_raw_passthrough", |b| {
        b.iter(|| black_box(table.translate_unchecked(black_box(0x5000))))
    });
}

fn table_alloc_free(c: &mut Criterion) {
    c.bench_function("hte_alloc_free", |b| {
        let mut table = HandleTable::new();
        b.iter(|| {
            let id = table.allocate().unwrap();
            table.free(black_box(id)).unwrap();
        })
    });
}

criterion_group!(benches, encode_classify, translate, table_alloc_free);
criterion_main!(benches);
