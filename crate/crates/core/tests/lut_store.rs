use std::fs;

use half::f16;
use mole::kernels::Tensor;
use mole::lut_store::{
    block_bytes, codebook, compression_ratio, dequantize_row, max_codebook_gap, open_lut, quantize_row, write_lut,
    LutDtype, LutError, LutFileHeader, HEADER_BYTES,
};
use mole::model::{ModelConfig, ModelParams};
use mole::reparam::{reparameterize, LutTable};
use mole::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use tempfile::TempDir;

fn random_tables(layers: usize, vocab: usize, n: usize, d: usize, seed: u64) -> Vec<LutTable<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layers)
        .map(|layer| {
            let data: Vec<f32> = (0..vocab * n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            LutTable {
                layer,
                values: Tensor::new(vec![vocab, n, d], data).unwrap(),
            }
        })
        .collect()
}

fn lut_err(e: Error) -> LutError {
    match e {
        Error::Lut(l) => l,
        other => panic!("expected a LUT error, got {other}"),
    }
}

#[test]
fn header_golden_bytes() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    let tables = vec![LutTable {
        layer: 0,
        values: Tensor::new(vec![2, 1, 2], vec![1.0f32, -2.0, 0.5, 0.0]).unwrap(),
    }];
    write_lut(&tables, &path, LutDtype::Fp32, 0).unwrap();
    let bytes = fs::read(&path).unwrap();
    let mut want = b"MOLELUT1".to_vec();
    want.extend_from_slice(&[1, 0, 0, 0]); // version
    want.extend_from_slice(&[1, 0, 0, 0]); // layers
    want.extend_from_slice(&[2, 0, 0, 0]); // vocab
    want.extend_from_slice(&[1, 0, 0, 0]); // experts
    want.extend_from_slice(&[2, 0, 0, 0]); // d
    want.push(0); // fp32
    want.extend_from_slice(&[0, 0, 0, 0]); // block size
    want.resize(64, 0);
    for v in [1.0f32, -2.0, 0.5, 0.0] {
        want.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(bytes, want);

    let h = LutFileHeader::new(3, 7, 2, 8, LutDtype::Nf3, 4).unwrap();
    let b = h.to_bytes();
    assert_eq!(b[28], 3);
    assert_eq!(&b[29..33], &[4, 0, 0, 0]);
    assert!(b[33..].iter().all(|&x| x == 0));
    assert_eq!(LutFileHeader::from_bytes(&b).unwrap(), h);
}

#[test]
fn fp32_round_trip_is_bit_exact() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    let tables = random_tables(3, 11, 2, 8, 1);
    let h = write_lut(&tables, &path, LutDtype::Fp32, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    assert_eq!(*lut.header(), h);
    assert_eq!((h.n_layers, h.vocab, h.n_experts, h.d), (3, 11, 2, 8));
    let all: Vec<u32> = (0..11).collect();
    for t in &tables {
        let g = lut.gather(t.layer, &all).unwrap();
        let a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = t.values.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn fp16_round_trip_matches_rounded_source() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    let tables = random_tables(2, 9, 3, 4, 2);
    write_lut(&tables, &path, LutDtype::Fp16, 0).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 64 + 2 * 2 * 9 * 3 * 4);
    let lut = open_lut(&path).unwrap();
    let all: Vec<u32> = (0..9).collect();
    for t in &tables {
        let g = lut.gather(t.layer, &all).unwrap();
        let want: Vec<f32> = t.values.data().iter().map(|&v| f16::from_f32(v).to_f32()).collect();
        assert_eq!(g.data(), want.as_slice());
    }
}

#[test]
fn gather_matches_builder_output() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.lut");
    let cfg = ModelConfig::mole(2, 16, 2, 12, 10, 3, 23);
    let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let (_, tables) = reparameterize(&p).unwrap();
    write_lut(&tables, &path, LutDtype::Fp32, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    for t in &tables {
        for id in 0..23u32 {
            let g = lut.gather(t.layer, &[id]).unwrap();
            for j in 0..3 {
                assert_eq!(&g.data()[j * 16..(j + 1) * 16], t.row(id as usize, j));
            }
        }
    }
}

#[test]
fn file_size_arithmetic() {
    let h = LutFileHeader::new(12, 50000, 4, 768, LutDtype::Fp16, 0).unwrap();
    assert_eq!(h.file_bytes().unwrap(), 64 + 2 * 1_843_200_000);
    assert!((h.file_bytes().unwrap() as f64 - 3.69e9).abs() < 0.01e9);
    let q = LutFileHeader::new(12, 50000, 4, 768, LutDtype::Nf3, 128).unwrap();
    let ratio = q.payload_bytes().unwrap() as f64 / h.payload_bytes().unwrap() as f64;
    assert!((ratio - 50.0 / 256.0).abs() < 1e-12);
    assert!((q.payload_bytes().unwrap() as f64 - 0.72e9).abs() < 0.01e9);
    let q4 = LutFileHeader::new(12, 50000, 4, 768, LutDtype::Nf4, 768).unwrap();
    let r4 = q4.payload_bytes().unwrap() as f64 / h.payload_bytes().unwrap() as f64;
    assert!((r4 - compression_ratio(4, 768).unwrap()).abs() < 1e-12);
}

#[test]
fn header_validation() {
    assert!(LutFileHeader::new(1, 1, 1, 768, LutDtype::Nf4, 0).is_err());
    assert!(LutFileHeader::new(1, 1, 1, 768, LutDtype::Nf4, 100).is_err());
    assert!(LutFileHeader::new(1, 1, 1, 768, LutDtype::Fp16, 128).is_err());
    assert!(matches!(
        LutFileHeader::new(usize::MAX, 1, 1, 1, LutDtype::Fp32, 0),
        Err(LutError::DimensionOverflow)
    ));
    let mut b = LutFileHeader::new(1, 1, 1, 4, LutDtype::Fp32, 0).unwrap().to_bytes();
    b[28] = 9;
    assert_eq!(LutFileHeader::from_bytes(&b), Err(LutError::UnknownDtype(9)));
}

#[test]
fn open_rejects_damaged_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    write_lut(&random_tables(2, 5, 2, 4, 3), &path, LutDtype::Fp16, 0).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert_eq!(lut_err(open_lut(&path).unwrap_err()), LutError::NotALutFile);

    fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(
        lut_err(open_lut(&path).unwrap_err()),
        LutError::PayloadLengthMismatch { .. }
    ));

    let mut bad = good.clone();
    bad.push(0);
    fs::write(&path, &bad).unwrap();
    assert!(matches!(
        lut_err(open_lut(&path).unwrap_err()),
        LutError::PayloadLengthMismatch { .. }
    ));

    let mut bad = good.clone();
    bad[8] = 2;
    fs::write(&path, &bad).unwrap();
    assert_eq!(
        lut_err(open_lut(&path).unwrap_err()),
        LutError::VersionMismatch { found: 2, expected: 1 }
    );

    fs::write(&path, &good[..20]).unwrap();
    assert!(open_lut(&path).is_err());
    fs::write(&path, &good).unwrap();
    assert!(open_lut(&path).is_ok());
}

#[test]
fn write_rejects_inconsistent_tables() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    let mut t = random_tables(2, 5, 2, 4, 3);
    t[1].layer = 0;
    assert!(write_lut(&t, &path, LutDtype::Fp32, 0).is_err());
    assert!(write_lut(&[], &path, LutDtype::Fp32, 0).is_err());
    assert!(write_lut(&random_tables(1, 5, 2, 6, 3), &path, LutDtype::Nf4, 4).is_err());
}

#[test]
fn gather_repeats_and_meters() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    write_lut(&random_tables(2, 7, 3, 8, 4), &path, LutDtype::Fp16, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    let g = lut.gather(1, &[5, 5]).unwrap();
    assert_eq!(g.shape(), &[2, 3, 8]);
    assert_eq!(g.data()[..24], g.data()[24..]);
    assert_eq!(lut.bytes_read(), 2 * 3 * 8 * 2);

    lut.reset_meter();
    let d = lut.gather_dedup(1, &[5, 5, 2]).unwrap();
    assert_eq!(d, lut.gather(1, &[5, 5, 2]).unwrap());
    assert_eq!(lut.bytes_read(), (2 + 3) * 3 * 8 * 2);

    assert!(lut.gather(2, &[0]).is_err());
    assert!(lut.gather(0, &[7]).is_err());
    assert!(lut.prefetch(0, &[9]).is_err());
}

#[test]
fn per_step_transfer_at_410m_scale() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("big.lut");
    let tables = random_tables(24, 2, 4, 1024, 5);
    write_lut(&tables, &path, LutDtype::Fp16, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    for l in 0..24 {
        lut.gather(l, &[1]).unwrap();
    }
    assert_eq!(lut.bytes_read(), 196_608);
}

#[test]
fn prefetch_contract() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    write_lut(&random_tables(3, 13, 2, 8, 6), &path, LutDtype::Nf4, 4).unwrap();
    let lut = open_lut(&path).unwrap();
    let ids = [3u32, 12, 0, 3];
    let mut a = lut.prefetch(0, &ids).unwrap();
    let mut b = lut.prefetch(2, &[7]).unwrap();
    assert_eq!(b.wait().unwrap(), lut.gather(2, &[7]).unwrap());
    assert_eq!(a.wait().unwrap(), lut.gather(0, &ids).unwrap());
    assert!(a.is_consumed());
    assert!(matches!(a.wait(), Err(Error::Lut(LutError::TicketConsumed))));

    lut.reset_meter();
    lut.prefetch(1, &ids).unwrap().wait().unwrap();
    let via_ticket = lut.bytes_read();
    lut.reset_meter();
    lut.gather(1, &ids).unwrap();
    assert_eq!(lut.bytes_read(), via_ticket);
}

#[test]
fn concurrent_readers_agree() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("t.lut");
    write_lut(&random_tables(2, 50, 2, 8, 7), &path, LutDtype::Fp32, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    let want: Vec<_> = (0..50u32).map(|i| lut.gather(1, &[i]).unwrap()).collect();
    std::thread::scope(|s| {
        for t in 0..4 {
            let lut = lut.clone();
            let want = &want;
            s.spawn(move || {
                for i in (t..50).step_by(4) {
                    assert_eq!(lut.gather(1, &[i as u32]).unwrap(), want[i]);
                }
            });
        }
    });
}

/// Normal-float construction: N(0,1) quantiles at evenly spaced
/// probabilities from `offset` down to 0.5 on each side, joined at zero and
/// scaled to [-1, 1].
fn nf_oracle(bits: u32) -> Vec<f64> {
    let n = Normal::standard();
    let offset = 0.9677083;
    let half = 1usize << (bits - 1);
    let space = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| offset + (0.5 - offset) * i as f64 / (count - 1) as f64)
            .collect()
    };
    let pos = space(half + 1);
    let neg = space(half);
    let mut v: Vec<f64> = pos[..half].iter().map(|&p| n.inverse_cdf(p)).collect();
    v.extend(neg[..half - 1].iter().map(|&p| -n.inverse_cdf(p)));
    v.push(0.0);
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut v: Vec<f64> = v.iter().map(|x| x / m).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn codebooks_match_normal_quantiles() {
    for bits in [3, 4] {
        let want = nf_oracle(bits);
        let got = codebook(bits).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{bits} bits: {g} vs {w}");
        }
    }
    assert!(codebook(2).is_err());
}

fn exhaustive_nearest(cb: &[f32], x: f32) -> usize {
    let mut best = 0;
    for (i, &c) in cb.iter().enumerate() {
        if (x - c).abs() < (x - cb[best]).abs() {
            best = i;
        }
    }
    best
}

#[test]
fn gaussian_row_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (bits, bs) in [(4u32, 768usize), (3, 128), (4, 64)] {
        let row: Vec<f32> = (0..768).map(|_| StandardNormal.sample(&mut rng)).collect();
        let q = quantize_row(&row, bits, bs).unwrap();
        assert_eq!(q.len(), 768 / bs * block_bytes(bits, bs));
        let x = dequantize_row(&q, bits, bs, 768).unwrap();
        let cb = codebook(bits).unwrap();
        let gap = max_codebook_gap(bits).unwrap();
        for (b, block) in row.chunks(bs).enumerate() {
            let scale = f16::from_le_bytes([q[b * block_bytes(bits, bs)], q[b * block_bytes(bits, bs) + 1]]).to_f32();
            let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(scale >= absmax && f16::from_f32(absmax).to_f32() <= scale);
            for (i, &v) in block.iter().enumerate() {
                let want = cb[exhaustive_nearest(cb, v / scale)] * scale;
                let got = x[b * bs + i];
                assert_eq!(got, want);
                assert!((v - got).abs() <= scale * gap / 2.0 * (1.0 + 1e-6));
                assert!(got.abs() <= scale);
            }
        }
    }
}

#[test]
fn quantized_file_round_trip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("q.lut");
    let tables = random_tables(2, 6, 2, 16, 8);
    write_lut(&tables, &path, LutDtype::Nf3, 8).unwrap();
    let lut = open_lut(&path).unwrap();
    assert_eq!(
        fs::metadata(&path).unwrap().len(),
        HEADER_BYTES + 2 * 6 * 2 * 2 * block_bytes(3, 8) as u64
    );
    let g = lut.gather(1, &[4]).unwrap();
    for j in 0..2 {
        let q = quantize_row(tables[1].row(4, j), 3, 8).unwrap();
        assert_eq!(
            &g.data()[j * 16..(j + 1) * 16],
            dequantize_row(&q, 3, 8, 16).unwrap().as_slice()
        );
    }
}

#[test]
fn dtype_names_parse() {
    for d in [LutDtype::Fp32, LutDtype::Fp16, LutDtype::Nf4, LutDtype::Nf3] {
        assert_eq!(d.name().parse::<LutDtype>().unwrap(), d);
        assert_eq!(LutDtype::from_code(d.code()).unwrap(), d);
    }
    assert!("int8".parse::<LutDtype>().is_err());
}

proptest! {
    #[test]
    fn quantization_error_is_bounded(
        values in prop::collection::vec(-100.0f32..100.0, 32),
        bits in 3u32..=4,
        bs in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32]),
    ) {
        let q = quantize_row(&values, bits, bs).unwrap();
        let x = dequantize_row(&q, bits, bs, 32).unwrap();
        let gap = max_codebook_gap(bits).unwrap();
        for (b, block) in values.chunks(bs).enumerate() {
            let off = b * block_bytes(bits, bs);
            let scale = f16::from_le_bytes([q[off], q[off + 1]]).to_f32();
            for (i, &v) in block.iter().enumerate() {
                prop_assert!((v - x[b * bs + i]).abs() <= scale * gap / 2.0 * (1.0 + 1e-6));
            }
        }
    }
}
