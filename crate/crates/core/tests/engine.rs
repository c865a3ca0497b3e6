use mole::engine::{
    cache_capacity, decode, expected_loads, simulate_loads, step_latency, BandwidthModel, EngineConfig,
    ExpertCacheState, Routing, Runtime, METER_CSV_HEADER,
};
use mole::lut_store::{open_lut, write_lut, LutDtype};
use mole::model::{forward_with_routing, forward_with_state, DecodeState, Form, ModelConfig, ModelParams};
use mole::reparam::reparameterize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn prompts(lanes: usize, len: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lanes)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

fn mole_model(seed: u64) -> ModelParams<f32> {
    let cfg = ModelConfig::mole(2, 16, 2, 24, 12, 4, 29).with_max_seq(64);
    ModelParams::init_with_std(&cfg, seed, 0.2).unwrap()
}

#[test]
fn cache_update_examples() {
    let mut c = ExpertCacheState::new(1, cache_capacity(2, 1), 0);
    c.update(0, &[vec![3, 7]]);
    assert!(c.update(0, &[vec![3, 7]]).is_empty());
    assert_eq!(c.update(0, &[vec![1, 2]]).len(), 2);
    assert_eq!(cache_capacity(2, 8), 2);
    assert_eq!(cache_capacity(4, 1), 4);
}

#[test]
fn monte_carlo_loads_match_reported_averages() {
    let cases = [
        (10, 1, 1.6),
        (10, 8, 6.7),
        (10, 32, 8.0),
        (34, 1, 1.9),
        (34, 8, 12.3),
        (34, 32, 27.4),
    ];
    for (n, batch, want) in cases {
        let cap = cache_capacity(2, batch);
        let (mean, se) = simulate_loads(n, 2, batch, cap, 10_000, 42 + batch as u64);
        assert!((mean - want).abs() <= 0.2, "N={n} batch={batch}: {mean}");
        let exact = expected_loads(n, 2, batch, cap);
        assert!(
            (mean - exact).abs() <= 4.0 * se.max(1e-3),
            "N={n} batch={batch}: {mean} vs {exact}"
        );
        assert!((exact - want).abs() <= 0.1, "N={n} batch={batch}: closed form {exact}");
    }
    assert!((expected_loads(10, 2, 1, 2) - (2.0 - 4.0 / 10.0)).abs() < 1e-12);
    let (full, _) = simulate_loads(6, 6, 1, 6, 1000, 1);
    assert_eq!(full, 0.0);
}

#[test]
fn latency_arithmetic() {
    let bw = BandwidthModel {
        bytes_per_second: 16e9,
        fixed_overhead: 0.003,
    };
    assert_eq!(step_latency(0, &bw), 0.003);
    assert!((step_latency(16_000_000_000, &bw) - 1.003).abs() < 1e-12);
    let bw = BandwidthModel::default();
    let expert_bytes = 2 * 1024 * 2048 * 2;
    assert_eq!(expert_bytes, 8_388_608);
    let moe = expected_loads(10, 2, 1, 2) * 24.0 * expert_bytes as f64 / bw.bytes_per_second;
    assert!((moe - 0.020).abs() < 0.001, "{moe}");
    let mole = step_latency(196_608, &bw);
    assert!((mole - 12.3e-6).abs() < 0.1e-6, "{mole}");
    assert!(BandwidthModel::from_gbps(0.0).is_err());
}

#[test]
fn lut_decode_matches_train_form() {
    for seed in 0..4 {
        let p = mole_model(seed);
        let (infer, tables) = reparameterize(&p).unwrap();
        let ps = prompts(3, 5, 29, seed);
        let cfg = EngineConfig::default();
        let a = decode(&Runtime::mole_train(&p).unwrap(), &ps, 12, &cfg).unwrap();
        let b = decode(&Runtime::mole_tables(&infer, &tables).unwrap(), &ps, 12, &cfg).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert!(a.tokens.iter().all(|t| t.len() == 12));
        assert_eq!(a.meter.total_bytes(), 0);
    }
}

#[test]
fn file_backed_decode_meters_exact_bytes() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.lut");
    let p = mole_model(7);
    let (infer, tables) = reparameterize(&p).unwrap();
    write_lut(&tables, &path, LutDtype::Fp32, 0).unwrap();
    let lut = open_lut(&path).unwrap();
    let ps = prompts(2, 6, 29, 1);
    let cfg = EngineConfig::default();
    let mem = decode(&Runtime::mole_tables(&infer, &tables).unwrap(), &ps, 10, &cfg).unwrap();
    lut.reset_meter();
    let file = decode(&Runtime::mole_lut(&infer, &lut).unwrap(), &ps, 10, &cfg).unwrap();
    assert_eq!(mem.tokens, file.tokens);
    assert_eq!(mem.meter, file.meter);
    assert_eq!(file.meter.total_bytes(), lut.bytes_read());

    let (l, n, d) = (2u64, 4u64, 16u64);
    assert_eq!(file.meter.records[0].params, 2 * 6 * n * d * l);
    for r in file.meter.decode_records() {
        assert_eq!(r.params, 2 * n * d * l);
        assert_eq!(r.rows_fetched, 2 * n * l);
        assert_eq!(r.bytes, 2 * n * d * l * 4);
    }

    let fp16 = dir.path().join("h.lut");
    write_lut(&tables, &fp16, LutDtype::Fp16, 0).unwrap();
    let h = open_lut(&fp16).unwrap();
    let out = decode(&Runtime::mole_lut(&infer, &h).unwrap(), &ps, 4, &cfg).unwrap();
    assert_eq!(out.meter.decode_records()[0].bytes, 2 * n * d * l * 2);
    assert_eq!(out.meter.total_bytes(), h.bytes_read());
}

#[test]
fn mole_transfer_ignores_router_and_content() {
    let mut p = mole_model(3);
    let (infer, tables) = reparameterize(&p).unwrap();
    let cfg = EngineConfig::default();
    let base = decode(
        &Runtime::mole_tables(&infer, &tables).unwrap(),
        &prompts(4, 3, 29, 0),
        8,
        &cfg,
    )
    .unwrap();
    for layer in &mut p.layers {
        if let Some(r) = layer.router.as_mut() {
            r.data_mut().iter_mut().for_each(|v| *v *= -7.0);
        }
    }
    let (infer2, tables2) = reparameterize(&p).unwrap();
    let other = decode(
        &Runtime::mole_tables(&infer2, &tables2).unwrap(),
        &prompts(4, 3, 29, 9),
        8,
        &cfg,
    )
    .unwrap();
    let bytes = |o: &mole::engine::DecodeOutput| o.meter.records.iter().map(|r| r.bytes).collect::<Vec<_>>();
    assert_eq!(bytes(&base), bytes(&other));
    let dec = base.meter.decode_records();
    assert!(dec.windows(2).all(|w| w[0].bytes == w[1].bytes));
}

#[test]
fn moe_decode_follows_router_and_replays() {
    let cfg_m = ModelConfig::moe(2, 16, 2, 12, 6, 2, 29).with_max_seq(64);
    let p = ModelParams::<f32>::init_with_std(&cfg_m, 5, 0.2).unwrap();
    let ps = prompts(3, 4, 29, 2);
    let cfg = EngineConfig::default();
    let a = decode(&Runtime::moe(&p, Routing::Model).unwrap(), &ps, 10, &cfg).unwrap();

    // Router choice reproduces the plain forward pass token for token.
    for (lane, prompt) in ps.iter().enumerate() {
        let mut st = DecodeState::new(2);
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..10 {
            let ids = if out.is_empty() {
                seq.clone()
            } else {
                vec![*seq.last().unwrap()]
            };
            let logits = forward_with_state(&p, &ids, &mut st, Form::Train, None).unwrap();
            let t = mole::model::argmax(logits.row(logits.rows() - 1));
            out.push(t);
            seq.push(t);
        }
        assert_eq!(a.tokens[lane], out);
    }

    let trace = a.routing.clone().unwrap();
    assert_eq!(trace.steps.len(), 10);
    let b = decode(&Runtime::moe(&p, Routing::Trace(trace)).unwrap(), &ps, 10, &cfg).unwrap();
    assert_eq!(a, b);

    // Per layer at most min(N, lanes·k) experts can be new.
    let per_expert = 2 * 16 * 12;
    for r in a.meter.decode_records() {
        assert!(r.experts_loaded <= 2 * (3 * 2).min(6));
        assert!(r.params <= 2 * (3 * 2).min(6) * per_expert);
        assert_eq!(r.bytes, r.params * 2);
        assert_eq!(r.params, r.experts_loaded * per_expert);
    }
    let short = mole::engine::RoutingTrace { steps: vec![] };
    assert!(decode(&Runtime::moe(&p, Routing::Trace(short)).unwrap(), &ps, 2, &cfg).is_err());
}

#[test]
fn uniform_routing_single_lane_average() {
    let cfg_m = ModelConfig::moe(2, 16, 2, 8, 10, 2, 16).with_max_seq(1024);
    let p10 = ModelParams::<f32>::init(&cfg_m, 1).unwrap();
    let out = decode(
        &Runtime::moe(&p10, Routing::Uniform { seed: 3 }).unwrap(),
        &[vec![1]],
        1000,
        &EngineConfig::default(),
    )
    .unwrap();
    let s = out.meter.summary();
    assert!(
        (s.decode_experts_loaded_per_layer - 1.6).abs() < 0.1,
        "{}",
        s.decode_experts_loaded_per_layer
    );
    assert_eq!(out.meter.records[0].experts_loaded, 4);
}

#[test]
fn decode_is_deterministic() {
    let cfg_m = ModelConfig::moe(2, 16, 2, 12, 6, 2, 29).with_max_seq(64);
    let p = ModelParams::<f32>::init(&cfg_m, 5).unwrap();
    let ps = prompts(8, 3, 29, 4);
    let cfg = EngineConfig {
        cache_seed: 11,
        ..EngineConfig::default()
    };
    let run = || decode(&Runtime::moe(&p, Routing::Uniform { seed: 1 }).unwrap(), &ps, 20, &cfg).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn dense_has_no_transfers() {
    let p = ModelParams::<f32>::init(&ModelConfig::dense(2, 16, 2, 32, 29).with_max_seq(32), 0).unwrap();
    let out = decode(
        &Runtime::dense(&p).unwrap(),
        &prompts(2, 4, 29, 0),
        5,
        &EngineConfig::default(),
    )
    .unwrap();
    assert!(out.meter.records.iter().all(|r| r.bytes == 0 && r.sim_seconds == 0.0));
    assert!(out.routing.is_none());
    let csv = out.meter.to_csv();
    assert!(csv.starts_with(METER_CSV_HEADER));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn decode_rejects_bad_requests() {
    let p = ModelParams::<f32>::init(&ModelConfig::dense(1, 16, 2, 32, 29).with_max_seq(8), 0).unwrap();
    let rt = Runtime::dense(&p).unwrap();
    let cfg = EngineConfig::default();
    assert!(decode(&rt, &[vec![1]], 0, &cfg).is_err());
    assert!(decode(&rt, &[], 3, &cfg).is_err());
    assert!(decode(&rt, &[vec![]], 3, &cfg).is_err());
    assert!(decode(&rt, &[vec![29]], 3, &cfg).is_err());
    assert!(decode(&rt, &[vec![1; 6]], 4, &cfg).is_err());
    assert!(Runtime::moe(&p, Routing::Model).is_err());
    assert!(Runtime::mole_train(&p).is_err());
    let m = mole_model(1);
    assert!(Runtime::mole_train(&m).is_ok());
    let (infer, _) = reparameterize(&m).unwrap();
    assert!(Runtime::mole_train(&infer).is_err());
}

#[test]
fn identity_routing_hook_is_plain_forward() {
    let cfg_m = ModelConfig::moe(2, 16, 2, 12, 6, 2, 29);
    let p = ModelParams::<f64>::init(&cfg_m, 2).unwrap();
    let ids = [4u32, 8, 15, 16, 23];
    let mut s1 = DecodeState::new(2);
    let mut s2 = DecodeState::new(2);
    let a = forward_with_state(&p, &ids, &mut s1, Form::Train, None).unwrap();
    let mut seen = 0;
    let b = forward_with_routing(&p, &ids, &mut s2, &mut |_, c| {
        seen += 1;
        Ok(c)
    })
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(seen, 2);
}
