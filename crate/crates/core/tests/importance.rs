use mcsh::importance::{
    collect_stats, compute_quant_error, errors_from_json, errors_to_json, importance_cost,
    stats_from_json, stats_to_json, Calibration, CalibrationSet, ExpertStat, ExpertStats,
    Provenance, QuantErrorTable,
};
use mcsh::moe::{ExpertWeights, MarkovCorpus, MoEConfig, MoEModel};
use mcsh::quant::quantize_expert;
use mcsh::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> MoEConfig {
    MoEConfig {
        num_layers: 2,
        hidden: 16,
        ffn_inner: 24,
        num_experts: 6,
        top_k: 2,
        vocab: 64,
        num_shared_experts: 1,
        seed,
    }
}

fn calib_for(cfg: &MoEConfig, tokens: usize, seed: u64) -> CalibrationSet {
    CalibrationSet::sample(&MarkovCorpus::new(cfg.vocab, cfg.seed), tokens, 32, seed)
}

#[test]
fn sampling_respects_token_count() {
    let cfg = small_config(0);
    let c = calib_for(&cfg, 100, 3);
    assert_eq!(c.num_tokens(), 100);
    assert_eq!(c.sequences.len(), 4);
    let (ids, counts) = c.histogram();
    assert_eq!(counts.iter().sum::<usize>(), 100);
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn accounting_identities() {
    for seed in 0..4 {
        let cfg = small_config(seed);
        let model = MoEModel::random(&cfg).unwrap();
        // N = 512 is a power of two, so φ sums are exact in floating point
        let stats = collect_stats(&model, &calib_for(&cfg, 512, seed + 10)).unwrap();
        assert_eq!(stats.total_tokens, 512);
        for layer in &stats.layers {
            assert_eq!(layer.iter().map(|s| s.n).sum::<usize>(), 512 * cfg.top_k);
            assert_eq!(layer.iter().map(|s| s.phi).sum::<f64>(), cfg.top_k as f64);
            assert!((layer.iter().map(|s| s.w).sum::<f64>() - 1.0).abs() < 1e-9);
            for s in layer {
                assert!(s.w <= s.phi && (0.0..=1.0).contains(&s.phi));
            }
        }
    }
}

#[test]
fn single_token_statistics() {
    let cfg = small_config(1);
    let model = MoEModel::random(&cfg).unwrap();
    let calib = CalibrationSet::from_sequences(vec![vec![5]], 0);
    let stats = collect_stats(&model, &calib).unwrap();
    let routing = {
        let mut tape = mcsh::tensor::Tape::new();
        let b = model.bind(&mut tape, false);
        model.forward(&mut tape, &b, &[5], None).unwrap().layers
    };
    for (l, layer) in stats.layers.iter().enumerate() {
        let rec = routing[l].record(0);
        for (e, s) in layer.iter().enumerate() {
            match rec.indices.iter().position(|&i| i == e) {
                Some(slot) => {
                    assert_eq!((s.n, s.phi), (1, 1.0));
                    assert_eq!(s.w, rec.weights[slot]);
                }
                None => assert_eq!((s.n, s.phi, s.w), (0, 0.0, 0.0)),
            }
        }
    }
}

#[test]
fn empty_calibration_rejected() {
    let model = MoEModel::random(&small_config(0)).unwrap();
    assert!(collect_stats(&model, &CalibrationSet::from_sequences(vec![], 0)).is_err());
}

#[test]
fn exchangeable_gating_frequencies_near_k_over_e() {
    // identity gate on a pure-residual model: logits are the normalised random
    // embedding, so expert choice is exchangeable and independent across ids
    let (e, k, n) = (8usize, 2usize, 4096usize);
    let cfg = MoEConfig {
        num_layers: 1,
        hidden: e,
        ffn_inner: 4,
        num_experts: e,
        top_k: k,
        vocab: n,
        num_shared_experts: 0,
        seed: 17,
    };
    let mut model = MoEModel::random(&cfg).unwrap();
    model.blocks[0].dense = ExpertWeights::zeros(e, 4);
    model.blocks[0].moe.gate = Tensor::eye(e);
    let calib = CalibrationSet::from_sequences(vec![(0..n).collect()], 0);
    let stats = collect_stats(&model, &calib).unwrap();
    let p = k as f64 / e as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for s in &stats.layers[0] {
        assert!(
            (s.phi - p).abs() <= 3.0 * sigma,
            "phi {} vs {p} ± {}",
            s.phi,
            3.0 * sigma
        );
    }
}

fn naive_eps(
    model: &MoEModel,
    calib: &CalibrationSet,
    layer: usize,
    expert: usize,
    q: &ExpertWeights,
) -> f64 {
    let mut pert = model.clone();
    pert.blocks[layer].moe.experts[expert] = q.clone();
    let mut total = 0.0;
    for s in &calib.sequences {
        let a = model.logits(s).unwrap();
        let b = pert.logits(s).unwrap();
        total += a.sub(&b).unwrap().frobenius_norm();
    }
    total / calib.sequences.len() as f64
}

#[test]
fn quant_error_matches_naive_oracle() {
    let cfg = small_config(2);
    let model = MoEModel::random(&cfg).unwrap();
    let calib = calib_for(&cfg, 200, 4);
    let cal = Calibration::collect(&model, &calib).unwrap();
    let table = cal.quant_error_table(&model, 8).unwrap();
    for layer in 0..2 {
        for expert in 0..cfg.num_experts {
            for bits in [1u8, 2, 3] {
                let q = quantize_expert(
                    &model.blocks[layer].moe.experts[expert],
                    bits,
                    Some(&cal.hessians[layer][expert]),
                    8,
                )
                .unwrap()
                .dequantize()
                .unwrap();
                let want = naive_eps(&model, &calib, layer, expert, &q);
                let got = table.get(layer, expert, bits);
                assert!(
                    (got - want).abs() <= 1e-9 * want.max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }
    let single = compute_quant_error(&model, &calib, 1, 2, 3, 8).unwrap();
    assert_eq!(single, table.get(1, 2, 3));
    assert!(compute_quant_error(&model, &calib, 1, 2, 4, 8).is_err());
}

#[test]
fn unrouted_expert_and_identity_quantizer_give_zero() {
    let cfg = small_config(3);
    let model = MoEModel::random(&cfg).unwrap();
    let calib = CalibrationSet::from_sequences(vec![vec![7, 7, 7]], 0);
    let cal = Calibration::collect(&model, &calib).unwrap();
    let table = cal.quant_error_table(&model, 8).unwrap();
    for (l, layer) in cal.stats.layers.iter().enumerate() {
        for (e, s) in layer.iter().enumerate() {
            if s.n == 0 {
                assert_eq!(table.layers[l][e], [0.0; 3]);
                assert_eq!(
                    compute_quant_error(&model, &calib, l, e, 1, 8).unwrap(),
                    0.0
                );
            } else {
                assert!(table.layers[l][e][0] > 0.0);
            }
        }
    }
    let identity = cal
        .quant_error_table_with(&model, |_, _, w, _| Ok(w.clone()))
        .unwrap();
    assert!(identity.layers.iter().flatten().all(|e| *e == [0.0; 3]));
}

#[test]
fn more_bits_mean_less_error_on_active_experts() {
    let cfg = small_config(4);
    let model = MoEModel::random(&cfg).unwrap();
    let calib = calib_for(&cfg, 256, 5);
    let cal = Calibration::collect(&model, &calib).unwrap();
    let table = cal.quant_error_table(&model, 8).unwrap();
    let (mut active, mut ordered) = (0, 0);
    for (l, layer) in table.layers.iter().enumerate() {
        for (e, eps) in layer.iter().enumerate() {
            if cal.stats.layers[l][e].n > 0 {
                active += 1;
                assert!(eps[2] <= eps[0]);
                if eps[0] >= eps[1] && eps[1] >= eps[2] {
                    ordered += 1;
                }
            }
        }
    }
    assert!(ordered * 10 >= active * 9, "{ordered}/{active}");
}

fn toy_stats() -> (ExpertStats, QuantErrorTable) {
    let stats = ExpertStats {
        total_tokens: 4,
        top_k: 1,
        layers: vec![vec![
            ExpertStat {
                n: 3,
                phi: 0.75,
                w: 0.6,
            },
            ExpertStat {
                n: 1,
                phi: 0.25,
                w: 0.4,
            },
            ExpertStat {
                n: 0,
                phi: 0.0,
                w: 0.0,
            },
        ]],
    };
    let errors = QuantErrorTable {
        layers: vec![vec![[4.0, 2.0, 1.0], [8.0, 3.0, 0.5], [0.0, 0.0, 0.0]]],
    };
    (stats, errors)
}

#[test]
fn importance_cost_cases() {
    let (stats, errors) = toy_stats();
    let c = importance_cost(&stats, &errors, 1.0, 1.0, 1.0).unwrap();
    assert_eq!(
        c.layers[0][0],
        [0.75 * 0.6 * 4.0, 0.75 * 0.6 * 2.0, 0.75 * 0.6 * 1.0]
    );
    assert_eq!(
        c.layers[0][1],
        [0.25 * 0.4 * 8.0, 0.25 * 0.4 * 3.0, 0.25 * 0.4 * 0.5]
    );
    assert_eq!(c.layers[0][2], [0.0; 3]);
    let f = importance_cost(&stats, &errors, 0.0, 0.0, 1.0).unwrap();
    assert_eq!(f.layers, errors.layers);
    let g = importance_cost(&stats, &errors, 2.0, 0.5, 2.0).unwrap();
    assert_eq!(
        g.layers[0][1][1],
        0.25f64.powf(2.0) * 0.4f64.powf(0.5) * 9.0
    );
    assert!(importance_cost(&stats, &errors, -1.0, 1.0, 1.0).is_err());
}

#[test]
fn json_round_trips() {
    let (stats, errors) = toy_stats();
    let prov = Provenance {
        config_hash: "abc".into(),
        seed: 9,
    };
    let s = stats_to_json(&stats, &prov).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(v["layers"]["0"][1]["n"], 1);
    assert_eq!(stats_from_json(&s).unwrap(), (stats, prov.clone()));
    let e = errors_to_json(&errors, &prov).unwrap();
    let v: serde_json::Value = serde_json::from_str(&e).unwrap();
    assert_eq!(v["layers"]["0"][0]["eps2"], 2.0);
    assert_eq!(errors_from_json(&e).unwrap(), (errors, prov));
}

#[test]
fn hessians_weight_by_count() {
    let cfg = small_config(6);
    let model = MoEModel::random(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
    let cal = Calibration::collect(&model, &CalibrationSet::from_sequences(vec![seq], 0)).unwrap();
    for layer in &cal.hessians {
        for acc in layer {
            let samples = acc[0].samples();
            assert_eq!(samples, acc[1].samples());
            assert_eq!(samples, acc[2].samples());
        }
    }
    let per_layer: f64 = cal.hessians[0].iter().map(|a| a[0].samples()).sum();
    assert_eq!(per_layer, 80.0);
}
