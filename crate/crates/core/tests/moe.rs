use mcsh::moe::{
    checkpoint, gate_scores, gen_synthetic_model, train, ExpertWeights, MarkovCorpus, MoEConfig,
    MoEModel, TeacherConfig,
};
use mcsh::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64, shared: usize, k: usize) -> MoEConfig {
    MoEConfig {
        num_layers: 2,
        hidden: 8,
        ffn_inner: 12,
        num_experts: 4,
        top_k: k,
        vocab: 16,
        num_shared_experts: shared,
        seed,
    }
}

fn rms(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Every expert evaluated on `u`, non-selected ones weighted by zero.
fn dense_mixture(model: &MoEModel, layer: usize, u: &[f64]) -> Vec<f64> {
    let moe = &model.blocks[layer].moe;
    let e = moe.experts.len();
    let logits = row(u).matmul(&moe.gate).unwrap();
    let mx = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let scores: Vec<f64> = exps.iter().map(|x| x / z).collect();
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap().then(a.cmp(b)));
    let chosen = &order[..model.config.top_k];
    let mass: f64 = chosen.iter().map(|&i| scores[i]).sum();
    let mut w = vec![0.0; e];
    for &i in chosen {
        w[i] = scores[i] / mass;
    }
    let mut y = vec![0.0; u.len()];
    for (i, ex) in moe.experts.iter().enumerate() {
        let out = ex.apply(&row(u)).unwrap();
        for (acc, v) in y.iter_mut().zip(out.data()) {
            *acc += w[i] * v;
        }
    }
    if let Some(sh) = &moe.shared {
        y = add(&y, sh.apply(&row(u)).unwrap().data());
    }
    y
}

/// Whole-model reference built on the dense mixture.
fn reference_logits(model: &MoEModel, id: usize) -> Vec<f64> {
    let mut x = model.embed.row(id).to_vec();
    for (l, b) in model.blocks.iter().enumerate() {
        let h = add(&x, b.dense.apply(&row(&rms(&x))).unwrap().data());
        let u = rms(&h);
        x = add(&h, &dense_mixture(model, l, &u));
    }
    row(&rms(&x)).matmul(&model.head).unwrap().into_data()
}

#[test]
fn moe_forward_matches_dense_mixture() {
    for seed in 0..6 {
        for (shared, k) in [(1, 2), (0, 1), (0, 3), (1, 4)] {
            let model = MoEModel::random(&small_config(seed, shared, k)).unwrap();
            let ids: Vec<usize> = (0..16).collect();
            let logits = model.logits(&ids).unwrap();
            for &id in &ids {
                let want = reference_logits(&model, id);
                for (a, b) in logits.row(id).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9, "seed {seed} k {k}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn renormalised_weights_sum_to_one_and_k_slots() {
    let model = MoEModel::random(&small_config(3, 1, 2)).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let ids: Vec<usize> = (0..16).collect();
    let out = model.forward(&mut tape, &bound, &ids, None).unwrap();
    for lr in &out.layers {
        for t in 0..lr.tokens() {
            let r = lr.record(t);
            assert_eq!(r.indices.len(), 2);
            assert!(r.weights.iter().all(|w| *w > 0.0));
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(r.weights[0] >= r.weights[1]);
        }
    }
}

#[test]
fn single_identity_like_expert() {
    // k=1, expert 0 computes silu(x0)*x0 into output 0; others are zero
    let cfg = small_config(0, 1, 1);
    let mut model = MoEModel::random(&cfg).unwrap();
    let (h, f) = (cfg.hidden, cfg.ffn_inner);
    let mut e0 = ExpertWeights::zeros(h, f);
    let mut g = vec![0.0; h * f];
    g[0] = 1.0;
    e0.w_gate = Tensor::matrix(h, f, g.clone()).unwrap();
    e0.w_up = Tensor::matrix(h, f, g).unwrap();
    let mut d = vec![0.0; f * h];
    d[0] = 1.0;
    e0.w_down = Tensor::matrix(f, h, d).unwrap();
    let moe = &mut model.blocks[0].moe;
    for e in moe.experts.iter_mut().skip(1) {
        *e = ExpertWeights::zeros(h, f);
    }
    moe.experts[0] = e0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = Tensor::randn(&[3, h], 1.0, &mut rng);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let uv = tape.constant(u.clone());
    let (y, routing) = model.moe_forward(&mut tape, &bound, 0, uv, None).unwrap();
    let shared = model.blocks[0]
        .moe
        .shared
        .as_ref()
        .unwrap()
        .apply(&u)
        .unwrap();
    let f0 = e0.apply(&u).unwrap();
    for t in 0..3 {
        let rec = routing.record(t);
        assert_eq!(rec.weights, vec![1.0]);
        let w0 = if rec.indices[0] == 0 { 1.0 } else { 0.0 };
        for c in 0..h {
            let want = w0 * f0.at(t, c) + shared.at(t, c);
            assert!((tape.value(y).at(t, c) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_experts_make_selection_irrelevant() {
    let cfg = small_config(5, 0, 2);
    let mut model = MoEModel::random(&cfg).unwrap();
    let first = model.blocks[1].moe.experts[0].clone();
    for e in model.blocks[1].moe.experts.iter_mut() {
        *e = first.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = Tensor::randn(&[6, cfg.hidden], 1.0, &mut rng);
    let expect = first.apply(&u).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let uv = tape.constant(u);
    let (y, _) = model.moe_forward(&mut tape, &bound, 1, uv, None).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn logits_shape_and_positions() {
    let mut cfg = small_config(0, 1, 2);
    cfg.vocab = 8;
    let model = MoEModel::random(&cfg).unwrap();
    assert_eq!(model.logits(&[3]).unwrap().shape(), &[1, 8]);
    let l = model.logits(&[5, 5, 2, 5]).unwrap();
    assert_eq!(l.row(0), l.row(1));
    assert_eq!(l.row(0), l.row(3));
    assert!(model.logits(&[8]).is_err());
    let again = MoEModel::random(&cfg)
        .unwrap()
        .logits(&[5, 5, 2, 5])
        .unwrap();
    assert_eq!(l.data(), again.data());
}

#[test]
fn construction_at_toy_scale() {
    let model = MoEModel::random(&MoEConfig::default()).unwrap();
    let experts: usize = model.blocks.iter().map(|b| b.moe.experts.len()).sum();
    assert_eq!(experts, 32);
    assert!(model.blocks.iter().all(|b| b.moe.shared.is_some()));
}

#[test]
fn gate_scores_topk_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gate = Tensor::randn(&[6, 7], 2.0, &mut rng);
        let tok = Tensor::randn(&[6], 1.0, &mut rng);
        for k in 1..=7 {
            let r = gate_scores(&gate, &tok, k).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn teacher_training_lowers_loss_and_skews_routing() {
    let cfg = MoEConfig::default();
    let teacher = TeacherConfig {
        steps: 300,
        batch: 64,
        corpus_sequences: 256,
        ..TeacherConfig::default()
    };
    let (model, log) = gen_synthetic_model(&cfg, &teacher).unwrap();
    assert!(log.final_loss < log.initial_loss, "{log:?}");

    let corpus = MarkovCorpus::new(cfg.vocab, cfg.seed);
    let seqs = corpus.sample(32, 64, 4242);
    let ids: Vec<usize> = seqs.concat();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &bound, &ids, None).unwrap();
    let mut skewed = 0;
    for lr in &out.layers {
        let mut n = vec![0usize; cfg.num_experts];
        for &i in &lr.indices {
            n[i] += 1;
        }
        let max = *n.iter().max().unwrap() as f64;
        let min = *n.iter().min().unwrap() as f64;
        if min == 0.0 || max / min > 1.5 {
            skewed += 1;
        }
    }
    assert!(skewed * 2 >= cfg.num_layers, "only {skewed} skewed layers");
}

#[test]
fn checkpoint_round_trip() {
    let model = MoEModel::random(&small_config(11, 1, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn pair_loss_is_finite() {
    let model = MoEModel::random(&small_config(1, 0, 2)).unwrap();
    let corpus = MarkovCorpus::new(16, 1);
    let pairs = train::bigram_pairs(&corpus.sample(4, 10, 3));
    assert_eq!(pairs.len(), 36);
    assert!(train::pair_loss(&model, &pairs).unwrap().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn dense_mixture_oracle_random_models(seed in 0u64..10_000, k in 1usize..=4, shared in 0usize..=1) {
        let model = MoEModel::random(&small_config(seed, shared, k)).unwrap();
        let ids = [0usize, 7, 15];
        let logits = model.logits(&ids).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            for (a, b) in logits.row(r).iter().zip(reference_logits(&model, id)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
