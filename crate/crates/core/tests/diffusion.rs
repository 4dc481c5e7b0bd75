use dentoforge::jawgraph::{JawGraph, JawSide, ToothId, LAYOUT_DIM};
use dentoforge::layoutdiffusion::*;
use dentoforge::synthjaw::{mask_missing, sample_jaw, ArchParams};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn jaw(seed: u64) -> JawGraph {
    let side = if seed.is_multiple_of(2) { JawSide::Upper } else { JawSide::Lower };
    sample_jaw(&ArchParams::default_for(side), seed).unwrap()
}

fn small_config(blocks: usize) -> DenoiserConfig {
    DenoiserConfig {
        blocks,
        heads: 2,
        width: 16,
        ffn_mult: 2,
        dropout: 0.1,
    }
}

fn model(config: DenoiserConfig, t: usize, data: &[JawGraph]) -> LayoutModel {
    LayoutModel {
        denoiser: Denoiser::new(config, 7).unwrap(),
        normalizer: Normalizer::fit(data),
        schedule: make_schedule(t, ScheduleKind::Cosine).unwrap(),
    }
}

fn masked(graph: &JawGraph, ids: &[u8]) -> (JawGraph, TextEmbedding) {
    let ids: Vec<ToothId> = ids.iter().map(|&i| ToothId(i)).collect();
    let (source, _) = mask_missing(graph, &ids).unwrap();
    let text = embed_text(&missing_prompt(&source)).unwrap();
    (source, text)
}

struct Oracle<'a> {
    x0: &'a [[f64; LAYOUT_DIM]],
    schedule: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(
        &self,
        _input: &GraphInput,
        x: &[[f64; LAYOUT_DIM]],
        t: usize,
        _text: &TextEmbedding,
    ) -> Vec<[f64; LAYOUT_DIM]> {
        let (a, s) = (self.schedule.alpha[t], self.schedule.sigma[t]);
        x.iter()
            .zip(self.x0)
            .map(|(xi, x0)| std::array::from_fn(|c| (xi[c] - a * x0[c]) / s))
            .collect()
    }
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    let data: Vec<JawGraph> = (0..4).map(jaw).collect();
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let base = model(small_config(2), 100, &data);
    let batch = make_examples(&data, &cfg, 0).unwrap();
    let (_, grads) = train_step(&base, &batch, 11, false).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..3 {
        let dir: Vec<Vec<f64>> = base
            .denoiser
            .params
            .iter()
            .map(|p| (0..p.data.len()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.data.iter().zip(d).map(|(a, b)| a * b))
            .sum();
        let h = 1e-4;
        let shifted = |sign: f64| {
            let mut m = base.clone();
            for (p, d) in m.denoiser.params.iter_mut().zip(&dir) {
                for (x, dx) in p.data.iter_mut().zip(d) {
                    *x += sign * h * dx;
                }
            }
            train_step(&m, &batch, 11, false).unwrap().0
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "trial {trial}: analytic {analytic} numeric {numeric} rel {rel}");
    }
}

#[test]
fn oracle_denoiser_has_zero_loss() {
    let data: Vec<JawGraph> = (0..6).map(jaw).collect();
    let m = model(small_config(1), 1000, &data);
    let examples = make_examples(&data, &TrainConfig::default(), 0).unwrap();
    for (k, ex) in examples.iter().enumerate() {
        let noised = noise_example(&m, ex, k as u64).unwrap();
        let oracle = Oracle {
            x0: &noised.x0,
            schedule: &m.schedule,
        };
        let pred = oracle.predict_noise(&noised.input, &noised.xt, noised.t, &ex.text);
        assert!(noise_mse(&pred, &noised) < 1e-20);
        // the untrained model's loss is positive
        let pred = m.denoiser.predict(&noised.input, &noised.xt, noised.t, m.schedule.t, &ex.text);
        assert!(noise_mse(&pred, &noised) > 0.0);
    }
}

#[test]
fn forward_noise_is_uncorrelated_with_input_at_last_step() {
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = make_schedule(1000, kind).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let x: Vec<[f64; 8]> = (0..n).map(|_| std::array::from_fn(|_| rng.sample(StandardNormal))).collect();
        let eps: Vec<[f64; 8]> = (0..n).map(|_| std::array::from_fn(|_| rng.sample(StandardNormal))).collect();
        let out = forward_noise(&x, &vec![true; n], 1000, &eps, &s).unwrap();
        // pooled over all channels of the 10^3 layout draws
        let a: Vec<f64> = x.iter().flatten().copied().collect();
        let b: Vec<f64> = out.iter().flatten().copied().collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.05, "{kind:?}: correlation {corr}");
    }
}

#[test]
fn single_step_oracle_inversion_recovers_layouts() {
    let truth = jaw(20);
    let data = vec![truth.clone()];
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let mut m = model(small_config(1), 1, &data);
        m.schedule = make_schedule(1, kind).unwrap();
        let (source, text) = masked(&truth, &[13, 26, 21]);
        let input = GraphInput::new(&source, &m.normalizer).unwrap();
        let x0: Vec<[f64; 8]> = input
            .ids
            .iter()
            .zip(&input.categories)
            .map(|(id, &c)| {
                let l = truth.nodes[truth.find(*id).unwrap()].layout.unwrap();
                m.normalizer.normalize(c, &l)
            })
            .collect();
        let oracle = Oracle {
            x0: &x0,
            schedule: &m.schedule,
        };
        let out = sample_layout_with(&oracle, &m.normalizer, &source, &text, &m.schedule, 1, 9).unwrap();
        for id in [13, 26, 21] {
            let got = out.nodes[out.find(ToothId(id)).unwrap()].layout.unwrap().to_array();
            let want = truth.nodes[truth.find(ToothId(id)).unwrap()].layout.unwrap().to_array();
            for c in 0..8 {
                assert!((got[c] - want[c]).abs() < 1e-6, "{kind:?} tooth {id} ch {c}: {} vs {}", got[c], want[c]);
            }
        }
    }
}

#[test]
fn schedule_mismatch_is_rejected() {
    let g = jaw(1);
    let m = model(small_config(1), 100, std::slice::from_ref(&g));
    let (source, text) = masked(&g, &[41]);
    let other = make_schedule(50, ScheduleKind::Cosine).unwrap();
    assert!(matches!(
        sample_layout(&m, &source, &text, &other, 10, 0),
        Err(DiffusionError::ScheduleMismatch { model: 100, schedule: 50 })
    ));
}

#[test]
fn nothing_missing_returns_source() {
    let g = jaw(2);
    let m = model(small_config(1), 100, std::slice::from_ref(&g));
    let text = embed_text("complete jaw").unwrap();
    let out = sample_layout(&m, &g, &text, &m.schedule, 10, 0).unwrap();
    assert_eq!(out, g);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_keeps_observed_layouts_and_fills_missing(seed in 0u64..1000, count in 1usize..5) {
        let g = jaw(seed);
        let m = model(small_config(1), 50, std::slice::from_ref(&g));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u8> = g.nodes.choose_multiple(&mut rng, count).map(|n| n.tooth_id.0).collect();
        let (source, text) = masked(&g, &ids);
        let out = sample_layout(&m, &source, &text, &m.schedule, 10, seed).unwrap();
        prop_assert_eq!(out.nodes.len(), source.nodes.len());
        for (a, b) in out.nodes.iter().zip(&source.nodes) {
            prop_assert!(a.layout.is_some());
            prop_assert!(a.layout.unwrap().to_array().iter().all(|v| v.is_finite()));
            if !b.missing {
                prop_assert_eq!(a.layout.unwrap().to_array().map(f64::to_bits), b.layout.unwrap().to_array().map(f64::to_bits));
            }
        }
    }

    #[test]
    fn sampling_is_permutation_equivariant(seed in 0u64..1000, count in 1usize..4) {
        let g = jaw(seed);
        let m = model(small_config(2), 50, std::slice::from_ref(&g));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let ids: Vec<u8> = g.nodes.choose_multiple(&mut rng, count).map(|n| n.tooth_id.0).collect();
        let (source, text) = masked(&g, &ids);
        let mut nodes = source.nodes.clone();
        nodes.shuffle(&mut rng);
        let shuffled = JawGraph::new(source.jaw_side, nodes).unwrap();
        let a = sample_layout(&m, &source, &text, &m.schedule, 10, seed).unwrap();
        let b = sample_layout(&m, &shuffled, &text, &m.schedule, 10, seed).unwrap();
        for node in &a.nodes {
            let other = &b.nodes[b.find(node.tooth_id).unwrap()];
            prop_assert_eq!(node.layout.unwrap().to_array().map(f64::to_bits), other.layout.unwrap().to_array().map(f64::to_bits));
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let g = jaw(4);
    let m = model(small_config(1), 50, std::slice::from_ref(&g));
    let (source, text) = masked(&g, &[16, 23]);
    let a = sample_layout(&m, &source, &text, &m.schedule, 10, 5).unwrap();
    let b = sample_layout(&m, &source, &text, &m.schedule, 10, 5).unwrap();
    let c = sample_layout(&m, &source, &text, &m.schedule, 10, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn resumed_training_reproduces_next_epoch_loss() {
    let data: Vec<JawGraph> = (0..12).map(jaw).collect();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        lr: 2e-3,
        seed: 8,
        ..TrainConfig::default()
    };
    let schedule = make_schedule(200, ScheduleKind::Cosine).unwrap();
    let mut trainer = Trainer::new(&data, small_config(2), schedule, cfg).unwrap();
    trainer.run_epoch(&data).unwrap();
    trainer.run_epoch(&data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("layout.ckpt");
    Checkpoint::from_trainer(&trainer).save(&path).unwrap();

    let expected = trainer.run_epoch(&data).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
    assert_eq!(resumed.epoch, 2);
    assert_eq!(resumed.history, trainer.history[..2]);
    let got = resumed.run_epoch(&data).unwrap();
    assert!((got - expected).abs() < 1e-6, "resumed {got} vs continuous {expected}");
}

#[test]
fn corrupt_checkpoint_reports_format_error() {
    let g = jaw(0);
    let m = model(small_config(1), 10, &[g]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&m).save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() - 100;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, CheckpointError::ChecksumMismatch { .. }), "{err}");
    bytes.truncate(20);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Truncated { .. })));
}

#[test]
fn loaded_model_samples_like_the_original() {
    let data: Vec<JawGraph> = (0..3).map(jaw).collect();
    let m = model(small_config(1), 30, &data);
    let back = Checkpoint::from_bytes(&Checkpoint::from_model(&m).to_bytes().unwrap())
        .unwrap()
        .model;
    assert_eq!(back.normalizer, m.normalizer);
    let (source, text) = masked(&data[0], &[12]);
    let a = sample_layout(&m, &source, &text, &m.schedule, 10, 1).unwrap();
    let b = sample_layout(&back, &source, &text, &back.schedule, 10, 1).unwrap();
    let (la, lb) = (
        a.nodes[a.find(ToothId(12)).unwrap()].layout.unwrap(),
        b.nodes[b.find(ToothId(12)).unwrap()].layout.unwrap(),
    );
    // parameters are stored as f32
    assert!((la.center() - lb.center()).norm() < 1e-3);
}
