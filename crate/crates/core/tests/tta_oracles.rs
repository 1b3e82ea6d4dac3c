use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zad_core::pipeline::ScoreTrace;
use zad_core::store::predictions_to_bytes;
use zad_core::synth::{generate_corpus, SynthConfig};
use zad_core::tta::{
    adapt_and_detect, loss, loss_and_grad, project, sample, AdapterState, OracleMode, SampleSets, TtaConfig,
};
use zad_core::{detect, LabelMode, PipelineConfig, ThresholdPolicy};
use zad_testkit::{linalg, loss as oracle, stats};

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn cols(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

struct Case {
    state: AdapterState,
    frames: DMatrix<f64>,
    prototype: Vec<f64>,
    samples: SampleSets,
    beta: f64,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let d = rng.random_range(3..9);
    let t = rng.random_range(10..30);
    let k = rng.random_range(1..5);
    let mut state = AdapterState::identity(d);
    for v in state.visual.iter_mut().chain(state.text.iter_mut()) {
        *v += rng.random_range(-0.3..0.3);
    }
    let frames = DMatrix::from_fn(d, t, |_, _| rng.random_range(-1.0..1.0));
    let prototype: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let samples = SampleSets {
        positives: idx[..k].to_vec(),
        negatives: idx[k..2 * k].to_vec(),
    };
    Case {
        state,
        frames,
        prototype,
        samples,
        beta: rng.random_range(0.2..2.0),
    }
}

/// Largest relative gap between analytic and central-difference gradients.
fn gradient_error(c: &Case, h: f64) -> f64 {
    let (_, grads) = loss_and_grad(&c.state, &c.frames, &c.prototype, &c.samples, c.beta).unwrap();
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let analytic = if which == 0 { &grads.visual } else { &grads.text };
        for i in 0..analytic.len() {
            let mut plus = c.state.clone();
            let mut minus = c.state.clone();
            let (p, m) = if which == 0 {
                (&mut plus.visual, &mut minus.visual)
            } else {
                (&mut plus.text, &mut minus.text)
            };
            p.as_mut_slice()[i] += h;
            m.as_mut_slice()[i] -= h;
            let fp = loss(&plus, &c.frames, &c.prototype, &c.samples, c.beta).unwrap().total;
            let fm = loss(&minus, &c.frames, &c.prototype, &c.samples, c.beta).unwrap().total;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..30 {
        let c = random_case(&mut rng);
        let err = gradient_error(&c, 1e-4);
        assert!(err <= 1e-4, "case {case}: relative error {err:e}");
    }
}

#[test]
fn loss_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let got = loss(&c.state, &c.frames, &c.prototype, &c.samples, c.beta).unwrap();
        let (total, rep, sep) = oracle::tta_loss(
            &rows(&c.state.visual),
            &rows(&c.state.text),
            &cols(&c.frames),
            &c.prototype,
            &c.samples.positives,
            &c.samples.negatives,
            c.beta,
        );
        assert!((got.total - total).abs() < 1e-12);
        assert!((got.representation - rep).abs() < 1e-12);
        assert!((got.separation - sep).abs() < 1e-12);
    }
}

#[test]
fn projection_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let (pf, pp) = project(&c.state, &c.frames, &c.prototype).unwrap();
        let v = rows(&c.state.visual);
        for (t, frame) in cols(&c.frames).iter().enumerate() {
            let want = linalg::mat_vec(&v, frame);
            for (r, w) in want.iter().enumerate() {
                assert!((pf[(r, t)] - w).abs() < 1e-12);
            }
        }
        let want = linalg::mat_vec(&rows(&c.state.text), &c.prototype);
        for (a, b) in pp.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pcs_sampling_is_uniform_over_pool() {
    let t = 40;
    let k = 4;
    let raw: Vec<f64> = (0..t).map(|i| ((i * 17) % t) as f64).collect();
    let trace = ScoreTrace::from_raw(raw, 1, ThresholdPolicy::MeanOfTrace);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| trace.normalized[b].total_cmp(&trace.normalized[a]));
    let pool = &order[..2 * k];
    let rest = &order[2 * k..];

    let cfg = TtaConfig { k, ..TtaConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 10_000u64;
    let mut pos_counts = vec![0u64; t];
    let mut neg_counts = vec![0u64; t];
    for _ in 0..draws {
        let s = sample(&trace, &cfg, &mut rng).unwrap();
        assert_eq!(s.positives.len(), k);
        assert_eq!(s.negatives.len(), k);
        for &p in &s.positives {
            assert!(pool.contains(&p));
            pos_counts[p] += 1;
        }
        for &n in &s.negatives {
            assert!(rest.contains(&n));
            neg_counts[n] += 1;
        }
    }
    let check = |frames: &[usize], counts: &[u64]| {
        let per: Vec<u64> = frames.iter().map(|&f| counts[f]).collect();
        let p = k as f64 / frames.len() as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for &c in &per {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{c} vs {mean} +- {sigma}");
        }
        let chi = stats::chi_square_uniform(&per);
        assert!(chi < stats::chi_square_critical_999(frames.len() - 1), "chi-square {chi}");
    };
    check(pool, &pos_counts);
    check(rest, &neg_counts);
}

#[test]
fn zero_steps_reproduce_detect_exactly() {
    let corpus = generate_corpus(&SynthConfig { videos: 8, ..SynthConfig::hard() }).unwrap();
    let cfg = PipelineConfig::default();
    let tta = TtaConfig { steps: 0, ..TtaConfig::default() };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for v in &corpus.videos {
        a.extend(detect(v, &corpus.prompts, &cfg, &LabelMode::Pseudo).unwrap());
        let out = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::none()).unwrap();
        assert!(out.trajectory.is_empty());
        b.extend(out.detections);
    }
    assert_eq!(predictions_to_bytes(&a), predictions_to_bytes(&b));
}

#[test]
fn adaptation_lowers_loss_on_noisy_videos() {
    let corpus = generate_corpus(&SynthConfig { videos: 6, ..SynthConfig::hard() }).unwrap();
    let cfg = PipelineConfig::default();
    let tta = TtaConfig::default();
    for v in &corpus.videos {
        let out = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::none()).unwrap();
        assert_eq!(out.trajectory.len(), 60);
        let (i, f) = (out.initial_loss.unwrap(), out.final_loss.unwrap());
        assert!(f.total < i.total, "{}: {} -> {}", v.video_id(), i.total, f.total);
        assert_eq!(out.trajectory[0].total, i.total);
    }
}

#[test]
fn adaptation_is_reproducible_and_seed_sensitive() {
    let corpus = generate_corpus(&SynthConfig { videos: 2, ..SynthConfig::hard() }).unwrap();
    let cfg = PipelineConfig::default();
    let tta = TtaConfig { steps: 10, ..TtaConfig::default() };
    let v = &corpus.videos[0];
    let a = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::none()).unwrap();
    let b = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::none()).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(predictions_to_bytes(&a.detections), predictions_to_bytes(&b.detections));
    let c = adapt_and_detect(v, &corpus.prompts, &cfg, &TtaConfig { seed: 1, ..tta }, &OracleMode::none()).unwrap();
    assert_ne!(a.trajectory, c.trajectory);
}

#[test]
fn oracle_modes_use_ground_truth() {
    let corpus = generate_corpus(&SynthConfig { videos: 3, ..SynthConfig::hard() }).unwrap();
    let cfg = PipelineConfig::default();
    let tta = TtaConfig { steps: 5, ..TtaConfig::default() };
    for v in &corpus.videos {
        let truth = &corpus.annotations.videos[v.video_id()].instances;
        let label = truth[0].label.clone();
        let fg: Vec<(f64, f64)> = truth.iter().map(|g| (g.begin, g.end)).collect();
        let out = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::both(label.clone(), fg)).unwrap();
        assert!(out.detections.iter().all(|d| d.label == label));
    }
    let v = &corpus.videos[0];
    let err = adapt_and_detect(v, &corpus.prompts, &cfg, &tta, &OracleMode::perfect_label("nope")).unwrap_err();
    assert!(matches!(err, zad_core::Error::Config(_)));
}
