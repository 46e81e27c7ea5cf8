use std::sync::OnceLock;

use emoguide::config::ExperimentConfig;
use emoguide::diffusion::{Condition, NoiseSchedule, T_MIN};
use emoguide::eval::{eca_oracle, EvalSample};
use emoguide::pipeline::Experiment;
use emoguide::rng::{derive_index, seeded};
use emoguide::synthworld::{make_world, sample_utterance, WorldConfig, NEUTRAL};
use emoguide::training::{
    classifier_accuracy, train_noisy_classifier, ClassifierConfig, LabeledExample, LossRecord,
    Model, NoisyClassifier, TrainOutcome,
};

/// Default config trained for 5000 steps, shared by the tests below.
fn trained() -> &'static (Experiment, Model, TrainOutcome) {
    static CELL: OnceLock<(Experiment, Model, TrainOutcome)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = 5000;
        let ex = Experiment::new(cfg).unwrap();
        let (model, out) = ex.train(None).unwrap();
        (ex, model, out)
    })
}

fn window(trace: &[LossRecord], center: usize, half: usize, f: fn(&LossRecord) -> f64) -> f64 {
    let w = &trace[center - half..center + half + 1];
    w.iter().map(f).sum::<f64>() / w.len() as f64
}

#[test]
fn loss_at_step_5000_is_well_below_step_100() {
    let (ex, _, out) = trained();
    assert_eq!(out.trace.len(), 5000);
    let c = &ex.config.train;
    // 21-step windows smooth the per-batch noise. The adversarial term
    // settles at w_dat * ln K by design, so the halving is checked on the
    // generative objective and the total gets the ratio pinned from the
    // first verified run (0.62).
    let (wr, wd) = (c.w_recon, c.w_dsm);
    let gen = |r: &LossRecord| r.recon + r.dsm;
    let early_gen = window(&out.trace, 100, 10, gen);
    let late_gen = window(&out.trace, 4988, 10, gen);
    assert_eq!((wr, wd), (1.0, 1.0));
    assert!(
        late_gen < 0.5 * early_gen,
        "generative loss {early_gen:.4} at step 100 vs {late_gen:.4} at 5000"
    );
    let early = window(&out.trace, 100, 10, |r| r.total);
    let late = window(&out.trace, 4988, 10, |r| r.total);
    assert!(
        late < 0.7 * early,
        "total loss {early:.4} at step 100 vs {late:.4} at 5000"
    );
    let dat = window(&out.trace, 4988, 10, |r| r.dat);
    let ln_k = (ex.world.emotions() as f64).ln();
    assert!(
        (dat - ln_k).abs() < 0.1,
        "adversarial loss {dat:.3} away from ln K = {ln_k:.3}"
    );
}

#[test]
fn neutral_prior_mean_is_within_three_tau_of_the_world_mean() {
    let (ex, model, out) = trained();
    let world = &ex.world;
    let tau = world.tau();
    let tokens = vec![0; 6];
    for &spk in &ex.split.seen {
        let r = sample_utterance(
            world,
            spk,
            NEUTRAL,
            &[1, 2, 3, 4, 5, 6, 7, 8],
            100 + spk as u64,
        )
        .unwrap();
        let style = model.encode_style(&out.store, &r.frames).unwrap();
        let cond = Condition {
            tokens: tokens.clone(),
            style,
            emotion: NEUTRAL,
            seed: 0,
        };
        let mu = model
            .nets(&out.store)
            .prior_means(&[cond], false)
            .unwrap()
            .remove(0);
        let truth = world.mean_frames(spk, NEUTRAL, &tokens).unwrap();
        for (row, t) in mu.rows().zip(truth.rows()) {
            let dist = row
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist < 3.0 * tau,
                "speaker {spk}: |mu - mean| = {dist:.3} vs 3 tau = {:.3}",
                3.0 * tau
            );
        }
    }
}

#[test]
fn no_trained_classifier_beats_the_bayes_oracle() {
    // Single-frame utterances keep the oracle below 100% so the comparison bites.
    let world = make_world(&WorldConfig::default(), 0).unwrap();
    let schedule = NoiseSchedule::default();
    let examples = |n: usize, seed: u64| -> Vec<LabeledExample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                use rand::Rng as _;
                let spk = rng.random_range(0..world.speakers());
                let label = i % world.emotions();
                let tokens = world.random_script(1, &mut rng);
                let u = sample_utterance(&world, spk, label, &tokens, derive_index(seed, i as u64))
                    .unwrap();
                LabeledExample {
                    y0: u.frames,
                    mu: world.mean_frames(spk, NEUTRAL, &tokens).unwrap(),
                    label,
                }
            })
            .collect()
    };
    let train = examples(4000, 1);
    let clf = NoisyClassifier::new(world.frame_dim(), world.emotions(), &Default::default());
    let (store, _) =
        train_noisy_classifier(&clf, &train, &schedule, &ClassifierConfig::default()).unwrap();

    // Held-out data with known speakers and scripts for the oracle.
    let n = 2000;
    let mut rng = seeded(2);
    let mut held = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        use rand::Rng as _;
        let spk = rng.random_range(0..world.speakers());
        let label = i % world.emotions();
        let tokens = world.random_script(1, &mut rng);
        let u = sample_utterance(&world, spk, label, &tokens, derive_index(77, i as u64)).unwrap();
        held.push(LabeledExample {
            y0: u.frames.clone(),
            mu: world.mean_frames(spk, NEUTRAL, &tokens).unwrap(),
            label,
        });
        samples.push(EvalSample {
            frames: u.frames,
            speaker: spk,
            target: label,
            tokens,
        });
    }
    let oracle = eca_oracle(&world, &samples).unwrap() / 100.0;
    let learned = classifier_accuracy(&clf, &store, &held, &schedule, T_MIN, 5).unwrap();
    let mc = (oracle * (1.0 - oracle) / n as f64).sqrt();
    assert!(
        oracle < 1.0,
        "oracle accuracy {oracle} leaves nothing to compare"
    );
    assert!(
        learned <= oracle + 3.0 * mc,
        "classifier {learned:.4} beats oracle {oracle:.4} (3 sd = {:.4})",
        3.0 * mc
    );
    assert!(learned > 0.5, "classifier barely trained: {learned:.3}");
}
