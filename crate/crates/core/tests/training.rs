use ndarray::Array2;
use soundtriage::dataio::{synthesize_dataset, FeatureConfig, FeatureExtractor, SynthConfig};
use soundtriage::inference::predict;
use soundtriage::losses::LossKind;
use soundtriage::model::ModelConfig;
use soundtriage::training::{
    train, train_model, validation_score, BatchRecord, Checkpoint, EpochRecord, LabeledClip, TrainConfig,
    TrainObserver,
};
use soundtriage::triage::{scale_for_conditioning, TriageSampler, TriageWeights};
use soundtriage::{Error, Result};

const N_CLASSES: usize = 3;

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::new(16, N_CLASSES);
    cfg.backbone.cnn_channels = vec![4, 4, 4];
    cfg.backbone.time_pooling = vec![2, 2, 2];
    cfg.backbone.gru_units = 6;
    cfg.backbone.fc_units = 8;
    cfg.conditioner.hidden_dims = vec![8, 8, 8];
    cfg.conditioner.output_dim = 4;
    cfg
}

fn clips(n: usize, seed: u64) -> Vec<LabeledClip> {
    let mut synth = SynthConfig::new(n, N_CLASSES, 1.0, seed);
    synth.sample_rate = 16_000;
    synth.max_event_len = 0.6;
    let features = FeatureConfig {
        sample_rate: 16_000,
        n_mels: 16,
        ..FeatureConfig::default()
    };
    let extractor = FeatureExtractor::new(features).unwrap();
    synthesize_dataset(&synth)
        .unwrap()
        .iter()
        .map(|c| LabeledClip::from_waveform(&c.annotation, &c.waveform, 16_000, &extractor, N_CLASSES).unwrap())
        .collect()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        learning_rate: 3e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Spy {
    batches: Vec<BatchRecord>,
    epochs: Vec<EpochRecord>,
}

impl TrainObserver for Spy {
    fn on_batch(&mut self, record: &BatchRecord) {
        self.batches.push(record.clone());
    }
    fn on_epoch(&mut self, record: &EpochRecord) {
        self.epochs.push(*record);
    }
}

/// Cycles through fixed priority vectors.
struct Cycle {
    vectors: Vec<TriageWeights>,
    next: usize,
}

impl TriageSampler for Cycle {
    fn sample(&mut self) -> Result<TriageWeights> {
        let w = self.vectors[self.next % self.vectors.len()].clone();
        self.next += 1;
        Ok(w)
    }
}

#[test]
fn conditioner_and_loss_share_one_vector_per_batch() {
    let train_set = clips(10, 1);
    let val = clips(3, 2);
    let seeded = train(&tiny_model(), &train_set, &val, &config(1), &mut ()).unwrap();
    let vectors = vec![
        TriageWeights::from_raw(vec![5.0, 1.0, 1.0]).unwrap(),
        TriageWeights::from_raw(vec![0.2, 0.3, 0.5]).unwrap(),
    ];
    let mut sampler = Cycle { vectors: vectors.clone(), next: 0 };
    let mut spy = Spy::default();
    train_model(seeded.model, &train_set, &val, &config(2), &mut sampler, &mut spy).unwrap();

    // 10 clips in batches of 4 -> 3 batches per epoch, one draw each
    assert_eq!(spy.batches.len(), 6);
    assert_eq!(sampler.next, 6);
    for (i, b) in spy.batches.iter().enumerate() {
        let expected = &vectors[i % 2];
        assert_eq!(&b.weights, expected);
        assert_eq!(b.conditioner_input, scale_for_conditioning(expected));
        assert_eq!(b.loss_weights, expected.normalized());
    }
    let sizes: Vec<usize> = spy.batches.iter().map(|b| b.clip_ids.len()).collect();
    assert_eq!(sizes, vec![4, 4, 2, 4, 4, 2]);
    assert_eq!(spy.epochs.len(), 2);
}

#[test]
fn best_epoch_is_kept() {
    let train_set = clips(8, 3);
    let val = clips(3, 4);
    let mut spy = Spy::default();
    let out = train(&tiny_model(), &train_set, &val, &config(4), &mut spy).unwrap();
    let best = spy
        .epochs
        .iter()
        .fold(None::<EpochRecord>, |acc, r| match acc {
            Some(a) if a.validation_frame_f >= r.validation_frame_f => Some(a),
            _ => Some(*r),
        })
        .unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    assert_eq!(out.best_score, best.validation_frame_f);
    assert_eq!(validation_score(&out.model, &val).unwrap(), out.best_score);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let train_set = clips(8, 5);
    let val = clips(3, 6);
    let a = train(&tiny_model(), &train_set, &val, &config(2), &mut ()).unwrap();
    let b = train(&tiny_model(), &train_set, &val, &config(2), &mut ()).unwrap();
    assert_eq!(a.log_tsv(), b.log_tsv());
    assert_eq!(a.model.backbone.params(), b.model.backbone.params());
    let mut other = config(2);
    other.seed += 1;
    let c = train(&tiny_model(), &train_set, &val, &other, &mut ()).unwrap();
    assert_ne!(a.model.backbone.params(), c.model.backbone.params());
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let mut train_set = clips(6, 7);
    let val = clips(2, 8);
    let seeded = train(&tiny_model(), &train_set, &val, &config(1), &mut ()).unwrap();
    // poison every clip so the first batch diverges whatever the shuffle
    for c in &mut train_set {
        c.features.values = Array2::from_elem(c.features.values.dim(), f64::NAN);
    }
    let mut sampler = Cycle {
        vectors: vec![TriageWeights::uniform(N_CLASSES)],
        next: 0,
    };
    match train_model(seeded.model, &train_set, &val, &config(3), &mut sampler, &mut ()) {
        Err(Error::Divergence { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 1)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn checkpoint_preserves_predictions() {
    let train_set = clips(6, 9);
    let val = clips(2, 10);
    let out = train(&tiny_model(), &train_set, &val, &config(1), &mut ()).unwrap();
    let ck = Checkpoint {
        model: out.model.clone(),
        train_config: config(1),
        feature_config: FeatureConfig::default(),
        class_names: vec!["a".into(), "b".into(), "c".into()],
        epoch: out.best_epoch,
        validation_score: out.best_score,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let w = TriageWeights::from_raw(vec![1.0, 10.0, 1.0]).unwrap();
    for clip in &val {
        let a = out.model.posteriors(&clip.features, &w).unwrap();
        let b = back.model.posteriors(&clip.features, &w).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}

#[test]
fn config_errors() {
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        dirichlet_alpha: 0.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(train(&tiny_model(), &[], &clips(1, 0), &config(1), &mut ()).is_err());
}

#[test]
fn single_clip_loss_decreases() {
    let one = clips(1, 21);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 5,
        learning_rate: 1e-3,
        loss: LossKind::Sed,
        identity_film: true,
        ..config(5)
    };
    let out = train(&tiny_model(), &one, &one, &cfg, &mut ()).unwrap();
    let losses: Vec<f64> = out.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn constant_priorities_equal_uniform() {
    let train_set = clips(4, 22);
    let out = train(&tiny_model(), &train_set, &train_set, &config(1), &mut ()).unwrap();
    let uniform = TriageWeights::uniform(N_CLASSES);
    let scaled = TriageWeights::from_raw(vec![7.0; N_CLASSES]).unwrap();
    for clip in &train_set {
        let a = predict(&out.model, &clip.features, &uniform).unwrap();
        let b = predict(&out.model, &clip.features, &scaled).unwrap();
        assert_eq!(a, b);
    }
}
