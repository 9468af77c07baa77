mod common;

use common::*;
use mcfuse::backends::{ScoringMode, StubGenerator, ToyModel};
use mcfuse::dataset::{Imaginer, NameNeutralizer, VQAPair, DEFAULT_NAME_LEXICON, GENERATION_RETRIES};
use mcfuse::inference::{EnsembleConfig, Predictor};
use mcfuse::training::{load_checkpoint, prepare_items, save_checkpoint, train, Checkpoint, RankingConfig, TrainConfig};

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 0.2,
        epochs: 1,
        seed,
        max_steps: Some(30),
        mode: ScoringMode::Masked,
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = tmp_store(dir.path());
    let pairs = separable_task(120, 11, &store);
    let items = prepare_items(&pairs, &stub_encoder(0)).unwrap();

    let mut a = ToyModel::default_with_seed(3);
    let mut b = ToyModel::default_with_seed(3);
    let ra = train(&mut a, &items, &config(1), &RankingConfig::default()).unwrap();
    let rb = train(&mut b, &items, &config(1), &RankingConfig::default()).unwrap();
    assert_eq!(ra, rb);
    assert_ne!(ra.adapter_checksum_before, ra.adapter_checksum_after);

    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&a, ScoringMode::Masked)).unwrap();
    let reloaded = load_checkpoint(&path).unwrap().into_model().unwrap();
    assert_eq!(reloaded.adapters.checksum(), a.adapters.checksum());

    let visual = stub_encoder(0);
    let predict = |m: &ToyModel| {
        Predictor {
            text: m,
            visual: &visual,
            imaginer: None,
            mode: ScoringMode::Masked,
            config: EnsembleConfig::new(0.4).unwrap(),
        }
        .predict_all(&pairs)
    };
    let (pa, pr) = (predict(&a), predict(&reloaded));
    assert!(pa.failures.is_empty());
    for (x, y) in pa.predictions.iter().zip(&pr.predictions) {
        assert_eq!(x.probs, y.probs);
    }
}

#[test]
fn images_are_imagined_only_when_the_image_channel_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let store = tmp_store(dir.path());
    let text_only: Vec<VQAPair> = separable_task(6, 12, &store)
        .into_iter()
        .map(|p| VQAPair { image: None, ..p })
        .collect();
    let generator = StubGenerator::new(0);
    let neutralizer = NameNeutralizer::new(DEFAULT_NAME_LEXICON);
    let imagine_store = mcfuse::backends::ImageStore::open(dir.path().join("imagined")).unwrap();
    let model = ToyModel::default_with_seed(0);
    let visual = stub_encoder(0);
    let predictor = |lambda: f64| Predictor {
        text: &model,
        visual: &visual,
        imaginer: Some(Imaginer {
            generator: &generator,
            store: &imagine_store,
            neutralizer: &neutralizer,
            resolution: 64,
            steps: 4,
            retries: GENERATION_RETRIES,
        }),
        mode: ScoringMode::Masked,
        config: EnsembleConfig::new(lambda).unwrap(),
    };

    let batch = predictor(0.0).predict_all(&text_only);
    assert!(batch.failures.is_empty());
    assert_eq!(generator.calls(), 0);

    let batch = predictor(0.5).predict_all(&text_only);
    assert!(batch.failures.is_empty());
    let distinct: std::collections::HashSet<&str> = text_only.iter().map(|p| p.qa.question.as_str()).collect();
    assert_eq!(generator.calls(), distinct.len());

    predictor(0.5).predict_all(&text_only);
    assert_eq!(generator.calls(), distinct.len(), "second pass is served from the cache");
}
