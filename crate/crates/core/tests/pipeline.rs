use std::fs;
use std::path::Path;

use balance_lab::harness::config::{ExperimentConfig, ExperimentKind};
use balance_lab::harness::experiments::{collect_report, run_training, Setup};
use balance_lab::metrics::{kl_to_uniform, label_counts};
use balance_lab::trainer::{import_checkpoint, sample_noise};
use balance_lab::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_config(lambda: f64) -> ExperimentConfig {
    ExperimentConfig::from_text(&format!(
        "kind = train\nlambda = {lambda}\niterations = 2000\ncycle_len = 200\neval_samples = 400\n"
    ))
    .unwrap()
}

#[test]
fn shipped_configs_parse_and_match_their_names() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_str().unwrap().to_owned();
        let cfg = ExperimentConfig::from_text(&fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.kind.name(), stem, "{}", path.display());
        let again = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        seen += 1;
    }
    assert_eq!(seen, ExperimentKind::ALL.len());
}

#[test]
fn long_tail_setup_has_a_weak_tail_classifier_and_a_balanced_annotator() {
    let cfg = short_config(5.0);
    let setup = Setup::prepare(&cfg).unwrap();
    let counts = label_counts(&setup.train.labels, cfg.data.classes).unwrap();
    assert_eq!(counts, cfg.data.counts().unwrap());
    assert_eq!((counts[0], counts[7]), (cfg.data.n_max, 5));
    assert!(setup.annotator.report.overall > 0.9);
    assert!(setup.annotator.report.tail_accuracy() >= setup.classifier.report.tail_accuracy());
    assert!(!setup.classifier.model.is_trainable() && !setup.annotator.model.is_trainable());
}

#[test]
fn run_artifacts_rank_and_restore() {
    let root = tempfile::tempdir().unwrap();
    for lambda in [0.0, 5.0] {
        let cfg = short_config(lambda);
        let setup = Setup::prepare(&cfg).unwrap();
        let name = if lambda == 0.0 { "baseline" } else { "train" };
        let dir = root.path().join(name);
        let r = run_training(&cfg, &setup, 1, lambda, Some(&dir)).unwrap();
        assert_eq!(r.history.len(), 10);

        let (gen, seed, iteration) = import_checkpoint(&dir.join("checkpoint/generator_ema")).unwrap();
        assert_eq!((seed, iteration), (1, 2000));
        let z = sample_noise(400, cfg.trainer.noise_dim, &mut ChaCha8Rng::seed_from_u64(5));
        let labels = setup.annotator.model.predict(&gen.predict(&z).unwrap()).unwrap().argmax_rows();
        let kl = kl_to_uniform(&labels, cfg.data.classes).unwrap();
        assert!(kl.is_finite());
    }
    let ranked = collect_report(root.path()).unwrap();
    let names: Vec<&str> = ranked.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(names, ["train", "baseline"]);
    assert!(ranked[0].kl_uniform < ranked[1].kl_uniform);
    assert_eq!(ranked[0].kl_trajectory.len(), 10);
}

#[test]
fn diverging_learning_rate_is_reported_with_losses() {
    let mut cfg = short_config(5.0);
    cfg.trainer.lr_g = 1e6;
    cfg.trainer.lr_d = 1e6;
    let setup = Setup::prepare(&cfg).unwrap();
    match run_training(&cfg, &setup, 0, 5.0, None) {
        Err(Error::NonFiniteLoss { iteration, .. }) => assert!(iteration >= 1),
        Ok(r) => {
            // tanh output keeps the generator bounded; the losses must at
            // least remain finite if no error was raised
            assert!(r.history.iter().all(|c| c.loss_d.is_finite() && c.loss_g.is_finite()));
        }
        Err(e) => panic!("unexpected error {e}"),
    }
}
