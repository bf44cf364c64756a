//! Strict experiment config parsing.

use lori_core::{Granularity, MergeMethod, OptimizerKind, TaskKind};
use lori_harness::config::{ConfigError, ExperimentConfig};

const FULL: &str = r#"
seeds = [3, 4]
rank = 4
alpha = 6.0

[model]
layers = 1
width = 16
seq_len = 4

[[tasks]]
kind = "sequence_copy"
id = 7
size = 32
noise = 0.0

[sparsity]
ratio = 0.8
granularity = "layer"
calibration_steps = 5

[train]
optimizer = "sgd"
lr = 0.05
steps = 10
batch_size = 4

[merge]
methods = ["ties", "dare"]
weights = [0.5]
density = 0.3
"#;

#[test]
fn full_config_maps_onto_the_suite() {
    let cfg = ExperimentConfig::parse(FULL).unwrap();
    let suite = cfg.suite(4);
    assert_eq!(suite.seed(), 4);
    assert_eq!(suite.model.seed, 4);
    assert_eq!((suite.model.width, suite.model.ffn_width, suite.model.layers), (16, 32, 1));
    assert_eq!((suite.rank, suite.alpha()), (4, 6.0));
    assert_eq!(suite.tasks.len(), 1);
    assert_eq!((suite.tasks[0].kind, suite.tasks[0].task_id, suite.tasks[0].seed), (TaskKind::SequenceCopy, 7, 4));
    assert_eq!(suite.sparsity.granularity, Granularity::Layer);
    assert_eq!(suite.sparsity.calibration_steps, Some(5));
    assert_eq!(suite.train.optimizer, OptimizerKind::Sgd);
    assert_eq!(cfg.merge_methods().unwrap(), vec![MergeMethod::Ties, MergeMethod::Dare]);
}

#[test]
fn empty_file_is_the_reference_configuration() {
    let cfg = ExperimentConfig::parse("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let suite = cfg.suite(0);
    assert_eq!(suite, lori_core::suite::SuiteConfig::reference(0));
}

fn rejected(text: &str) -> String {
    match ExperimentConfig::parse(text) {
        Err(e) => e.to_string(),
        Ok(_) => panic!("accepted: {text}"),
    }
}

#[test]
fn unknown_keys_are_named() {
    assert!(rejected("sede = [1]").contains("`sede`"));
    assert!(rejected("[train]\nlearning_rate = 0.1").contains("`learning_rate`"));
    assert!(rejected("[[tasks]]\nkind = \"sequence_copy\"\nid = 0\nnosie = 0.1").contains("`nosie`"));
    assert!(rejected("[ortho]\nd = 3").contains("`d`"));
}

#[test]
fn invalid_values_name_their_key() {
    let cases = [
        ("[sparsity]\nratio = 1.0", "sparsity.ratio"),
        ("[sparsity]\ngranularity = \"row\"", "sparsity.granularity"),
        ("[train]\noptimizer = \"adam\"", "train.optimizer"),
        ("[train]\nlr = -1.0", "train.lr"),
        ("[train]\nsteps = 0", "train.steps"),
        ("[[tasks]]\nkind = \"gsm8k\"\nid = 0", "tasks[0].kind"),
        ("[merge]\nmethods = [\"avg\"]", "merge.methods"),
        ("[merge]\ndensity = 0.0", "merge.density"),
        ("[merge]\nweights = [1.0]", "merge.weights"),
        ("[merge]\nvariants = [\"qlora\"]", "merge.variants"),
        ("[eval]\nsparsities = [0.5, 1.0]", "eval.sparsities"),
        ("[continual]\nphase1 = 3", "continual.phase1"),
        ("seeds = []", "seeds"),
        ("rank = 64", "rank"),
    ];
    for (text, key) in cases {
        let msg = rejected(text);
        assert!(msg.contains(&format!("`{key}`")), "{text}: {msg}");
    }
    assert!(matches!(ExperimentConfig::parse("rank = \"x\""), Err(ConfigError::Parse(_))));
}

#[test]
fn hash_depends_on_content_not_formatting() {
    let a = ExperimentConfig::parse(FULL).unwrap();
    let b = ExperimentConfig::parse(&FULL.replace(" = ", "=").replace("\n\n", "\n")).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    let c = ExperimentConfig::parse(&FULL.replace("lr = 0.05", "lr = 0.06")).unwrap();
    assert_ne!(a.hash(), c.hash());
    // The canonical form parses back to the same config.
    assert_eq!(ExperimentConfig::parse(&a.canonical()).unwrap(), a);
}

#[test]
fn missing_file_is_a_read_error() {
    let err = ExperimentConfig::load(std::path::Path::new("/nonexistent/lori.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Read { .. }));
}
