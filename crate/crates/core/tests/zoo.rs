use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightsym::symmetry::{check_functional_equiv, check_genericity};
use weightsym::zoogen::{
    augment_zoo, gen_mha_zoo, gen_mlp_zoo, Augmentation, MhaZooSpec, MlpZooSpec, Provenance, Split, Task, Zoo,
};

const GOLDEN_SEED: u64 = 7;
const GOLDEN_HASH: &str = "3432a2c6cba345b6ad49914df3f6b5858d48eba3618f2d725414ef0940e4ccf0";

fn small_mlp_zoo(n: usize, seed: u64) -> Zoo {
    let mut spec = MlpZooSpec::new(Task::TwoClass2d).unwrap();
    spec.ranges.epochs = (0, 60);
    gen_mlp_zoo(n, &spec, seed).unwrap()
}

#[test]
fn labels_span_the_accuracy_range() {
    let zoo = gen_mlp_zoo(200, &MlpZooSpec::new(Task::TwoClass2d).unwrap(), 0).unwrap();
    let labels = zoo.labels();
    let lo = labels.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo <= 0.5 && hi >= 0.95, "labels span [{lo}, {hi}]");
}

#[test]
fn regression_zoo_labels_are_in_range() {
    let zoo = gen_mlp_zoo(20, &MlpZooSpec::new(Task::Regression1d).unwrap(), 1).unwrap();
    assert!(zoo.labels().iter().all(|l| (0.0..=1.0).contains(l)));
    assert!(zoo.labels().iter().any(|&l| l > 0.5));
}

#[test]
fn golden_checksum_is_stable() {
    let spec = MlpZooSpec::new(Task::TwoClass2d).unwrap();
    let zoo = gen_mlp_zoo(20, &spec, GOLDEN_SEED).unwrap();
    assert_eq!(zoo.content_hash(), GOLDEN_HASH);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    small_mlp_zoo(15, 3).save(&a).unwrap();
    small_mlp_zoo(15, 3).save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let loaded = Zoo::load(&a).unwrap();
    assert_eq!(loaded.to_json(), small_mlp_zoo(15, 3).to_json());
}

#[test]
fn augmented_copies_are_certified_and_leak_free() {
    let zoo = small_mlp_zoo(12, 4);
    for scale_exp in 1..=4 {
        let aug = augment_zoo(&zoo, 2, Augmentation::Monomial { scale_exp, permute: true }, 5).unwrap();
        assert_eq!(aug.len(), 2 * zoo.len());
        let mut rng = ChaCha8Rng::seed_from_u64(scale_exp as u64);
        for e in &aug.entries {
            let Provenance::Augmented { source, .. } = &e.provenance else {
                continue;
            };
            let src = aug.entries.iter().find(|s| &s.id == source).unwrap();
            assert!(src.provenance.is_original());
            assert_eq!(e.label.to_bits(), src.label.to_bits());
            assert_eq!(e.split, src.split);
            let tol = 1e-6 * 10f64.powi(scale_exp as i32);
            assert!(check_functional_equiv(&src.params, &e.params, 16, 1.0, tol, &mut rng).unwrap().equivalent);
        }
        let (train, _) = aug.split(Split::Train, true);
        assert_eq!(train.len(), zoo.split(Split::Train, true).0.len());
    }
}

#[test]
fn attention_zoo_is_generic_and_learnable() {
    let spec = MhaZooSpec::new(Task::SequenceMajority).unwrap();
    let zoo = gen_mha_zoo(500, &spec, 11).unwrap();
    let generic = zoo.entries.iter().filter(|e| check_genericity(e.params.as_mha().unwrap(), 1e-8)).count();
    assert!(generic as f64 / 500.0 > 0.99, "{generic} of 500 generic");
    let best = zoo.labels().iter().cloned().fold(0.0, f64::max);
    assert!(best > 0.8, "best label {best}");

    let again = gen_mha_zoo(20, &spec, 11).unwrap();
    let first: Vec<u64> = zoo.entries[..20].iter().map(|e| e.label.to_bits()).collect();
    let second: Vec<u64> = again.entries.iter().map(|e| e.label.to_bits()).collect();
    assert_eq!(first, second);
}
