use std::collections::BTreeMap;

use proptest::prelude::*;
use rifle::checkpoint::{decode_model, decode_updates, encode_model, encode_update, FormatError, UPDATE_MAGIC};
use rifle::config::DatasetSpec;
use rifle::idx::{self, IdxError, IdxImages};
use rifle::{Defense, ExperimentConfig};
use rifle_core::rng::rng_from;
use rifle_core::{AttackProfile, ClientUpdate, DeltaMode, DenseModel, LogitBatch, Matrix};

fn images_strategy() -> impl Strategy<Value = IdxImages> {
    (1usize..5, 1usize..5, 0usize..6).prop_flat_map(|(rows, cols, n)| {
        prop::collection::vec(prop::collection::vec(any::<u8>(), rows * cols), n)
            .prop_map(move |pixels| IdxImages { rows, cols, pixels })
    })
}

fn attack_strategy() -> impl Strategy<Value = AttackProfile> {
    prop_oneof![
        Just(AttackProfile::Benign),
        (0.5f64..20.0).prop_map(|sigma| AttackProfile::GaussianLogit { sigma }),
        (0.5f64..20.0, 0usize..10).prop_map(|(gamma, target)| AttackProfile::TargetedLogit { gamma, target }),
        (0.0f64..1.0).prop_map(|fraction| AttackProfile::LabelFlip { fraction }),
    ]
}

prop_compose! {
    fn config_strategy()(
        clients in 2usize..12,
        rounds in 1usize..20,
        eta in 0.001f64..1.0,
        temperature in 0.5f64..8.0,
        alpha in 0.0f64..1.0,
        epsilon_flag in -1.0f64..0.0,
        across in any::<bool>(),
        shadow in any::<bool>(),
        undefended in any::<bool>(),
        hidden in prop::collection::vec(1usize..64, 0..3),
        attack in attack_strategy(),
        seed in any::<u64>(),
    ) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            clients,
            rounds,
            eta,
            temperature,
            alpha,
            epsilon_flag,
            shadow_detect: shadow,
            heavy_hidden: hidden,
            master_seed: seed,
            attacks: BTreeMap::from([(0, attack)]),
            ..ExperimentConfig::default()
        };
        if across {
            cfg.delta_mode = DeltaMode::AcrossRounds;
        }
        if undefended {
            cfg.defense = Defense::None;
        }
        cfg
    }
}

proptest! {
    #[test]
    fn idx_images_round_trip(images in images_strategy()) {
        let bytes = idx::encode_images(&images);
        prop_assert_eq!(idx::parse_images(&bytes).unwrap(), images);
    }

    #[test]
    fn idx_labels_round_trip(labels in prop::collection::vec(any::<u8>(), 0..50)) {
        prop_assert_eq!(idx::parse_labels(&idx::encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn idx_truncation_is_an_error(images in images_strategy(), cut in 1usize..8) {
        let bytes = idx::encode_images(&images);
        let truncated = matches!(idx::parse_images(&bytes[..bytes.len() - cut]), Err(IdxError::Truncated { .. }));
        prop_assert!(truncated);
    }

    #[test]
    fn model_round_trip(input in 1usize..6, hidden in prop::collection::vec(1usize..6, 0..3), classes in 2usize..5, seed in any::<u64>()) {
        let m = DenseModel::init(input, &hidden, classes, &mut rng_from(seed));
        prop_assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }

    #[test]
    fn config_text_round_trip(cfg in config_strategy()) {
        prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_json_round_trip(cfg in config_strategy()) {
        let json = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
    }
}

#[test]
fn idx_dataset_through_files() {
    let images = IdxImages {
        rows: 2,
        cols: 2,
        pixels: vec![vec![0, 255, 128, 1], vec![9, 9, 9, 9], vec![255; 4]],
    };
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, idx::encode_images(&images)).unwrap();
    std::fs::write(&lp, idx::encode_labels(&[2, 0, 1])).unwrap();
    let ds = idx::load_idx(&ip, &lp, 3, None).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.labels(), [2, 0, 1]);
    assert_eq!(ds.features().row(0), &[0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0]);
    assert_eq!(idx::load_idx(&ip, &lp, 3, Some(2)).unwrap().len(), 2);
    assert!(matches!(
        idx::load_idx(&ip, &dir.path().join("missing"), 3, None),
        Err(rifle::Error::Idx(IdxError::Io { .. }))
    ));
}

#[test]
fn idx_run_from_config() {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..240u32 {
        let class = (i % 3) as u8;
        pixels.push((0..16).map(|p| if p % 3 == usize::from(class) { 200 } else { (i * 7 % 40) as u8 }).collect());
        labels.push(class);
    }
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, idx::encode_images(&IdxImages { rows: 4, cols: 4, pixels })).unwrap();
    std::fs::write(&lp, idx::encode_labels(&labels)).unwrap();
    let text = format!(
        "dataset = idx\nidx_images = {}\nidx_labels = {}\nclasses = 3\nclients = 3\nrounds = 2\n\
         n_public = 60\nn_test = 60\nattack = 0:benign\nheavy_hidden = 8\nasr_target = 0\n",
        ip.display(),
        lp.display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert!(matches!(cfg.dataset, DatasetSpec::Idx { classes: 3, .. }));
    let (_, r) = rifle::simulate(&cfg).unwrap();
    assert_eq!(r.rounds.len(), 2);
}

#[test]
fn update_log_rejects_bad_magic_and_grad_flag() {
    let u = ClientUpdate {
        client_id: 1,
        logits: LogitBatch::new(Matrix::from_rows(&[&[0.5, -0.5]]).unwrap()).unwrap(),
        grad_share: None,
        n_samples: 3,
        val_logits: None,
    };
    let mut bytes = UPDATE_MAGIC.to_vec();
    encode_update(&mut bytes, 7, &u);
    assert_eq!(decode_updates(&bytes).unwrap(), vec![(7, u)]);
    assert_eq!(decode_updates(&UPDATE_MAGIC[..]).unwrap(), vec![]);
    let mut flag = bytes.clone();
    *flag.last_mut().unwrap() = 4;
    assert!(matches!(decode_updates(&flag), Err(FormatError::Invalid(_))));
    bytes[0] = b'X';
    assert_eq!(decode_updates(&bytes), Err(FormatError::BadMagic));
}
