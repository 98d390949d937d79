use std::path::Path;

use cvl::data::{
    load_dataset, load_features, parse_dataset, read_features, save_features, synth_generate,
    write_dataset, write_features, DatasetRecord, FeatureFile, FeatureRecord, SynthSpec,
    FEATURE_MAGIC,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn parse(s: &str) -> cvl::Result<Vec<DatasetRecord>> {
    parse_dataset(Path::new("d.jsonl"), s)
}

#[test]
fn dataset_lines() {
    let recs = parse("{\"id\":\"a\",\"text\":\"hi\",\"label\":0}\n\n{\"id\":7,\"text\":\"yo\"}\n")
        .unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].label, Some(0));
    assert_eq!((recs[1].id.as_str(), recs[1].label), ("7", None));

    let err = parse("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n").unwrap_err();
    assert_eq!(err.kind(), "validation");
    assert!(err.to_string().contains("duplicate id a"));

    let err =
        parse("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n{oops\n").unwrap_err();
    assert_eq!(err.kind(), "parse");
    assert!(err.to_string().contains("line 3"), "{err}");
    assert_eq!(parse("{\"id\":\"a\"}\n").unwrap_err().kind(), "parse");
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let recs = vec![
        DatasetRecord {
            id: "1".into(),
            text: "quote \" and ünïcode".into(),
            label: Some(1),
            img: Some("img/1.png".into()),
        },
        DatasetRecord {
            id: "2".into(),
            text: String::new(),
            label: None,
            img: None,
        },
    ];
    write_dataset(&path, &recs).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), recs);
    assert_eq!(
        load_dataset(&dir.path().join("missing"))
            .unwrap_err()
            .kind(),
        "io"
    );
}

fn random_file(seed: u64, dim: usize, max_rois: usize, n: usize) -> FeatureFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = FeatureFile::new(dim, max_rois);
    for i in 0..n {
        let rois = rng.random_range(0..=max_rois);
        file.insert(FeatureRecord {
            id: format!("img-{i}"),
            boxes: (0..rois)
                .map(|_| {
                    let x: f64 = rng.random();
                    let y: f64 = rng.random();
                    [x * 0.5, y * 0.5, x * 0.5 + 0.5, y * 0.5 + 0.5]
                })
                .collect(),
            roi_features: (0..rois * dim)
                .map(|_| rng.random_range(-1e3..1e3))
                .collect(),
            contextual: (0..dim).map(|_| rng.random::<f64>() - 0.5).collect(),
        })
        .unwrap();
    }
    file
}

fn bytes(file: &FeatureFile) -> Vec<u8> {
    let mut out = Vec::new();
    write_features(&mut out, file).unwrap();
    out
}

#[test]
fn feature_containers_round_trip_bitwise() {
    let empty = FeatureFile::new(4, 3);
    assert_eq!(read_features(&mut bytes(&empty).as_slice()).unwrap(), empty);

    let file = random_file(1, 5, 4, 12);
    let first = bytes(&file);
    let back = read_features(&mut first.as_slice()).unwrap();
    assert_eq!(back, file);
    assert_eq!(bytes(&back), first);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    save_features(&path, &file).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(load_features(&path).unwrap(), file);
}

#[test]
fn full_size_records_are_accepted() {
    let mut file = FeatureFile::new(2048, 100);
    file.insert(FeatureRecord {
        id: "big".into(),
        boxes: vec![[0.0, 0.0, 1.0, 1.0]; 100],
        roi_features: (0..100 * 2048).map(|i| i as f64 * 1e-3).collect(),
        contextual: vec![0.25; 2048],
    })
    .unwrap();
    let raw = bytes(&file);
    assert_eq!(read_features(&mut raw.as_slice()).unwrap(), file);
}

#[test]
fn malformed_containers_are_format_errors() {
    let good = bytes(&random_file(2, 3, 2, 3));
    let read = |b: &[u8]| read_features(&mut &b[..]).unwrap_err();

    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    assert_eq!(read(&bad_magic).kind(), "format");

    let mut bad_version = good.clone();
    bad_version[8] = 9;
    let err = read(&bad_version);
    assert_eq!(err.kind(), "format");
    assert!(err.to_string().contains("version 9"));

    for cut in [4, 12, 30, good.len() - 1] {
        assert_eq!(read(&good[..cut]).kind(), "format", "cut at {cut}");
    }
    let mut trailing = good.clone();
    trailing.push(0);
    assert_eq!(read(&trailing).kind(), "format");
}

#[test]
fn shape_mismatches_name_the_record() {
    let good = bytes(&random_file(3, 3, 2, 1));
    let dim_at = FEATURE_MAGIC.len() + 4;

    // the header claims a wider feature than the record holds
    let mut wider = good.clone();
    wider[dim_at..dim_at + 4].copy_from_slice(&40u32.to_le_bytes());
    let err = read_features(&mut wider.as_slice()).unwrap_err();
    assert_eq!(err.kind(), "format");
    assert!(err.to_string().contains("img-0"), "{err}");

    // or a narrower one, leaving bytes the dimensions do not explain
    let mut narrower = good;
    narrower[dim_at..dim_at + 4].copy_from_slice(&1u32.to_le_bytes());
    let err = read_features(&mut narrower.as_slice()).unwrap_err();
    assert!(err.to_string().contains("img-0"), "{err}");
}

#[test]
fn feature_records_are_validated_on_insert() {
    let mut file = FeatureFile::new(2, 1);
    let rec = |boxes: Vec<[f64; 4]>, rois: Vec<f64>| FeatureRecord {
        id: "r".into(),
        boxes,
        roi_features: rois,
        contextual: vec![0.0, 0.0],
    };
    assert!(file
        .insert(rec(vec![[0.0, 0.0, 2.0, 1.0]], vec![0.0; 2]))
        .is_err());
    assert!(file.insert(rec(vec![[0.0; 4]; 2], vec![0.0; 4])).is_err());
    assert!(file.insert(rec(vec![[0.0; 4]], vec![0.0; 3])).is_err());
    assert!(file
        .insert(rec(vec![[0.0; 4]], vec![f64::NAN, 0.0]))
        .is_err());
    file.insert(rec(vec![[0.0; 4]], vec![0.0; 2])).unwrap();
    assert!(file.insert(rec(vec![], vec![])).is_err());
}

fn spec(n: usize, noise: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_train: n,
        n_val: 0,
        noise,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_labels_follow_the_requested_balance() {
    let n = 2000;
    for balance in [0.5, 0.3] {
        let data = synth_generate(&SynthSpec {
            balance,
            ..spec(n, 0.1, 11)
        })
        .unwrap();
        let pos = data.train.iter().filter(|r| r.label == Some(1)).count() as f64;
        let sigma = (n as f64 * balance * (1.0 - balance)).sqrt();
        assert!(
            (pos - n as f64 * balance).abs() <= 3.0 * sigma,
            "{pos} positives at balance {balance}"
        );
    }
}

#[test]
fn each_modality_alone_is_at_chance() {
    let n = 2000;
    let data = synth_generate(&spec(n, 0.1, 12)).unwrap();
    let sigma = (n as f64 * 0.25).sqrt();
    let text_agree = data
        .latents
        .iter()
        .zip(&data.train)
        .filter(|(l, r)| Some(l.text_bit) == r.label)
        .count();
    let visual_agree = data
        .latents
        .iter()
        .zip(&data.train)
        .filter(|(l, r)| Some(l.visual_bit) == r.label)
        .count();
    for agree in [text_agree, visual_agree] {
        assert!(
            (agree as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma,
            "{agree} of {n}"
        );
    }
    for (l, r) in data.latents.iter().zip(&data.train) {
        assert_eq!(Some(l.text_bit ^ l.visual_bit), r.label);
        let has_kw = r.text.split(' ').any(|w| w.starts_with("kw"));
        assert_eq!(has_kw, l.text_bit == 1, "{}", r.text);
    }
}

#[test]
fn noiseless_contextual_features_are_the_prototypes() {
    let data = synth_generate(&spec(200, 0.0, 13)).unwrap();
    assert_ne!(data.prototype_a, data.prototype_b);
    for (l, r) in data.latents.iter().zip(&data.train) {
        let ctx = &data.features.get(&r.id).unwrap().contextual;
        let expected = if l.visual_bit == 1 {
            &data.prototype_a
        } else {
            &data.prototype_b
        };
        assert_eq!(ctx, expected);
    }
}

#[test]
fn generation_is_seeded() {
    let a = synth_generate(&spec(50, 0.1, 14)).unwrap();
    assert_eq!(a, synth_generate(&spec(50, 0.1, 14)).unwrap());
    assert_ne!(a, synth_generate(&spec(50, 0.1, 15)).unwrap());
    let oov = synth_generate(&SynthSpec {
        keyword_oov: true,
        ..spec(50, 0.1, 14)
    })
    .unwrap();
    assert_eq!(oov.train, a.train);
    assert!(oov.vocab.len() < a.vocab.len());
    assert_eq!(
        synth_generate(&SynthSpec {
            balance: 1.5,
            ..spec(5, 0.1, 1)
        })
        .unwrap_err()
        .kind(),
        "config"
    );
}
