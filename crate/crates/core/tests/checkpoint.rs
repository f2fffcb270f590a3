mod common;

use umcl::evaluation::{evaluate, EvalTasks};
use umcl::training::{train, Checkpoint};
use umcl::Error;

fn trained() -> (Checkpoint, umcl::data::EvalSet) {
    let (run, data) = common::tiny_run(40, 5);
    let out = train(&run.train, &data.datasets, &data.registry).unwrap();
    (out.checkpoint, data.eval.unwrap())
}

fn all_tasks() -> EvalTasks {
    EvalTasks {
        probe: true,
        retrieval: true,
        ..EvalTasks::default()
    }
}

#[test]
fn save_load_eval_is_bit_identical() {
    let (ckpt, eval) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    // gradients and the store version are not persisted
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.adam, ckpt.adam);
    for (p, q) in back.encoders.store.iter().zip(ckpt.encoders.store.iter()) {
        assert_eq!((&p.name, &p.shape, &p.value), (&q.name, &q.shape, &q.value));
    }
    let a = evaluate(&ckpt, &eval, &all_tasks()).unwrap();
    let b = evaluate(&back, &eval, &all_tasks()).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
}

#[test]
fn flipped_byte_fails_checksum() {
    let (ckpt, _) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    for pos in [30, bytes.len() / 2, bytes.len() - 40] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "byte {pos}: {err}");
    }
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let (ckpt, _) = trained();
    let bytes = ckpt.to_bytes().unwrap();
    for len in [0, 10, 60, bytes.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&bytes[..len]).is_err(),
            "length {len}"
        );
    }
    let mut foreign = bytes.clone();
    foreign[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&foreign),
        Err(Error::Checkpoint(_))
    ));
    let mut longer = bytes;
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn mismatched_class_count_is_refused() {
    let (ckpt, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    let mut other = ckpt.config.clone();
    assert!(Checkpoint::load_for(&path, &other).is_ok());
    other.num_classes = 5;
    let err = Checkpoint::load_for(&path, &other).unwrap_err();
    assert!(err.to_string().contains("num_classes"), "{err}");
}
