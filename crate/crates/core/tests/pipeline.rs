mod common;

use std::path::Path;

use umcl::config::{DataSourceConfig, RunConfig};
use umcl::data::{write_dataset, write_eval_set, EvalSet};
use umcl::evaluation::{evaluate, export_embeddings, EvalTasks};
use umcl::training::train;
use umcl::Error;

#[test]
fn files_on_disk_train_like_synthetic_data() {
    let (synth_run, data) = common::tiny_run(25, 6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path().join("it.jsonl"), &data.datasets.image_text).unwrap();
    write_dataset(dir.path().join("il.jsonl"), &data.datasets.image_label).unwrap();
    write_eval_set(dir.path().join("ev.jsonl"), data.eval.as_ref().unwrap()).unwrap();

    let mut text = umcl::config::train_to_kv(&synth_run.train);
    text.push_str(
        "data.image_text = it.jsonl\ndata.image_label = il.jsonl\ndata.eval = ev.jsonl\n",
    );
    let cfg_path = dir.path().join("run.kv");
    std::fs::write(&cfg_path, text).unwrap();
    let file_run = RunConfig::load(&cfg_path).unwrap();
    assert!(matches!(file_run.data, DataSourceConfig::Files { .. }));
    let loaded = file_run.load_data().unwrap();
    assert_eq!(loaded.datasets.image_label, data.datasets.image_label);
    assert_eq!(loaded.eval, data.eval);

    let a = train(&synth_run.train, &data.datasets, &data.registry).unwrap();
    let b = train(&file_run.train, &loaded.datasets, &loaded.registry).unwrap();
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );

    let replay = RunConfig::parse(&file_run.to_kv(), Path::new("/")).unwrap();
    assert_eq!(replay.train, file_run.train);
}

#[test]
fn retrieval_without_texts_fails_up_front() {
    let (run, data) = common::tiny_run(5, 1);
    let out = train(&run.train, &data.datasets, &data.registry).unwrap();
    let mut eval = data.eval.unwrap();
    eval.samples[3].text = None;
    let tasks = EvalTasks {
        retrieval: true,
        ..EvalTasks::default()
    };
    assert!(matches!(
        evaluate(&out.checkpoint, &eval, &tasks),
        Err(Error::Task(_))
    ));
    assert!(matches!(
        evaluate(&out.checkpoint, &EvalSet::default(), &EvalTasks::default()),
        Err(Error::Task(_))
    ));
}

#[test]
fn ensemble_flag_adds_second_accuracy() {
    let (run, data) = common::tiny_run(30, 2);
    let out = train(&run.train, &data.datasets, &data.registry).unwrap();
    let eval = data.eval.unwrap();
    let plain = EvalTasks {
        ensemble: false,
        ..EvalTasks::default()
    };
    let m = evaluate(&out.checkpoint, &eval, &plain).unwrap();
    assert!(m.zero_shot_acc.is_some() && m.zero_shot_acc_ens.is_none());
    let m = evaluate(&out.checkpoint, &eval, &EvalTasks::default()).unwrap();
    assert!(m.zero_shot_acc_ens.is_some());
    let all = EvalTasks {
        probe: true,
        retrieval: true,
        ..EvalTasks::default()
    };
    let m = evaluate(&out.checkpoint, &eval, &all).unwrap();
    let json: serde_json::Value = serde_json::to_value(&m).unwrap();
    for key in ["zero_shot_acc", "zero_shot_acc_ens", "probe_acc", "p_at_k"] {
        assert!(json.get(key).is_some(), "{key} missing");
    }
    assert_eq!(json["p_at_k"].as_object().unwrap().len(), 4);
}

#[test]
fn embedding_export_has_one_row_per_sample() {
    let (run, data) = common::tiny_run(10, 3);
    let out = train(&run.train, &data.datasets, &data.registry).unwrap();
    let eval = data.eval.unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let export = export_embeddings(&eval, &out.checkpoint, Some(&path)).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), eval.samples.len() + 1);
    assert_eq!(lines[0].split(',').count(), 3 + run.train.embed_dim);
    assert_eq!(export.pca.projection.len(), eval.samples.len());
}
