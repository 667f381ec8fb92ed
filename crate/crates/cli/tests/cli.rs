use std::path::Path;
use std::process::{Command, Output};

fn irdrop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irdrop")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&irdrop(&["frobnicate"])), 2);
    assert_eq!(code(&irdrop(&["train"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    assert!(irdrop(&["gen", "--rows", "8", "--cols", "8", "--pad-stride", "4", "--n-cells", "20", "--out", p(&gen)])
        .status
        .success());
    let data = gen.join("dataset.csv");
    let o = irdrop(&["graph-stats", "--data", p(&data), "--thresholds", "", "--out", p(&dir.path().join("g"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = irdrop(&["gen", "--rows", "2", "--cols", "2", "--n-cells", "500", "--out", p(&dir.path().join("a"))]);
    assert_eq!(code(&o), 3);
    let missing = dir.path().join("missing.csv");
    let o = irdrop(&["train", "--data", p(&missing), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gbt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");
    let pred = dir.path().join("pred");
    let run = |args: &[&str]| {
        let o = irdrop(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["gen", "--rows", "12", "--cols", "12", "--pad-stride", "4", "--n-cells", "60", "--out", p(&gen)]);
    let data = gen.join("dataset.csv");
    run(&["train", "--data", p(&data), "--arch", "gbt", "--n-trees", "20", "--out", p(&train)]);
    let model = train.join("model.json");
    run(&["eval", "--data", p(&data), "--model", p(&model), "--split", "all", "--out", p(&eval)]);
    run(&["predict", "--data", p(&data), "--model", p(&model), "--out", p(&pred)]);

    let evald = std::fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert!(evald.starts_with("net_id,pred_mv,label_mv,error_mv\n"));
    assert_eq!(evald.lines().count(), 61);
    let predicted = std::fs::read_to_string(pred.join("predictions.csv")).unwrap();
    assert!(predicted.starts_with("net_id,pred_mv\n"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert!(report["mae_mv"].as_f64().unwrap() <= report["maxe_mv"].as_f64().unwrap());
    for d in [&gen, &train, &eval, &pred] {
        assert!(d.join("config.resolved.toml").exists());
    }
}

#[test]
fn bench_row_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[synth]\nrows = 8\ncols = 8\npad_stride = 4\nn_cells = 20\n").unwrap();
    let out = dir.path().join("bench");
    let o = irdrop(&["bench", "--config", p(&cfg), "--arch", "gcn,gat,gin", "--epochs", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.iter().filter(|r| r.contains(",train,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.contains(",predict,")).count(), 3);
    assert!(rows[0].starts_with("oracle,solve,0,"));
}
