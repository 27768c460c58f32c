use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regiontrans"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[network]
hidden_channels = [3]
kernel_size = 1
head_hidden = 3

[pretrain]
epochs = 1
batch_size = 256

[transfer]
epochs = 3

[experiment]
seeds = [1]
w_sweep = [0.0, 0.5]
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["gen", "--out", "/tmp/x"]).status.code(), Some(1));
    let help = bin(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("pretrain"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = bin(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let o = bin(&["gen", "--scenario", "no-such-scenario", "--out", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_match_pretrain_transfer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let scen = d.join("scen");

    let o = bin(&["gen", "--scenario", "similar-1day", "--out", s(&scen), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(scen.join("truth.txt").is_file());

    let matching = d.join("match.txt");
    let o = bin(&[
        "match",
        "--target",
        s(&scen.join("target")),
        "--source",
        s(&scen.join("source")),
        "--mode",
        "aux",
        "--out",
        s(&matching),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&matching).unwrap().lines().count(), 64);

    let pre = d.join("pre.rtpk");
    let report = d.join("pre.csv");
    let o = bin(&[
        "pretrain",
        "--source",
        s(&scen.join("source")),
        "--config",
        s(&cfg),
        "--out",
        s(&pre),
        "--report",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&report)
        .unwrap()
        .starts_with("epoch,pred_loss,rep_loss,combined_loss"));

    let tuned = d.join("rt.rtpk");
    let o = bin(&[
        "transfer",
        "--ckpt",
        s(&pre),
        "--target",
        s(&scen.join("target")),
        "--source",
        s(&scen.join("source")),
        "--matching",
        s(&matching),
        "--match-mode",
        "aux",
        "--out",
        s(&tuned),
        "--config",
        s(&cfg),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epochs=3"));

    let o = bin(&["eval", "--ckpt", s(&tuned), "--data", s(&scen)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let rmse: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("rmse="))
        .expect("rmse line")
        .parse()
        .unwrap();
    assert!(rmse.is_finite() && rmse > 0.0);
    assert!(out.contains("inflow_rmse=") && out.contains("outflow_rmse="));

    let o = bin(&[
        "transfer",
        "--ckpt",
        s(&pre),
        "--target",
        s(&scen.join("target")),
        "--source",
        s(&scen.join("source")),
        "--matching",
        s(&matching),
        "--w",
        "1.5",
        "--out",
        s(&tuned),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2), "w outside [0, 1] is a data error");
}

#[test]
fn experiment_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = d.join("exp");
    let o = bin(&[
        "experiment",
        "--scenario",
        "similar-1day",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--quiet",
        "--methods",
        "target-only,finetune",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bin(&["plot-data", "--results", s(&out), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table1.csv")).unwrap();
    assert!(table.starts_with("scenario,method,history,mean_rmse,std_rmse,seeds"));
    assert!(table.contains("finetune") && table.contains("target-only"));
    let fig = std::fs::read_to_string(out.join("fig3.csv")).unwrap();
    assert_eq!(fig.lines().count(), 3);
}

#[test]
fn ingest_builds_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut inflow = String::from("timestamp,i,j,value\n");
    let mut outflow = inflow.clone();
    for t in 0..10 {
        for i in 0..2 {
            for j in 0..2 {
                inflow.push_str(&format!("{t},{i},{j},{}\n", t + i + j));
                outflow.push_str(&format!("{t},{i},{j},{}\n", 2 * t + j));
            }
        }
    }
    std::fs::write(d.join("in.csv"), inflow).unwrap();
    std::fs::write(d.join("out.csv"), outflow).unwrap();
    let ds = d.join("ds");
    let o = bin(&[
        "ingest",
        "--inflow",
        s(&d.join("in.csv")),
        "--outflow",
        s(&d.join("out.csv")),
        "--width",
        "2",
        "--height",
        "2",
        "--out",
        s(&ds),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = regiontrans::data::load_dataset(&ds).unwrap();
    assert_eq!(loaded.len(), 10);
}
