use std::path::Path;
use std::process::{Command, Output};

use pco_core::eval::Embeddings;
use pco_core::tensor::Tensor;

fn pco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pco")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const DATA: &str = "\
data = sphere
data.classes = 6
data.dim = 8
data.kappa = 30
data.samples_per_class = 6
data.seed = 2
";

#[test]
fn full_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("data.conf"), DATA).unwrap();
    let config = format!(
        "{DATA}seed = 2\nbatch_size = 12\nmax_iterations = 30\nencoder = mlp\nencoder.hidden = 16\nencoder.output_dim = 8\n\
         checkpoint = {}\nlog = {}\n",
        s(&p("m.ckpt")),
        s(&p("log.csv"))
    );
    std::fs::write(p("run.conf"), config).unwrap();

    let out = pco(&[
        "gen-data",
        "--spec",
        s(&p("data.conf")),
        "--out",
        s(&p("raw.emb")),
        "--pairs",
        s(&p("pairs.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&pco(&["train", "--config", s(&p("run.conf"))])), 0);
    let log = std::fs::read_to_string(p("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);

    let out = pco(&[
        "export",
        "--ckpt",
        s(&p("m.ckpt")),
        "--data",
        s(&p("data.conf")),
        "--out",
        s(&p("e.emb")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(Embeddings::load(&p("e.emb")).unwrap().len(), 36);

    let out = pco(&[
        "eval",
        "--emb",
        s(&p("e.emb")),
        "--pairs",
        s(&p("pairs.csv")),
        "--far",
        "1e-1,1e-2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(
        report.contains("TAR@FAR=1e-1") && report.contains("TAR@FAR=1e-2"),
        "{report}"
    );

    assert_eq!(
        code(&pco(&["project", "--emb", s(&p("e.emb")), "--out", s(&p("proj.csv"))])),
        0
    );
    let proj = std::fs::read_to_string(p("proj.csv")).unwrap();
    assert_eq!(proj.lines().count(), 37);
    assert_eq!(code(&pco(&["grad-check", "--module", "losses", "--seeds", "3"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.conf");
    assert_eq!(code(&pco(&["train", "--config", s(&missing)])), 1);
    assert_eq!(code(&pco(&["no-such-command"])), 1);
    assert_eq!(code(&pco(&["grad-check", "--module", "bogus"])), 1);

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "delta1 = 0.5\ndelta2 = 0.2\n").unwrap();
    assert_eq!(code(&pco(&["train", "--config", s(&bad)])), 1);

    let emb = dir.path().join("e.emb");
    let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]]).unwrap();
    Embeddings::from_tensor(&t, &[0, 1, 0]).unwrap().save(&emb).unwrap();
    assert_eq!(code(&pco(&["eval", "--emb", s(&emb), "--far", "2.0"])), 1);
}

#[test]
fn numeric_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("zero.emb");
    let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.5, 0.5]]).unwrap();
    Embeddings::from_tensor(&t, &[0, 0, 1, 1]).unwrap().save(&emb).unwrap();
    assert_eq!(code(&pco(&["eval", "--emb", s(&emb)])), 2);
}
