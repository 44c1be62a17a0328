use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
num_accents = 2
vocab_size = 4
feature_dim = 3
tokens_min = 1
tokens_max = 3
n_train = 16
n_valid = 4
n_test = 6
";

const TINY_MODEL: &str = "\
epochs = 1
batch_frames = 60
g_ai_hidden = 4
g_as_hidden = 4
disc_hidden = 4
recon_hidden = 4
recon_layers = 1
las_enc_hidden = 6
las_enc_layers = 1
las_dec_hidden = 6
las_dec_layers = 1
token_embed = 4
";

fn accinv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accinv"))
        .args(args)
        .current_dir(dir)
        .env_remove("ACCINV_SEED")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

/// A failure prints exactly one `error[CODE]: ...` line.
fn fails_with(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{code}]: ")), "{err}");
}

#[test]
fn corpus_train_evaluate_report() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("corpus.cfg"), TINY).unwrap();
    fs::write(p.join("model.cfg"), TINY_MODEL).unwrap();
    ok(&accinv(&["corpus", "gen", "--config", "corpus.cfg", "--out", "c"], p));
    assert!(p.join("c/train.manifest").is_file());
    ok(&accinv(
        &["train", "--mode", "b1", "--train", "c/train.manifest", "--valid", "c/valid.manifest", "--units", "c/units.txt", "--config", "model.cfg", "--out", "b1"],
        p,
    ));
    ok(&accinv(&["decode", "--model", "b1/model.ackp", "--corpus", "c/test.manifest", "--set", "beam_size=2", "--out", "hyps.txt"], p));
    ok(&accinv(&["evaluate", "--test", "c/test.manifest", "--hyps", "hyps.txt", "--system", "B1", "--out", "ev"], p));
    ok(&accinv(&["evaluate", "--test", "c/test.manifest", "--model", "b1/model.ackp", "--set", "beam_size=2", "--system", "B1", "--out", "ev2"], p));
    // Scoring the saved hypotheses equals decoding and scoring in one go.
    assert_eq!(fs::read(p.join("ev/report.tsv")).unwrap(), fs::read(p.join("ev2/report.tsv")).unwrap());
    ok(&accinv(&["report", "--reports", "ev/report.tsv", "--logs", "b1/train.log", "--out", "rep"], p));
    let table = fs::read_to_string(p.join("rep/table.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("B1")).count(), 1);
    assert!(p.join("rep/curves.svg").is_file());
    ok(&accinv(&["probe", "--model", "b1/model.ackp", "--corpus", "c/test.manifest", "--set", "probe_iterations=5", "--out", "pr"], p));
    ok(&accinv(&["export-embeddings", "--model", "b1/model.ackp", "--corpus", "c/test.manifest", "--which", "g_as", "--out", "emb.aipf"], p));
    ok(&accinv(&["corpus", "split", "--manifest", "c/train.manifest", "--valid-fraction", "0.25", "--out", "sp"], p));

    // Resume continues a finished one-epoch run for another epoch.
    let more = accinv(
        &["train", "--mode", "b1", "--train", "c/train.manifest", "--resume", "b1/model.ackp", "--config", "model.cfg", "--set", "epochs=2", "--out", "b1b"],
        p,
    );
    ok(&more);
}

#[test]
fn errors_are_single_coded_lines() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fails_with(&accinv(&["frobnicate"], p), "E_USAGE");
    fails_with(&accinv(&["train", "--mode", "b1"], p), "E_USAGE");
    fails_with(&accinv(&["train", "--mode", "b1", "--train", "missing.manifest", "--out", "o"], p), "E_IO");
    fails_with(&accinv(&["train", "--mode", "bogus", "--train", "x", "--out", "o"], p), "E_VALIDATION");
    fails_with(&accinv(&["corpus", "gen", "--set", "no_such_key=1", "--out", "o"], p), "E_VALIDATION");
    fails_with(&accinv(&["recipe", "run", "nonexistent", "--out", "o"], p), "E_CONFIG");
    fs::write(p.join("r.tsv"), "garbage\n").unwrap();
    fails_with(&accinv(&["report", "--reports", "r.tsv", "--out", "o"], p), "E_PARSE");
    fs::write(p.join("c.cfg"), TINY).unwrap();
    ok(&accinv(&["corpus", "gen", "--config", "c.cfg", "--out", "c"], p));
    fails_with(&accinv(&["evaluate", "--test", "c/test.manifest", "--hyps", "/dev/null", "--out", "e"], p), "E_DATA");
    fails_with(&accinv(&["report", "--reports", "r.tsv", "--format", "html", "--out", "o"], p), "E_VALIDATION");
}
