use std::fs;
use std::path::{Path, PathBuf};

use phishloc::checkpoint::Checkpoint;
use phishloc::cli::{
    evaluate, run_from_args, test_split, CHECKPOINT_FILE, CONFIG_ECHO_FILE, CORPUS_FILE, EXPLAIN_FILE, LOG_FILE,
    METRICS_FILE, SIDECAR_FILE,
};
use phishloc::lexicon::TriggerLexicon;
use phishloc::metrics::Explanation;
use phishloc::synth::read_sidecar;
use phishloc::text::{read_corpus, PreparedEmail};
use phishloc::trainer::{prepare_splits, validate_checkpoint};

const SMALL_MODEL: &str = "\
max_sentences = 12
tokens_per_sentence = 16
embed_dim = 12
selector_hidden = [12]
classifier_hidden = [12]
batch_size = 32
";

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_from_args(std::iter::once("phishloc").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, format!("{SMALL_MODEL}{extra}")).unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, out: &str) -> PathBuf {
        let dir = self.path(out);
        let (code, _) = run(&["gen-data", "--config", s(&self.config), "--n", "200", "--seed", "3", "--out", s(&dir)]);
        assert_eq!(code, 0);
        dir
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> (i32, PathBuf) {
        let dir = self.path(out);
        let corpus = data.join(CORPUS_FILE);
        let mut args = vec!["train", "--config", s(&self.config), "--corpus", s(&corpus), "--out", s(&dir)];
        args.extend_from_slice(extra);
        (run(&args).0, dir)
    }
}

#[test]
fn gen_data_writes_a_reproducible_corpus() {
    let ws = Workspace::new("");
    let dir = ws.path("a");
    let (code, out) = run(&["gen-data", "--n", "200", "--seed", "7", "--out", s(&dir)]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "200 emails (100 phishing)");
    assert_eq!(read_corpus(&dir.join(CORPUS_FILE)).unwrap().len(), 200);
    assert_eq!(read_sidecar(&dir.join(SIDECAR_FILE)).unwrap().len(), 200);

    let again = ws.path("b");
    assert_eq!(run(&["gen-data", "--n", "200", "--seed", "7", "--out", s(&again)]).0, 0);
    for f in [CORPUS_FILE, SIDECAR_FILE] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
    let other = ws.path("c");
    assert_eq!(run(&["gen-data", "--n", "200", "--seed", "8", "--out", s(&other)]).0, 0);
    assert_ne!(fs::read(dir.join(CORPUS_FILE)).unwrap(), fs::read(other.join(CORPUS_FILE)).unwrap());
}

#[test]
fn invalid_settings_exit_two_without_output() {
    let ws = Workspace::new("");
    let dir = ws.path("bad");
    let (code, _) = run(&["gen-data", "--n", "20", "--phishing-ratio", "1.5", "--out", s(&dir)]);
    assert_eq!(code, 2);
    assert!(!dir.exists());

    let missing = ws.path("nothing.jsonl");
    assert_eq!(run(&["train", "--corpus", s(&missing), "--out", s(&ws.path("t"))]).0, 2);
    assert_eq!(run(&["eval", "--corpus", s(&missing)]).0, 2);
    assert_eq!(run(&["gen-data", "--bogus"]).0, 2);
    assert_eq!(run(&["--help"]).0, 0);

    let unknown = ws.path("unknown.toml");
    fs::write(&unknown, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let (code, _) = run(&["gen-data", "--config", s(&unknown), "--out", s(&ws.path("u"))]);
    assert_eq!(code, 2);
    assert!(!ws.path("u").exists());
}

#[test]
fn flags_override_the_config_file() {
    let ws = Workspace::new("lambda = 0.5\nepochs = 1\n");
    let data = ws.gen("data");
    let (code, dir) = ws.train(&data, "t", &["--lambda", "0.25"]);
    assert_eq!(code, 0);
    let echo = fs::read_to_string(dir.join(CONFIG_ECHO_FILE)).unwrap();
    assert!(echo.contains("lambda = 0.25"), "{echo}");
    assert!(echo.contains("epochs = 1"), "{echo}");
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.train_config.lambda, 0.25);
    assert_eq!(ckpt.train_config.model.embed_dim, 12);
}

#[test]
fn train_eval_explain_round_trip() {
    let ws = Workspace::new("epochs = 2\n");
    let data = ws.gen("data");
    let corpus_bytes = fs::read(data.join(CORPUS_FILE)).unwrap();

    let (code, a) = ws.train(&data, "a", &[]);
    assert_eq!(code, 0);
    let (_, b) = ws.train(&data, "b", &[]);
    for f in [LOG_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join(LOG_FILE)).unwrap();
    assert!(log.starts_with("epoch,step,ce,ib_penalty,total,random_mask_loss,grad_norm_pre,grad_norm_post,val_accuracy"));

    let echoed = a.join(CONFIG_ECHO_FILE);
    let rerun = ws.path("rerun");
    let corpus = data.join(CORPUS_FILE);
    assert_eq!(run(&["train", "--config", s(&echoed), "--corpus", s(&corpus), "--out", s(&rerun)]).0, 0);
    assert_eq!(fs::read(a.join(LOG_FILE)).unwrap(), fs::read(rerun.join(LOG_FILE)).unwrap());

    let ckpt_path = a.join(CHECKPOINT_FILE);
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let splits = prepare_splits(&read_corpus(&corpus).unwrap(), &ckpt.train_config).unwrap();
    let val: Vec<&PreparedEmail> = splits.validation.iter().collect();
    assert_eq!(validate_checkpoint(&ckpt.model, &val).unwrap().accuracy, ckpt.meta.val_accuracy);
    assert_eq!(splits.vocab, ckpt.vocabulary);
    let sidecar = data.join(SIDECAR_FILE);
    let ev = ws.path("eval");
    let (code, printed) = run(&[
        "eval", "--checkpoint", s(&ckpt_path), "--corpus", s(&corpus), "--sidecar", s(&sidecar), "--out", s(&ev),
    ]);
    assert_eq!(code, 0);
    assert_eq!(printed.lines().count(), 5);
    let metrics = fs::read_to_string(ev.join(METRICS_FILE)).unwrap();
    let rows: Vec<(String, f64)> = metrics
        .lines()
        .skip(1)
        .map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            (parts[0].to_string(), parts[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|(_, v)| (0.0..=1.0).contains(v)));

    let test = test_split(&ckpt, &read_corpus(&corpus).unwrap()).unwrap();
    let direct = evaluate(&ckpt, &test, &TriggerLexicon::default_lexicon(), Some(&read_sidecar(&sidecar).unwrap())).unwrap();
    for ((name, value), d) in rows.iter().zip(&direct) {
        assert_eq!(name, &d.metric);
        assert_eq!(*value, d.value);
    }

    let ev2 = ws.path("eval2");
    let (code, _) = run(&["eval", "--checkpoint", s(&ckpt_path), "--corpus", s(&corpus), "--out", s(&ev2)]);
    assert_eq!(code, 0);
    let metrics = fs::read_to_string(ev2.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(!metrics.contains("localization_accuracy"));

    let (code, stdout) = run(&["explain", "--checkpoint", s(&ckpt_path), "--corpus", s(&corpus), "--k", "3"]);
    assert_eq!(code, 0);
    let lines: Vec<Explanation> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    assert!(lines.iter().all(|e| e.ranking.len() == 3));
    let (_, again) = run(&["explain", "--checkpoint", s(&ckpt_path), "--corpus", s(&corpus), "--k", "3"]);
    assert_eq!(stdout, again);

    let ex = ws.path("ex");
    let text = "hello team. please act now to avoid suspension.";
    let (code, _) = run(&["explain", "--checkpoint", s(&ckpt_path), "--text", text, "--k", "5", "--out", s(&ex)]);
    assert_eq!(code, 0);
    let written = fs::read_to_string(ex.join(EXPLAIN_FILE)).unwrap();
    let e: Explanation = serde_json::from_str(written.trim()).unwrap();
    assert_eq!(e.email_id, "text");
    assert_eq!(e.ranking.len(), 2);

    let empty = ws.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(run(&["explain", "--checkpoint", s(&ckpt_path), "--corpus", s(&empty)]).0, 2);
    assert_eq!(run(&["explain", "--checkpoint", s(&ckpt_path)]).0, 2);

    assert_eq!(fs::read(data.join(CORPUS_FILE)).unwrap(), corpus_bytes);
}

#[test]
fn penalty_weight_reaches_the_log() {
    let ws = Workspace::new("epochs = 1\n");
    let data = ws.gen("data");
    let (c0, a) = ws.train(&data, "a", &["--lambda", "0"]);
    let (c1, b) = ws.train(&data, "b", &["--lambda", "0.1"]);
    assert_eq!((c0, c1), (0, 0));
    let column = |dir: &Path, name: &str| -> Vec<String> {
        let log = fs::read_to_string(dir.join(LOG_FILE)).unwrap();
        let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
        let i = header.iter().position(|h| *h == name).unwrap();
        log.lines().skip(1).map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
    };
    assert_ne!(column(&a, "ib_penalty"), column(&b, "ib_penalty"));
    for (ce, total) in column(&a, "ce").iter().zip(column(&a, "total")) {
        assert_eq!(ce, &total);
    }

    let (c2, c) = ws.train(&data, "c", &["--no-ib", "--no-ddm"]);
    assert_eq!(c2, 0);
    assert!(column(&c, "random_mask_loss").iter().all(String::is_empty));
    let ckpt = Checkpoint::load(&c.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.train_config.lambda, 0.0);
    assert!(!ckpt.train_config.use_ddm);
}

#[test]
fn divergence_exits_three() {
    let ws = Workspace::new("learning_rate = 1e200\nepochs = 1\n");
    let data = ws.gen("data");
    let (code, _) = ws.train(&data, "t", &[]);
    assert_eq!(code, 3);
}
