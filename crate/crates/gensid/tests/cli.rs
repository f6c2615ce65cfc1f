use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
items = 300
queries = 150
users = 40
[cqsid]
epochs = 3
[sft1]
epochs = 1
[sft2]
epochs = 1
[sft3]
epochs = 1
[rl]
steps = 2
batch_size = 4
[eval]
beams = [1, 5]
max_cases = 20
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn work(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, work: &str, args: &[&str]) -> Output {
        self.run_env(work, args, None)
    }

    fn run_env(&self, work: &str, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gensid"));
        cmd.arg("--config").arg(self.dir.path().join("tiny.toml")).arg("--workdir").arg(self.work(work)).args(args);
        cmd.env_remove("GENSID_SEED").env("RUST_LOG", "warn");
        if let Some(s) = seed {
            cmd.env("GENSID_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, work: &str, args: &[&str]) -> String {
        let out = self.run(work, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const PIPELINE: &[&[&str]] = &[
    &["gen-corpus"],
    &["train-cqsid"],
    &["assign-sids"],
    &["postprocess"],
    &["build-index"],
    &["train-sft", "--stage", "1"],
    &["train-sft", "--stage", "2"],
    &["train-sft", "--stage", "3"],
    &["train-rl", "--k", "2"],
    &["eval", "--protocol", "beam"],
    &["eval", "--protocol", "top-k"],
    &["eval", "--protocol", "exposure", "--model", "rl-k2"],
    &["infer", "--beam", "3"],
    &["attach-items"],
];

/// Every file under `root`, manifests without their timing lines.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = std::fs::read(&p).unwrap();
            if p.parent().is_some_and(|q| q.ends_with("manifests")) {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text.lines().filter(|l| !l.starts_with("seconds")).collect::<Vec<_>>().join("\n").into_bytes();
            }
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}

#[test]
fn missing_prerequisites_name_the_prior_subcommand() {
    let env = Env::new();
    let o = env.run("w", &["train-cqsid"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run gen-corpus first"), "{}", stderr(&o));

    env.ok("w", &["gen-corpus"]);
    let o = env.run("w", &["train-sft", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run assign-sids/postprocess first"), "{}", stderr(&o));

    let o = env.run("w", &["postprocess"]);
    assert!(stderr(&o).contains("run assign-sids first"));
    let o = env.run("w", &["infer", "--beam", "2"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_exit_with_two() {
    let env = Env::new();
    let o = env.run("w", &["--set", "cqsid.gama=1", "gen-corpus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key cqsid.gama"));

    let o = Command::new(env!("CARGO_BIN_EXE_gensid")).args(["--config", "/nonexistent/x.toml", "gen-corpus"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));

    let o = env.run_env("w", &["gen-corpus"], Some("abc"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_four() {
    let env = Env::new();
    for step in &PIPELINE[..5] {
        env.ok("w", step);
    }
    let o = env.run("w", &["--set", "sft1.lr=1e300", "train-sft", "--stage", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn seed_override_from_environment() {
    let env = Env::new();
    assert!(env.run_env("a", &["gen-corpus"], Some("2")).status.success());
    env.ok("b", &["--set", "seed=2", "gen-corpus"]);
    env.ok("c", &["gen-corpus"]);
    let (a, b, c) = (snapshot(&env.work("a")), snapshot(&env.work("b")), snapshot(&env.work("c")));
    let items = Path::new("corpus/items.tsv");
    assert_eq!(a[items], b[items]);
    assert_ne!(a[items], c[items]);
}

#[test]
fn staged_pipeline_is_reproducible() {
    let env = Env::new();
    for w in ["one", "two"] {
        for step in PIPELINE {
            env.ok(w, step);
        }
    }
    let (a, b) = (snapshot(&env.work("one")), snapshot(&env.work("two")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{} differs", k.display());
    }
    for k in ["models/sft3.ckpt", "models/rl-k2.ckpt", "sids.tsv", "reports/rl-k2_exposure.txt", "manifests/train-rl-k2.txt"] {
        assert!(a.contains_key(Path::new(k)), "{k}");
    }
    let manifest = String::from_utf8(a[Path::new("manifests/train-sft-3.txt")].clone()).unwrap();
    assert!(manifest.contains("config_hash = "));
    assert!(manifest.contains("seed = 1"));
    assert!(manifest.contains("input models/sft2.ckpt = "));
    assert!(manifest.contains("output models/sft3.ckpt = "));

    let log = String::from_utf8(a[Path::new("logs/rl-k2.tsv")].clone()).unwrap();
    assert_eq!(log.lines().next(), Some("step\tmean_reward\tmean_kl\tclip_frac\tn_expert"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn repro_tables_emits_four_tables() {
    let env = Env::new();
    let out = env.ok("w", &["repro-tables"]);
    assert_eq!(out.matches("== ").count(), 4, "{out}");
    for needle in ["cqsid.clk", "rqvae.clk", "no_cate.top100", "stage3.pvr", "k0.clk", "k2.pvr", "k4.clk"] {
        assert!(out.contains(needle), "{needle}");
    }
    assert_eq!(std::fs::read_to_string(env.work("w").join("tables.txt")).unwrap(), out);
}
