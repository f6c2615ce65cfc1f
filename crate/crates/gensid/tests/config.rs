use std::io::Write;

use gensid::config::{ConfigError, PipelineConfig};

fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
    PipelineConfig::from_toml(text)
}

#[test]
fn empty_file_gives_defaults() {
    assert_eq!(parse("").unwrap(), PipelineConfig::default());
}

#[test]
fn dotted_and_table_keys_agree() {
    let a = parse("cqsid.gamma = 0.001\n").unwrap();
    let b = parse("[cqsid]\ngamma = 0.001\n").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.cqsid.gamma, 0.001);
}

#[test]
fn unknown_key_is_named() {
    let e = parse("cqsid.gama = 1\n").unwrap_err();
    assert!(matches!(e, ConfigError::UnknownKey(_)));
    assert_eq!(e.to_string(), "unknown key cqsid.gama");
    assert!(matches!(parse("[nosuch]\nx = 1\n").unwrap_err(), ConfigError::UnknownKey(k) if k == "nosuch.x"));
}

#[test]
fn type_errors_and_syntax_errors_are_distinct() {
    assert!(matches!(parse("cqsid.gamma = \"abc\"\n").unwrap_err(), ConfigError::BadValue { key, .. } if key == "cqsid.gamma"));
    assert!(matches!(parse("cqsid.gamma = = 1\n").unwrap_err(), ConfigError::Syntax(_)));
    assert!(matches!(parse("rl.clip = 1.5\n").unwrap_err(), ConfigError::BadValue { .. }));
}

#[test]
fn missing_file_is_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let e = PipelineConfig::load(&dir.path().join("absent.toml")).unwrap_err();
    assert!(matches!(e, ConfigError::MissingFile(_)));
}

#[test]
fn load_reads_a_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "seed = 9\n[eval]\nbeams = [1, 3]\n").unwrap();
    let c = PipelineConfig::load(f.path()).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.eval.beams, vec![1, 3]);
}

#[test]
fn module_seeds_follow_the_root_seed() {
    let a = parse("seed = 3\n").unwrap();
    let b = PipelineConfig::default().with_seed(3);
    assert_eq!(a, b);
    let c = PipelineConfig::default().with_seed(4);
    assert_ne!(a.corpus.seed, c.corpus.seed);
    assert_ne!(a.rl.seed, c.rl.seed);
    assert_ne!(a.hash(), c.hash());
    for k in ["rl.seed", "cqsid.seed", "corpus.seed", "corpus.encoder_seed", "sft1.seed"] {
        assert!(matches!(parse(&format!("{k} = 1\n")).unwrap_err(), ConfigError::UnknownKey(_)), "{k}");
    }
}

#[test]
fn hash_ignores_the_work_directory() {
    let a = parse("workdir = \"x\"\n").unwrap();
    let b = parse("workdir = \"y\"\n").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), parse("cqsid.gamma = 0.5\n").unwrap().hash());
}

#[test]
fn echo_lists_requested_sections() {
    let c = PipelineConfig::default();
    let text = c.echo(&["rl"]);
    assert!(text.starts_with("rl.") || text.contains("\nrl."));
    assert!(text.contains("rl.group_size = 8"));
    assert!(!text.contains("cqsid."));
}
