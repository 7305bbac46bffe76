//! Exercises the C ABI from Rust exactly as a C caller would: raw pointers,
//! status codes, and explicit frees.

use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use masklab::corpus::CorpusConfig;
use masklab::experiment::{CorpusSource, ExperimentManifest, LmSize, PolicySpec};
use masklab::trainers::StageConfig;
use masklab_ffi::*;

fn last_error() -> String {
    unsafe {
        CStr::from_ptr(masklab_last_error())
            .to_str()
            .expect("error messages are UTF-8")
            .to_string()
    }
}

fn c_string(text: &str) -> CString {
    CString::new(text).unwrap()
}

fn tiny_config_json() -> CString {
    let config = CorpusConfig {
        n_entities: 12,
        n_documents: 40,
        sentences_per_doc: (1, 2),
        seed: 7,
        ..CorpusConfig::default()
    };
    c_string(&serde_json::to_string(&config).unwrap())
}

fn generate_tiny_corpus() -> *mut MasklabCorpus {
    let config = tiny_config_json();
    let mut corpus = ptr::null_mut();
    let status = unsafe { masklab_corpus_generate(config.as_ptr(), &mut corpus) };
    assert_eq!(status, MasklabStatus::Ok, "{}", last_error());
    assert!(!corpus.is_null());
    corpus
}

#[test]
fn version_is_a_dotted_string() {
    let version = unsafe { CStr::from_ptr(masklab_version()) }.to_str().unwrap();
    assert!(version.contains('.'), "unexpected version {version:?}");
}

#[test]
fn null_arguments_are_rejected_with_a_message() {
    let mut corpus = ptr::null_mut();
    let status = unsafe { masklab_corpus_generate(ptr::null(), &mut corpus) };
    assert_eq!(status, MasklabStatus::NullArgument);
    assert!(last_error().contains("config_json"), "{}", last_error());

    let config = c_string("{}");
    let status = unsafe { masklab_corpus_generate(config.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, MasklabStatus::NullArgument);
    assert!(last_error().contains("out_corpus"), "{}", last_error());
}

#[test]
fn invalid_utf8_is_rejected() {
    let bytes: [c_char; 3] = [-1i8 as c_char, -2i8 as c_char, 0];
    let mut corpus = ptr::null_mut();
    let status = unsafe { masklab_corpus_generate(bytes.as_ptr(), &mut corpus) };
    assert_eq!(status, MasklabStatus::InvalidUtf8);
    assert!(last_error().contains("UTF-8"), "{}", last_error());
}

#[test]
fn malformed_json_is_a_contract_error() {
    let config = c_string("not a config");
    let mut corpus = ptr::null_mut();
    let status = unsafe { masklab_corpus_generate(config.as_ptr(), &mut corpus) };
    assert_eq!(status, MasklabStatus::Contract);
    assert!(!last_error().is_empty());
}

#[test]
fn generate_then_inspect_counts_and_lengths() {
    let corpus = generate_tiny_corpus();
    unsafe {
        let mut documents = 0usize;
        let mut triplets = 0usize;
        let mut vocab = 0usize;
        assert_eq!(
            masklab_corpus_document_count(corpus, &mut documents),
            MasklabStatus::Ok
        );
        assert_eq!(
            masklab_corpus_triplet_count(corpus, &mut triplets),
            MasklabStatus::Ok
        );
        assert_eq!(
            masklab_corpus_vocab_size(corpus, &mut vocab),
            MasklabStatus::Ok
        );
        assert_eq!(documents, 40);
        assert!(triplets > 0);
        assert!(vocab > 0);

        let mut len = 0usize;
        assert_eq!(
            masklab_corpus_document_len(corpus, 0, &mut len),
            MasklabStatus::Ok
        );
        assert!(len > 0);
        assert_eq!(
            masklab_corpus_document_len(corpus, documents, &mut len),
            MasklabStatus::Contract
        );
        assert!(last_error().contains("out of range"), "{}", last_error());
        masklab_corpus_free(corpus);
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = c_string(dir.path().join("corpus").to_str().unwrap());
    let corpus = generate_tiny_corpus();
    unsafe {
        assert_eq!(
            masklab_corpus_save(corpus, corpus_dir.as_ptr()),
            MasklabStatus::Ok,
            "{}",
            last_error()
        );

        let mut reloaded = ptr::null_mut();
        assert_eq!(
            masklab_corpus_load(corpus_dir.as_ptr(), &mut reloaded),
            MasklabStatus::Ok,
            "{}",
            last_error()
        );
        let (mut a, mut b) = (0usize, 0usize);
        assert_eq!(
            masklab_corpus_triplet_count(corpus, &mut a),
            MasklabStatus::Ok
        );
        assert_eq!(
            masklab_corpus_triplet_count(reloaded, &mut b),
            MasklabStatus::Ok
        );
        assert_eq!(a, b);
        masklab_corpus_free(reloaded);
        masklab_corpus_free(corpus);
    }
}

#[test]
fn loading_an_empty_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = c_string(dir.path().to_str().unwrap());
    let mut corpus = ptr::null_mut();
    let status = unsafe { masklab_corpus_load(empty.as_ptr(), &mut corpus) };
    assert_eq!(status, MasklabStatus::Io);
    assert!(!last_error().is_empty());
}

#[test]
fn ssm_policy_masks_a_document_deterministically() {
    let corpus = generate_tiny_corpus();
    let spec = c_string("{\"name\":\"ssm\"}");
    unsafe {
        let mut policy = ptr::null_mut();
        assert_eq!(
            masklab_policy_build(corpus, spec.as_ptr(), &mut policy),
            MasklabStatus::Ok,
            "{}",
            last_error()
        );

        let mut name = ptr::null_mut();
        assert_eq!(masklab_policy_name(policy, &mut name), MasklabStatus::Ok);
        assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "ssm");
        masklab_string_free(name);

        let mut len = 0usize;
        assert_eq!(
            masklab_corpus_document_len(corpus, 0, &mut len),
            MasklabStatus::Ok
        );

        let mut flags = vec![0xAAu8; len];
        let mut written = 0usize;
        assert_eq!(
            masklab_policy_mask(policy, corpus, 0, 11, flags.as_mut_ptr(), len, &mut written),
            MasklabStatus::Ok,
            "{}",
            last_error()
        );
        assert_eq!(written, len);
        assert!(flags.iter().all(|&f| f <= 1), "flags {flags:?}");

        let mut again = vec![0u8; len];
        assert_eq!(
            masklab_policy_mask(policy, corpus, 0, 11, again.as_mut_ptr(), len, &mut written),
            MasklabStatus::Ok
        );
        assert_eq!(flags, again, "equal seeds must reproduce equal decisions");

        let mut other_seed = vec![0u8; len];
        assert_eq!(
            masklab_policy_mask(
                policy,
                corpus,
                0,
                12,
                other_seed.as_mut_ptr(),
                len,
                &mut written
            ),
            MasklabStatus::Ok
        );

        let mut short = vec![0u8; len.saturating_sub(1)];
        let mut needed = 0usize;
        assert_eq!(
            masklab_policy_mask(
                policy,
                corpus,
                0,
                11,
                short.as_mut_ptr(),
                short.len(),
                &mut needed
            ),
            MasklabStatus::Contract
        );
        assert_eq!(needed, len, "undersized call must still report the length");
        assert!(last_error().contains("capacity"), "{}", last_error());

        masklab_policy_free(policy);
        masklab_corpus_free(corpus);
    }
}

#[test]
fn the_none_spec_is_rejected() {
    let corpus = generate_tiny_corpus();
    let spec = c_string("{\"name\":\"none\"}");
    let mut policy = ptr::null_mut();
    let status = unsafe { masklab_policy_build(corpus, spec.as_ptr(), &mut policy) };
    assert_eq!(status, MasklabStatus::Contract);
    assert!(last_error().contains("none"), "{}", last_error());
    unsafe { masklab_corpus_free(corpus) };
}

#[test]
fn string_free_accepts_null() {
    unsafe { masklab_string_free(ptr::null_mut()) };
}

#[test]
fn run_experiment_produces_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ExperimentManifest {
        corpus: CorpusSource::Config(CorpusConfig {
            n_entities: 12,
            n_documents: 40,
            sentences_per_doc: (1, 2),
            seed: 7,
            ..CorpusConfig::default()
        }),
        policy: PolicySpec::Rand { rate: 0.15 },
        lm: LmSize {
            d_embed: 8,
            hidden: 8,
        },
        stage1: StageConfig {
            batch_size: 8,
            total_updates: 12,
            ..StageConfig::default()
        },
        stage2: StageConfig {
            batch_size: 8,
            max_epochs: 1,
            ..StageConfig::default()
        },
        seeds: vec![0],
        out_dir: dir.path().join("run"),
    };
    let manifest_json = c_string(&serde_json::to_string(&manifest).unwrap());
    let mut report = ptr::null_mut();
    let status = unsafe { masklab_run_experiment(manifest_json.as_ptr(), &mut report) };
    assert_eq!(status, MasklabStatus::Ok, "{}", last_error());

    let text = unsafe { CStr::from_ptr(report) }.to_str().unwrap().to_string();
    unsafe { masklab_string_free(report) };
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["report"]["split"], "test");
    assert!(parsed["report"]["em_mean"].is_number());
    assert!(parsed["summary_line"].as_str().unwrap().starts_with("rand,0,test,"));
    let eval_path = PathBuf::from(parsed["eval_path"].as_str().unwrap());
    assert!(eval_path.exists());
}

#[test]
fn run_experiment_rejects_an_invalid_manifest() {
    // Empty out_dir fails validation before anything touches the filesystem.
    let manifest = c_string(
        "{\"policy\":{\"name\":\"rand\"},\"out_dir\":\"\",\"seeds\":[0]}",
    );
    let mut report = ptr::null_mut();
    let status = unsafe { masklab_run_experiment(manifest.as_ptr(), &mut report) };
    assert_eq!(status, MasklabStatus::Contract);
    assert!(!last_error().is_empty());
}
