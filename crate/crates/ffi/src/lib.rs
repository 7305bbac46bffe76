//! C ABI for the masklab masking-policy laboratory.
//!
//! Every function returns a [`MasklabStatus`]. Out-values are written through
//! caller-supplied pointers only on [`MasklabStatus::Ok`]; on any other
//! status the thread-local diagnostic is updated and can be read with
//! [`masklab_last_error`]. Handles are opaque and released with their
//! matching `_free` function; strings returned through `char **` out-params
//! are released with [`masklab_string_free`]. All entry points catch panics,
//! so no unwind ever crosses the ABI boundary.

use std::any::Any;
use std::cell::RefCell;
use std::error::Error;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use masklab::corpus::{generate_corpus, CorpusConfig};
use masklab::diffcore::RngStream;
use masklab::experiment::{
    instantiate_policy, load_corpus_dir, run_experiment, save_corpus_dir, split_triplets,
    ExperimentCorpus, ExperimentManifest, PolicySpec,
};
use masklab::lmodel::{init_lm_params, LmConfig};
use masklab::trainers::MaskPolicy;

/// Seed for the shared LM initialisation, matching the experiment driver.
const LM_INIT_SEED: u64 = 0;

/// Result of every `masklab_*` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MasklabStatus {
    /// Success; out-values are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or arguments (bad JSON, out-of-range index,
    /// undersized buffer, failed validation).
    Contract = 3,
    /// An underlying filesystem operation failed.
    Io = 4,
    /// A panic was caught at the ABI boundary.
    Panic = 5,
}

/// Opaque corpus handle: documents, fine-tune triplets, vocabulary, and the
/// closed-book entity split.
pub struct MasklabCorpus {
    inner: ExperimentCorpus,
}

/// Opaque masking-policy handle, bound to the vocabulary of the corpus it
/// was built from.
pub struct MasklabPolicy {
    inner: MaskPolicy,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).expect("NUL bytes were stripped");
    });
}

fn describe(err: &dyn Error) -> String {
    let mut message = err.to_string();
    let mut source = err.source();
    while let Some(cause) = source {
        message.push_str(": ");
        message.push_str(&cause.to_string());
        source = cause.source();
    }
    message
}

fn chain_has_io(err: &(dyn Error + 'static)) -> bool {
    let mut cursor: Option<&(dyn Error + 'static)> = Some(err);
    while let Some(err) = cursor {
        if err.downcast_ref::<std::io::Error>().is_some() {
            return true;
        }
        cursor = err.source();
    }
    false
}

/// Records `err` as the thread-local diagnostic and classifies it.
fn fail<E: Error + 'static>(err: &E) -> MasklabStatus {
    set_error(&describe(err));
    if chain_has_io(err) {
        MasklabStatus::Io
    } else {
        MasklabStatus::Contract
    }
}

fn contract(message: &str) -> MasklabStatus {
    set_error(message);
    MasklabStatus::Contract
}

fn panic_message(payload: &(dyn Any + Send)) -> String {
    if let Some(text) = payload.downcast_ref::<&str>() {
        (*text).to_string()
    } else if let Some(text) = payload.downcast_ref::<String>() {
        text.clone()
    } else {
        "unknown panic".to_string()
    }
}

fn guard<F: FnOnce() -> MasklabStatus>(body: F) -> MasklabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            set_error(&format!("panic: {}", panic_message(payload.as_ref())));
            MasklabStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, MasklabStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(MasklabStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        MasklabStatus::InvalidUtf8
    })
}

fn required_out<T>(ptr: *mut T, name: &str) -> Result<(), MasklabStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        Err(MasklabStatus::NullArgument)
    } else {
        Ok(())
    }
}

/// # Safety
/// `ptr` must be null or a live corpus handle.
unsafe fn required_corpus<'a>(
    ptr: *const MasklabCorpus,
    name: &str,
) -> Result<&'a ExperimentCorpus, MasklabStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(MasklabStatus::NullArgument);
    }
    Ok(&(*ptr).inner)
}

macro_rules! try_status {
    ($expr:expr) => {
        match $expr {
            Ok(value) => value,
            Err(status) => return status,
        }
    };
}

/// Returns the library version as a static NUL-terminated string. Never
/// fails; the pointer must not be freed.
#[no_mangle]
pub extern "C" fn masklab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the diagnostic recorded by the most recent failing call on this
/// thread (empty string if none). The pointer stays valid until the next
/// failing call on the same thread; it must not be freed.
#[no_mangle]
pub extern "C" fn masklab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Frees a string returned through a `char **` out-parameter. Null is a
/// no-op.
///
/// # Safety
/// `string` must be null or a pointer previously returned by this library
/// and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn masklab_string_free(string: *mut c_char) {
    if !string.is_null() {
        drop(CString::from_raw(string));
    }
}

/// Generates a corpus from a JSON configuration (`{}` selects the defaults)
/// and writes the new handle to `out_corpus`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_corpus` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_generate(
    config_json: *const c_char,
    out_corpus: *mut *mut MasklabCorpus,
) -> MasklabStatus {
    guard(|| {
        let config_json = try_status!(required_str(config_json, "config_json"));
        try_status!(required_out(out_corpus, "out_corpus"));
        let config: CorpusConfig = match serde_json::from_str(config_json) {
            Ok(config) => config,
            Err(err) => return fail(&err),
        };
        let generated = match generate_corpus(&config) {
            Ok(generated) => generated,
            Err(err) => return fail(&err),
        };
        let handle = Box::new(MasklabCorpus {
            inner: ExperimentCorpus::from(generated),
        });
        *out_corpus = Box::into_raw(handle);
        MasklabStatus::Ok
    })
}

/// Loads a corpus previously saved with [`masklab_corpus_save`] (or the
/// `gen-corpus` CLI command) and writes the new handle to `out_corpus`.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `out_corpus` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_load(
    dir: *const c_char,
    out_corpus: *mut *mut MasklabCorpus,
) -> MasklabStatus {
    guard(|| {
        let dir = try_status!(required_str(dir, "dir"));
        try_status!(required_out(out_corpus, "out_corpus"));
        let inner = match load_corpus_dir(Path::new(dir)) {
            Ok(inner) => inner,
            Err(err) => return fail(&err),
        };
        *out_corpus = Box::into_raw(Box::new(MasklabCorpus { inner }));
        MasklabStatus::Ok
    })
}

/// Saves the corpus into `dir` (created if missing) as the standard four
/// files: `corpus.jsonl`, `triplets.jsonl`, `vocab.json`,
/// `entity-split.json`.
///
/// # Safety
/// `corpus` must be a live handle and `dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_save(
    corpus: *const MasklabCorpus,
    dir: *const c_char,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        let dir = try_status!(required_str(dir, "dir"));
        match save_corpus_dir(Path::new(dir), corpus) {
            Ok(()) => MasklabStatus::Ok,
            Err(err) => fail(&err),
        }
    })
}

/// Writes the number of documents to `out_count`.
///
/// # Safety
/// `corpus` must be a live handle and `out_count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_document_count(
    corpus: *const MasklabCorpus,
    out_count: *mut usize,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        try_status!(required_out(out_count, "out_count"));
        *out_count = corpus.documents.len();
        MasklabStatus::Ok
    })
}

/// Writes the number of fine-tune triplets to `out_count`.
///
/// # Safety
/// `corpus` must be a live handle and `out_count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_triplet_count(
    corpus: *const MasklabCorpus,
    out_count: *mut usize,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        try_status!(required_out(out_count, "out_count"));
        *out_count = corpus.triplets.len();
        MasklabStatus::Ok
    })
}

/// Writes the vocabulary size to `out_size`.
///
/// # Safety
/// `corpus` must be a live handle and `out_size` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_vocab_size(
    corpus: *const MasklabCorpus,
    out_size: *mut usize,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        try_status!(required_out(out_size, "out_size"));
        *out_size = corpus.vocab.len();
        MasklabStatus::Ok
    })
}

/// Writes the token length of document `doc_index` to `out_len`. Fails with
/// `Contract` when the index is out of range.
///
/// # Safety
/// `corpus` must be a live handle and `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_document_len(
    corpus: *const MasklabCorpus,
    doc_index: usize,
    out_len: *mut usize,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        try_status!(required_out(out_len, "out_len"));
        match corpus.documents.get(doc_index) {
            Some(doc) => {
                *out_len = doc.tokens.len();
                MasklabStatus::Ok
            }
            None => contract(&format!(
                "document index {doc_index} out of range for {} documents",
                corpus.documents.len()
            )),
        }
    })
}

/// Releases a corpus handle. Null is a no-op.
///
/// # Safety
/// `corpus` must be null or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn masklab_corpus_free(corpus: *mut MasklabCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Builds a masking policy from a JSON spec (e.g. `{"name":"ssm"}` or
/// `{"name":"rand","rate":0.15}`), training the learned arms on the corpus'
/// fine-tune-train triplets unless the spec names a checkpoint. The baseline
/// spec `{"name":"none"}` is rejected because it names the absence of a
/// policy.
///
/// # Safety
/// `corpus` must be a live handle, `spec_json` a NUL-terminated string, and
/// `out_policy` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_policy_build(
    corpus: *const MasklabCorpus,
    spec_json: *const c_char,
    out_policy: *mut *mut MasklabPolicy,
) -> MasklabStatus {
    guard(|| {
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        let spec_json = try_status!(required_str(spec_json, "spec_json"));
        try_status!(required_out(out_policy, "out_policy"));
        let spec: PolicySpec = match serde_json::from_str(spec_json) {
            Ok(spec) => spec,
            Err(err) => return fail(&err),
        };
        let lm_config = LmConfig {
            vocab: corpus.vocab.len(),
            ..LmConfig::default()
        };
        let lm_init = match init_lm_params(&lm_config, LM_INIT_SEED) {
            Ok(store) => store,
            Err(err) => return fail(&err),
        };
        let (train_triplets, _) = split_triplets(corpus);
        let policy =
            match instantiate_policy(&spec, &train_triplets, &lm_init, corpus.vocab.len()) {
                Ok(Some(policy)) => policy,
                Ok(None) => {
                    return contract("policy spec \"none\" does not name a masking policy")
                }
                Err(err) => return fail(&err),
            };
        *out_policy = Box::into_raw(Box::new(MasklabPolicy { inner: policy }));
        MasklabStatus::Ok
    })
}

/// Writes the policy's canonical name (e.g. `"ssm"`, `"supervised-top1"`)
/// to `out_name` as a freshly allocated string; release it with
/// [`masklab_string_free`].
///
/// # Safety
/// `policy` must be a live handle and `out_name` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_policy_name(
    policy: *const MasklabPolicy,
    out_name: *mut *mut c_char,
) -> MasklabStatus {
    guard(|| {
        if policy.is_null() {
            set_error("policy must not be null");
            return MasklabStatus::NullArgument;
        }
        try_status!(required_out(out_name, "out_name"));
        let name = CString::new((*policy).inner.name()).expect("policy names are NUL-free");
        *out_name = name.into_raw();
        MasklabStatus::Ok
    })
}

/// Samples this policy's masking decisions for document `doc_index` into the
/// caller's buffer: one byte per token, 1 = masked. `out_len` always
/// receives the document length; when `capacity` is too small the call fails
/// with `Contract` and writes nothing else (query the length first with
/// [`masklab_corpus_document_len`]). Equal seeds reproduce equal decisions.
///
/// # Safety
/// `policy` and `corpus` must be live handles; `out_flags` must point to at
/// least `capacity` writable bytes; `out_len` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_policy_mask(
    policy: *const MasklabPolicy,
    corpus: *const MasklabCorpus,
    doc_index: usize,
    seed: u64,
    out_flags: *mut u8,
    capacity: usize,
    out_len: *mut usize,
) -> MasklabStatus {
    guard(|| {
        if policy.is_null() {
            set_error("policy must not be null");
            return MasklabStatus::NullArgument;
        }
        let corpus = try_status!(required_corpus(corpus, "corpus"));
        try_status!(required_out(out_len, "out_len"));
        let doc = match corpus.documents.get(doc_index) {
            Some(doc) => doc,
            None => {
                return contract(&format!(
                    "document index {doc_index} out of range for {} documents",
                    corpus.documents.len()
                ))
            }
        };
        *out_len = doc.tokens.len();
        if capacity < doc.tokens.len() {
            return contract(&format!(
                "buffer capacity {capacity} is smaller than the document length {}",
                doc.tokens.len()
            ));
        }
        try_status!(required_out(out_flags, "out_flags"));
        // Same stream labelling as the CLI `apply-policy` command, so equal
        // seeds agree across both surfaces.
        let mut stream = RngStream::new(seed, "apply").child(&format!("mask{}", doc.doc_id));
        let (decisions, _, _) = match (*policy).inner.mask_plan(doc, &mut stream) {
            Ok(plan) => plan,
            Err(err) => return fail(&err),
        };
        for i in 0..decisions.len() {
            *out_flags.add(i) = u8::from(decisions.is_masked(i));
        }
        MasklabStatus::Ok
    })
}

/// Releases a policy handle. Null is a no-op.
///
/// # Safety
/// `policy` must be null or a live handle, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn masklab_policy_free(policy: *mut MasklabPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Runs the full two-stage experiment described by a manifest JSON document
/// and writes a summary JSON string (report plus artifact paths) to
/// `out_report_json`; release it with [`masklab_string_free`]. Artifacts
/// land in the manifest's `out_dir` exactly as with the CLI `run-experiment`
/// command.
///
/// # Safety
/// `manifest_json` must be a NUL-terminated string and `out_report_json` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn masklab_run_experiment(
    manifest_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> MasklabStatus {
    guard(|| {
        let manifest_json = try_status!(required_str(manifest_json, "manifest_json"));
        try_status!(required_out(out_report_json, "out_report_json"));
        let manifest: ExperimentManifest = match serde_json::from_str(manifest_json) {
            Ok(manifest) => manifest,
            Err(err) => return fail(&err),
        };
        let outcome = match run_experiment(&manifest) {
            Ok(outcome) => outcome,
            Err(err) => return fail(&err),
        };
        let summary = serde_json::json!({
            "report": outcome.report,
            "summary_line": outcome.row.csv_line(),
            "eval_path": outcome.eval_path,
            "summary_path": outcome.summary_path,
        });
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        let cstring = CString::new(text.replace('\0', " ")).expect("NUL bytes were stripped");
        *out_report_json = cstring.into_raw();
        MasklabStatus::Ok
    })
}
