//! C ABI over the engine.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free`. Every fallible call returns a [`TlmStatus`]; on failure the
//! message is available from [`tlm_last_error`] on the same thread. Panics
//! never cross the boundary: they become `TLM_STATUS_PANIC`.
//!
//! A model handle may be shared by any number of engines and freed before
//! them; engines keep their own reference. An engine is not thread-safe.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use tlm::model::{gen_random_model, load_model, save_model, Model, Preset};
use tlm::scheduler::{Engine, EngineConfig, FinishReason, NewRequest, RequestId, RequestOutput};
use tlm::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidRequest = 3,
    PromptTooLong = 4,
    ExceedsPoolCapacity = 5,
    OutOfTiles = 6,
    UnknownRequest = 7,
    NotReady = 8,
    BufferTooSmall = 9,
    CorruptFile = 10,
    Io = 11,
    Internal = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlmFinishReason {
    Eos = 0,
    MaxTokens = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TlmPoolStats {
    pub free_tiles: usize,
    pub used_tiles: usize,
    pub live_tokens: usize,
    pub internal_waste_slots: usize,
    pub live_sequences: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TlmEngineConfig {
    pub max_batch: usize,
    pub total_tiles: usize,
    pub tile_size: usize,
    pub decode_reserve_tiles: usize,
}

/// Opaque model handle.
pub struct TlmModel {
    model: Arc<Model>,
}

/// Opaque engine handle.
pub struct TlmEngine {
    engine: Engine,
    done: HashMap<u64, RequestOutput>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let mut bytes = message.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let c = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TlmStatus {
    match err {
        Error::InvalidRequest(_) | Error::DuplicateSequence(_) => TlmStatus::InvalidRequest,
        Error::PromptTooLong { .. } => TlmStatus::PromptTooLong,
        Error::ExceedsPoolCapacity { .. } => TlmStatus::ExceedsPoolCapacity,
        Error::OutOfTiles => TlmStatus::OutOfTiles,
        Error::InvalidConfig(_) | Error::UnknownBackend(_) => TlmStatus::InvalidArgument,
        Error::CorruptFile(_) | Error::Json(_) => TlmStatus::CorruptFile,
        Error::Io(_) => TlmStatus::Io,
        _ => TlmStatus::Internal,
    }
}

fn fail(status: TlmStatus, message: impl Into<String>) -> TlmStatus {
    set_error(message);
    status
}

fn from_error(err: Error) -> TlmStatus {
    let status = status_of(&err);
    fail(status, err.to_string())
}

/// Run `f`, mapping a panic to `TLM_STATUS_PANIC`.
fn guard(f: impl FnOnce() -> TlmStatus) -> TlmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(TlmStatus::Panic, msg)
        }
    }
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, TlmStatus> {
    if s.is_null() {
        return Err(fail(TlmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(TlmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! non_null {
    ($p:expr, $what:literal) => {
        if $p.is_null() {
            return fail(TlmStatus::NullPointer, concat!($what, " is null"));
        }
    };
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn tlm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Build a model with random weights. `preset` is "tiny" or "small".
///
/// # Safety
/// `preset` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tlm_model_random(preset: *const c_char, seed: u64, out: *mut *mut TlmModel) -> TlmStatus {
    guard(|| {
        non_null!(out, "out");
        let name = match c_str(preset, "preset") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let preset: Preset = match name.parse() {
            Ok(p) => p,
            Err(e) => return from_error(e),
        };
        let model = gen_random_model(preset, seed);
        *out = Box::into_raw(Box::new(TlmModel { model: Arc::new(model) }));
        TlmStatus::Ok
    })
}

/// Load a model file.
///
/// # Safety
/// `path` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tlm_model_load(path: *const c_char, out: *mut *mut TlmModel) -> TlmStatus {
    guard(|| {
        non_null!(out, "out");
        let path = match c_str(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        match load_model(&path) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(TlmModel { model: Arc::new(model) }));
                TlmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Write a model file.
///
/// # Safety
/// `model` must come from this library and `path` be a valid C string.
#[no_mangle]
pub unsafe extern "C" fn tlm_model_save(model: *const TlmModel, path: *const c_char) -> TlmStatus {
    guard(|| {
        non_null!(model, "model");
        let path = match c_str(path, "path") {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        match save_model(&(*model).model, &path) {
            Ok(()) => TlmStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

/// Parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tlm_model_parameter_count(model: *const TlmModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).model.parameter_count() as u64
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tlm_model_free(model: *mut TlmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// The CLI defaults: 4096 tiles of 16 slots.
#[no_mangle]
pub extern "C" fn tlm_engine_config_default() -> TlmEngineConfig {
    let d = EngineConfig::default();
    TlmEngineConfig { max_batch: d.max_batch, total_tiles: 4096, tile_size: 16, decode_reserve_tiles: d.decode_reserve_tiles }
}

/// Create an engine for `model` with the blocked gemm backend.
///
/// # Safety
/// `model` must come from this library, `config` be readable and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_new(
    model: *const TlmModel,
    config: *const TlmEngineConfig,
    out: *mut *mut TlmEngine,
) -> TlmStatus {
    guard(|| {
        non_null!(model, "model");
        non_null!(config, "config");
        non_null!(out, "out");
        let c = *config;
        let engine_config =
            EngineConfig { max_batch: c.max_batch, decode_reserve_tiles: c.decode_reserve_tiles, ..EngineConfig::default() };
        match Engine::new((*model).model.clone(), engine_config, c.total_tiles, c.tile_size) {
            Ok(engine) => {
                *out = Box::into_raw(Box::new(TlmEngine { engine, done: HashMap::new() }));
                TlmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Queue a prompt of `prompt_len` bytes. The assigned id is written to `id`.
///
/// # Safety
/// `engine` must come from this library, `prompt` point to `prompt_len`
/// readable bytes and `id` be writable.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_submit(
    engine: *mut TlmEngine,
    prompt: *const u8,
    prompt_len: usize,
    max_new_tokens: usize,
    id: *mut u64,
) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        non_null!(id, "id");
        if prompt.is_null() && prompt_len > 0 {
            return fail(TlmStatus::NullPointer, "prompt is null");
        }
        let bytes = if prompt_len == 0 { &[][..] } else { std::slice::from_raw_parts(prompt, prompt_len) };
        match (*engine).engine.submit(NewRequest::new(bytes, max_new_tokens)) {
            Ok(RequestId(n)) => {
                *id = n;
                TlmStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

fn collect(e: &mut TlmEngine) {
    for out in e.engine.drain_finished() {
        e.done.insert(out.id.0, out);
    }
}

/// Run one scheduling step. `tokens_generated` may be null.
///
/// # Safety
/// `engine` must come from this library; `tokens_generated` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_step(engine: *mut TlmEngine, tokens_generated: *mut usize) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        let e = &mut *engine;
        match e.engine.step() {
            Ok(outcome) => {
                collect(e);
                if !tokens_generated.is_null() {
                    *tokens_generated = outcome.tokens_generated;
                }
                TlmStatus::Ok
            }
            Err(err) => from_error(err),
        }
    })
}

/// Step until every submitted request has finished.
///
/// # Safety
/// `engine` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_run(engine: *mut TlmEngine) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        let e = &mut *engine;
        match e.engine.run_to_completion() {
            Ok(outputs) => {
                for out in outputs {
                    e.done.insert(out.id.0, out);
                }
                TlmStatus::Ok
            }
            Err(err) => from_error(err),
        }
    })
}

/// True when nothing is queued or running. Null reads as idle.
///
/// # Safety
/// `engine` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_is_idle(engine: *const TlmEngine) -> bool {
    engine.is_null() || (*engine).engine.is_idle()
}

/// Copy the generated bytes of finished request `id` into `buf` and forget
/// the request.
///
/// `text_len` always receives the byte length. When `capacity` is too small
/// the call returns `TLM_STATUS_BUFFER_TOO_SMALL` and keeps the result, so
/// the caller can retry with a larger buffer. `generated_tokens` and
/// `finish_reason` may be null. Unfinished requests give
/// `TLM_STATUS_NOT_READY`.
///
/// # Safety
/// `engine` must come from this library, `buf` point to `capacity` writable
/// bytes (or be null with `capacity` 0) and `text_len` be writable.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_take_output(
    engine: *mut TlmEngine,
    id: u64,
    buf: *mut u8,
    capacity: usize,
    text_len: *mut usize,
    generated_tokens: *mut usize,
    finish_reason: *mut TlmFinishReason,
) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        non_null!(text_len, "text_len");
        let e = &mut *engine;
        let live = e.engine.running().iter().chain(e.engine.queue()).any(|s| s.request.id.0 == id);
        let Some(out) = e.done.get(&id) else {
            return if live {
                fail(TlmStatus::NotReady, format!("request {id} has not finished"))
            } else {
                fail(TlmStatus::UnknownRequest, format!("unknown request {id}"))
            };
        };
        let text = tlm::model::tokenizer::decode(&out.generated);
        *text_len = text.len();
        if !generated_tokens.is_null() {
            *generated_tokens = out.generated.len();
        }
        if !finish_reason.is_null() {
            *finish_reason = match out.finish_reason {
                FinishReason::Eos => TlmFinishReason::Eos,
                FinishReason::MaxTokens => TlmFinishReason::MaxTokens,
            };
        }
        if capacity < text.len() {
            return fail(TlmStatus::BufferTooSmall, format!("need {} bytes, have {capacity}", text.len()));
        }
        if !text.is_empty() {
            non_null!(buf, "buf");
            ptr::copy_nonoverlapping(text.as_ptr(), buf, text.len());
        }
        e.done.remove(&id);
        TlmStatus::Ok
    })
}

/// Cancel a queued or running request, releasing its tiles.
///
/// # Safety
/// `engine` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_cancel(engine: *mut TlmEngine, id: u64) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        match (*engine).engine.cancel(RequestId(id)) {
            Ok(()) => TlmStatus::Ok,
            Err(Error::UnknownSequence(_)) => fail(TlmStatus::UnknownRequest, format!("unknown request {id}")),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `engine` must come from this library and `stats` be writable.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_pool_stats(engine: *const TlmEngine, stats: *mut TlmPoolStats) -> TlmStatus {
    guard(|| {
        non_null!(engine, "engine");
        non_null!(stats, "stats");
        let s = (*engine).engine.pool_stats();
        *stats = TlmPoolStats {
            free_tiles: s.free_tiles,
            used_tiles: s.used_tiles,
            live_tokens: s.live_tokens,
            internal_waste_slots: s.internal_waste_slots,
            live_sequences: s.live_sequences,
        };
        TlmStatus::Ok
    })
}

/// Release an engine and any uncollected outputs. Null is ignored.
///
/// # Safety
/// `engine` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tlm_engine_free(engine: *mut TlmEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
