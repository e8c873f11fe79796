use std::ffi::{CStr, CString};
use std::ptr;

use tlm_ffi::*;

fn tiny() -> *mut TlmModel {
    let mut model = ptr::null_mut();
    let preset = CString::new("tiny").unwrap();
    assert_eq!(unsafe { tlm_model_random(preset.as_ptr(), 7, &mut model) }, TlmStatus::Ok);
    assert!(!model.is_null());
    model
}

fn engine(model: *const TlmModel, config: TlmEngineConfig) -> *mut TlmEngine {
    let mut engine = ptr::null_mut();
    assert_eq!(unsafe { tlm_engine_new(model, &config, &mut engine) }, TlmStatus::Ok);
    engine
}

fn last_error() -> String {
    let p = tlm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take(engine: *mut TlmEngine, id: u64) -> (Vec<u8>, usize) {
    let (mut len, mut generated) = (0usize, 0usize);
    let mut reason = TlmFinishReason::Eos;
    let status =
        unsafe { tlm_engine_take_output(engine, id, ptr::null_mut(), 0, &mut len, &mut generated, &mut reason) };
    if len > 0 {
        assert_eq!(status, TlmStatus::BufferTooSmall);
    }
    let mut buf = vec![0u8; len];
    let status =
        unsafe { tlm_engine_take_output(engine, id, buf.as_mut_ptr(), buf.len(), &mut len, &mut generated, &mut reason) };
    assert_eq!(status, TlmStatus::Ok);
    (buf, generated)
}

#[test]
fn generate_matches_core_engine() {
    let model = tiny();
    let config = TlmEngineConfig { max_batch: 4, ..tlm_engine_config_default() };
    let e = engine(model, config);
    // Engines keep their own reference to the weights.
    unsafe { tlm_model_free(model) };
    let prompts: [&[u8]; 3] = [b"hello", b"tiled kv", b"x"];
    let mut ids = Vec::new();
    for p in prompts {
        let mut id = u64::MAX;
        assert_eq!(unsafe { tlm_engine_submit(e, p.as_ptr(), p.len(), 12, &mut id) }, TlmStatus::Ok);
        ids.push(id);
    }
    assert_eq!(ids, vec![0, 1, 2]);
    assert_eq!(unsafe { tlm_engine_take_output(e, 0, ptr::null_mut(), 0, &mut 0, ptr::null_mut(), ptr::null_mut()) }, TlmStatus::NotReady);
    assert_eq!(unsafe { tlm_engine_run(e) }, TlmStatus::Ok);
    assert!(unsafe { tlm_engine_is_idle(e) });

    let core_model = std::sync::Arc::new(tlm::model::gen_random_model(tlm::model::Preset::Tiny, 7));
    let mut reference = tlm::scheduler::Engine::new(core_model, tlm::scheduler::EngineConfig { max_batch: 4, ..Default::default() }, 4096, 16).unwrap();
    for p in prompts {
        reference.submit(tlm::scheduler::NewRequest::new(p, 12)).unwrap();
    }
    let expected = reference.run_to_completion().unwrap();
    for (id, want) in ids.into_iter().zip(expected) {
        let (text, generated) = take(e, id);
        assert_eq!(text, tlm::model::tokenizer::decode(&want.generated));
        assert_eq!(generated, want.generated.len());
        assert!(generated <= 12);
    }
    assert_eq!(unsafe { tlm_engine_take_output(e, 0, ptr::null_mut(), 0, &mut 0, ptr::null_mut(), ptr::null_mut()) }, TlmStatus::UnknownRequest);

    let mut stats = TlmPoolStats::default();
    assert_eq!(unsafe { tlm_engine_pool_stats(e, &mut stats) }, TlmStatus::Ok);
    assert_eq!(stats.used_tiles, 0);
    assert_eq!(stats.free_tiles, 4096);
    unsafe { tlm_engine_free(e) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let model = tiny();
    let e = engine(model, TlmEngineConfig { max_batch: 2, total_tiles: 4, tile_size: 4, decode_reserve_tiles: 1 });
    let mut id = 0;
    assert_eq!(unsafe { tlm_engine_submit(e, ptr::null(), 0, 4, &mut id) }, TlmStatus::InvalidRequest);
    assert!(last_error().contains("empty"));
    let long = [b'a'; 40];
    assert_eq!(unsafe { tlm_engine_submit(e, long.as_ptr(), long.len(), 4, &mut id) }, TlmStatus::ExceedsPoolCapacity);
    assert_eq!(unsafe { tlm_engine_submit(ptr::null_mut(), long.as_ptr(), 1, 4, &mut id) }, TlmStatus::NullPointer);
    assert_eq!(unsafe { tlm_engine_cancel(e, 99) }, TlmStatus::UnknownRequest);

    let bad = CString::new("huge").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { tlm_model_random(bad.as_ptr(), 1, &mut out) }, TlmStatus::InvalidArgument);
    assert!(out.is_null());
    let zero = TlmEngineConfig { max_batch: 0, ..tlm_engine_config_default() };
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { tlm_engine_new(model, &zero, &mut none) }, TlmStatus::InvalidArgument);

    unsafe {
        tlm_engine_free(e);
        tlm_model_free(model);
        tlm_engine_free(ptr::null_mut());
        tlm_model_free(ptr::null_mut());
    }
}

#[test]
fn cancel_releases_tiles() {
    let model = tiny();
    let e = engine(model, TlmEngineConfig { max_batch: 2, total_tiles: 16, tile_size: 4, decode_reserve_tiles: 1 });
    let mut id = 0;
    let p = b"some prompt";
    assert_eq!(unsafe { tlm_engine_submit(e, p.as_ptr(), p.len(), 20, &mut id) }, TlmStatus::Ok);
    assert_eq!(unsafe { tlm_engine_step(e, ptr::null_mut()) }, TlmStatus::Ok);
    let mut stats = TlmPoolStats::default();
    unsafe { tlm_engine_pool_stats(e, &mut stats) };
    if stats.live_sequences == 1 {
        assert!(stats.used_tiles > 0);
        assert_eq!(unsafe { tlm_engine_cancel(e, id) }, TlmStatus::Ok);
        unsafe { tlm_engine_pool_stats(e, &mut stats) };
        assert_eq!((stats.used_tiles, stats.free_tiles), (0, 16));
    }
    unsafe {
        tlm_engine_free(e);
        tlm_model_free(model);
    }
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.tlm").to_str().unwrap()).unwrap();
    let model = tiny();
    assert_eq!(unsafe { tlm_model_save(model, path.as_ptr()) }, TlmStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { tlm_model_load(path.as_ptr(), &mut loaded) }, TlmStatus::Ok);
    assert_eq!(unsafe { tlm_model_parameter_count(loaded) }, unsafe { tlm_model_parameter_count(model) });
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { tlm_model_load(missing.as_ptr(), &mut none) }, TlmStatus::Io);
    unsafe {
        tlm_model_free(model);
        tlm_model_free(loaded);
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(tlm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
