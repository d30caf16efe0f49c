//! C ABI over the `smcgfn` training library.
//!
//! Every function returns an [`SmcgfnStatus`] code. On failure a description
//! is kept per thread and can be read with [`smcgfn_last_error`]. Trainers are
//! opaque handles created by [`smcgfn_trainer_new`] or
//! [`smcgfn_trainer_load`] and released with [`smcgfn_trainer_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smcgfn::checkpoint::{peek_config, Checkpoint};
use smcgfn::config::{ProcessConfig, TrainConfig};
use smcgfn::enumerate::enumerate;
use smcgfn::process::{sample_forward, Diffusion, DiscreteReward, PrependAppend};
use smcgfn::trainer::Trainer;
use smcgfn::Error;

/// Result codes of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmcgfnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Capability = 4,
    Parse = 5,
    Version = 6,
    Io = 7,
    Training = 8,
    DegenerateWeights = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

enum Inner {
    Diffusion(Trainer<Diffusion>),
    Discrete(Trainer<PrependAppend>),
}

/// Opaque training session.
pub struct SmcgfnTrainer {
    inner: Inner,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SmcgfnStatus {
    match err {
        Error::Input(_) | Error::Contract(_) => SmcgfnStatus::InvalidArgument,
        Error::Config(_) => SmcgfnStatus::Config,
        Error::Capability(_) => SmcgfnStatus::Capability,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => SmcgfnStatus::Parse,
        Error::Version { .. } => SmcgfnStatus::Version,
        Error::Io(_) => SmcgfnStatus::Io,
        Error::Training { .. } => SmcgfnStatus::Training,
        Error::DegenerateWeights => SmcgfnStatus::DegenerateWeights,
    }
}

struct Failure(SmcgfnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmcgfnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmcgfnStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SmcgfnStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SmcgfnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SmcgfnStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a>(t: *mut SmcgfnTrainer) -> Result<&'a mut SmcgfnTrainer, Failure> {
    t.as_mut().ok_or_else(|| Failure(SmcgfnStatus::NullPointer, "trainer handle is null".into()))
}

fn null(what: &str) -> Failure {
    Failure(SmcgfnStatus::NullPointer, format!("{what} is null"))
}

fn build(config: TrainConfig) -> Result<Inner, Error> {
    Ok(match config.process {
        ProcessConfig::Diffusion { .. } => {
            let p = config.build_diffusion()?;
            Inner::Diffusion(Trainer::new(config, p)?)
        }
        ProcessConfig::PrependAppend { .. } => {
            let p = config.build_prepend_append()?;
            Inner::Discrete(Trainer::new(config, p)?)
        }
    })
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn smcgfn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smcgfn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a trainer from a JSON configuration; `seed` overrides its seed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut SmcgfnTrainer,
) -> SmcgfnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let mut config = TrainConfig::from_json_str(read_str(config_json, "config_json")?)?;
        config.seed = seed;
        *out = Box::into_raw(Box::new(SmcgfnTrainer { inner: build(config)? }));
        Ok(())
    })
}

/// Restores a trainer from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_load(path: *const c_char, out: *mut *mut SmcgfnTrainer) -> SmcgfnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let text = std::fs::read_to_string(read_str(path, "path")?).map_err(Error::from)?;
        let config = peek_config(&text)?;
        let inner = match config.process {
            ProcessConfig::Diffusion { .. } => {
                let p = config.build_diffusion()?;
                Inner::Diffusion(Checkpoint::<Vec<f64>>::from_json(&text)?.into_trainer(p)?)
            }
            ProcessConfig::PrependAppend { .. } => {
                let p = config.build_prepend_append()?;
                Inner::Discrete(Checkpoint::<Vec<u8>>::from_json(&text)?.into_trainer(p)?)
            }
        };
        *out = Box::into_raw(Box::new(SmcgfnTrainer { inner }));
        Ok(())
    })
}

/// Releases a trainer. Null is ignored.
///
/// # Safety
/// `trainer` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_free(trainer: *mut SmcgfnTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs `epochs` training epochs.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_step(trainer: *mut SmcgfnTrainer, epochs: u64) -> SmcgfnStatus {
    guard(|| {
        let t = handle(trainer)?;
        for _ in 0..epochs {
            match &mut t.inner {
                Inner::Diffusion(t) => t.step().map(drop)?,
                Inner::Discrete(t) => t.step().map(drop)?,
            }
        }
        Ok(())
    })
}

/// Writes the number of completed epochs and the current `log Z_theta`.
///
/// # Safety
/// `trainer` must be a live handle; the output pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_status(
    trainer: *const SmcgfnTrainer,
    epoch: *mut u64,
    log_z: *mut f64,
) -> SmcgfnStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let (e, z) = match &t.inner {
            Inner::Diffusion(t) => (t.epoch(), t.policy().log_z),
            Inner::Discrete(t) => (t.epoch(), t.policy().log_z),
        };
        if let Some(p) = epoch.as_mut() {
            *p = e as u64;
        }
        if let Some(p) = log_z.as_mut() {
            *p = z;
        }
        Ok(())
    })
}

/// Saves a checkpoint to `path`.
///
/// # Safety
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_save(trainer: *const SmcgfnTrainer, path: *const c_char) -> SmcgfnStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let path = Path::new(read_str(path, "path")?);
        match &t.inner {
            Inner::Diffusion(t) => Checkpoint::from_trainer(t).save(path)?,
            Inner::Discrete(t) => Checkpoint::from_trainer(t).save(path)?,
        }
        Ok(())
    })
}

/// Draws `n` samples of a continuous sampler into `out` (row-major, `n x dim`)
/// with their log-weights in `log_w` (length `n`, may be null). `dim` receives
/// the state dimension; when `out_len < n * dim` nothing is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `trainer` must be a live handle; `out` must hold `out_len` doubles and
/// `log_w`, when non-null, `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_trainer_sample(
    trainer: *const SmcgfnTrainer,
    n: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
    log_w: *mut f64,
    dim: *mut usize,
) -> SmcgfnStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or_else(|| null("trainer"))?;
        let Inner::Diffusion(t) = &t.inner else {
            return Err(Failure(SmcgfnStatus::Capability, "sampling into doubles needs a continuous process".into()));
        };
        let d = t.process.dim();
        if let Some(p) = dim.as_mut() {
            *p = d;
        }
        if out_len < n * d {
            return Err(Failure(SmcgfnStatus::BufferTooSmall, format!("need {} doubles, got {out_len}", n * d)));
        }
        if out.is_null() && n > 0 {
            return Err(null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = sample_forward(&t.process, t.policy(), n, 0.0, &mut rng)?;
        for (i, tr) in trajs.iter().enumerate() {
            ptr::copy_nonoverlapping(tr.terminal().as_ptr(), out.add(i * d), d);
            if !log_w.is_null() {
                *log_w.add(i) = tr.log_weight();
            }
        }
        Ok(())
    })
}

/// Exact `log Z` of a prepend/append environment by enumeration.
///
/// # Safety
/// `vocab` and `reward` must be NUL-terminated strings and `log_z` valid.
#[no_mangle]
pub unsafe extern "C" fn smcgfn_enumerate_log_z(
    vocab: *const c_char,
    len: usize,
    reward: *const c_char,
    log_z: *mut f64,
) -> SmcgfnStatus {
    guard(|| {
        let out = log_z.as_mut().ok_or_else(|| null("log_z"))?;
        let vocab: Vec<char> = read_str(vocab, "vocab")?.chars().collect();
        let reward = DiscreteReward::from_name(read_str(reward, "reward")?, &vocab)?;
        *out = enumerate(&PrependAppend::new(vocab, len, reward)?)?.log_z;
        Ok(())
    })
}
