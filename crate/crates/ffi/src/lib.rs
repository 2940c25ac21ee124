//! C ABI over the `prepo` core library.
//!
//! Every fallible function returns a [`PrepoStatus`]; on failure the message
//! is available from [`prepo_last_error_message`] on the same thread.
//! Policies are opaque handles owned by the caller and released with
//! [`prepo_policy_free`]. Output arrays are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use prepo::policy::{Policy, PolicyLayout};
use prepo::scheduler::{select_window, window_start, Pacing, ScoredBatch, SelectionState};
use prepo::weighting::{relative_weights, EntropyMode};
use prepo::{PrepoError, Rollout, Vocab};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Undefined = 4,
    Io = 5,
    Parse = 6,
    Missing = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepoPacing {
    Linear = 0,
    Quadratic = 1,
    Exponential = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepoEntropyMode {
    TokenWeighted = 0,
    SequenceMean = 1,
}

/// Opaque policy handle.
pub struct PrepoPolicy {
    inner: Policy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &PrepoError) -> PrepoStatus {
    match err {
        PrepoError::IndexOutOfRange { .. } | PrepoError::OutOfVocabulary { .. } => PrepoStatus::OutOfRange,
        PrepoError::Undefined(_) => PrepoStatus::Undefined,
        PrepoError::Io(_) => PrepoStatus::Io,
        PrepoError::Parse { .. } | PrepoError::Json(_) => PrepoStatus::Parse,
        PrepoError::Missing(_) => PrepoStatus::Missing,
        _ => PrepoStatus::InvalidArgument,
    }
}

struct Fail(PrepoStatus, String);

impl From<PrepoError> for Fail {
    fn from(e: PrepoError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PrepoStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error message and converts panics to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrepoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrepoStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PrepoStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn write<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Fail> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(PrepoStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

fn pacing(p: PrepoPacing) -> Pacing {
    match p {
        PrepoPacing::Linear => Pacing::Linear,
        PrepoPacing::Quadratic => Pacing::Quadratic,
        PrepoPacing::Exponential => Pacing::Exponential,
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prepo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prepo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a randomly initialized policy for the arithmetic vocabulary with
/// the given modulus.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_new(
    modulus: u32,
    seed: u64,
    output_scale: f64,
    out: *mut *mut PrepoPolicy,
) -> PrepoStatus {
    guard(|| {
        let vocab = Vocab::new(modulus)?;
        let inner = Policy::init(PolicyLayout::for_vocab(&vocab), seed, output_scale)?;
        write(out, Box::into_raw(Box::new(PrepoPolicy { inner })), "out")
    })
}

/// Loads a policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_load(path: *const c_char, out: *mut *mut PrepoPolicy) -> PrepoStatus {
    guard(|| {
        let inner = Policy::load(path_arg(path)?)?;
        write(out, Box::into_raw(Box::new(PrepoPolicy { inner })), "out")
    })
}

/// Writes a policy checkpoint.
///
/// # Safety
/// `policy` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_save(policy: *const PrepoPolicy, path: *const c_char) -> PrepoStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        policy.inner.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a policy handle. Null is ignored.
///
/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_free(policy: *mut PrepoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Vocabulary size the policy was built for.
///
/// # Safety
/// `policy` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_vocab_size(policy: *const PrepoPolicy, out: *mut usize) -> PrepoStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        write(out, policy.inner.layout().vocab, "out")
    })
}

/// Teacher-forced perplexity of a prompt of `len` token ids.
///
/// # Safety
/// `tokens` must point to `len` readable ids; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prepo_policy_prompt_ppl(
    policy: *const PrepoPolicy,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
) -> PrepoStatus {
    guard(|| {
        let policy = policy.as_ref().ok_or_else(|| null("policy"))?;
        let tokens = input(tokens, len, "tokens")?;
        write(out, policy.inner.prompt_ppl(tokens)?, "out")
    })
}

/// Relative-entropy weights for `n_rollouts` rollouts. `token_entropies`
/// holds every rollout's per-token entropies back to back; `lengths[i]` is
/// the token count of rollout `i`. Writes `n_rollouts` weights and whether
/// the batch was degenerate (all weights set to 1).
///
/// # Safety
/// Array pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn prepo_relative_weights(
    token_entropies: *const f64,
    lengths: *const usize,
    n_rollouts: usize,
    mode: PrepoEntropyMode,
    out_weights: *mut f64,
    out_degenerate: *mut bool,
) -> PrepoStatus {
    guard(|| {
        let lengths = input(lengths, n_rollouts, "lengths")?;
        let total: usize = lengths.iter().sum();
        let flat = input(token_entropies, total, "token_entropies")?;
        let mut rollouts = Vec::with_capacity(n_rollouts);
        let mut at = 0;
        for (i, &n) in lengths.iter().enumerate() {
            rollouts.push(Rollout::from_entropies(i, flat[at..at + n].to_vec()));
            at += n;
        }
        let mode = match mode {
            PrepoEntropyMode::TokenWeighted => EntropyMode::TokenWeighted,
            PrepoEntropyMode::SequenceMean => EntropyMode::SequenceMean,
        };
        let w = relative_weights(&rollouts, mode)?;
        output(out_weights, n_rollouts, "out_weights")?.copy_from_slice(&w.weights);
        if !out_degenerate.is_null() {
            out_degenerate.write(w.degenerate);
        }
        Ok(())
    })
}

/// Group-standardized advantages (population std). `out_zero` is set when
/// the rewards have zero spread and all advantages are 0.
///
/// # Safety
/// `rewards` and `out_advantages` must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn prepo_group_advantage(
    rewards: *const f64,
    n: usize,
    out_advantages: *mut f64,
    out_zero: *mut bool,
) -> PrepoStatus {
    guard(|| {
        let (adv, zero) = prepo::objective::group_advantage(input(rewards, n, "rewards")?)?;
        output(out_advantages, n, "out_advantages")?.copy_from_slice(&adv);
        if !out_zero.is_null() {
            out_zero.write(zero);
        }
        Ok(())
    })
}

/// Start of the selection window for progress `rho` over `batch_size`
/// candidates and `k` selected prompts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn prepo_window_start(
    rho: f64,
    batch_size: usize,
    k: usize,
    pace: PrepoPacing,
    out: *mut usize,
) -> PrepoStatus {
    guard(|| write(out, window_start(rho, batch_size, k, pacing(pace))?, "out"))
}

/// Selects `k` of `n` scored prompts: sorts by ascending score (ties by
/// ascending id) and takes the window at progress `rho`. Writes `k` ids in
/// sorted order and, if non-null, the window start.
///
/// # Safety
/// `ids` and `scores` must be valid for `n` elements, `out_ids` for `k`.
#[no_mangle]
pub unsafe extern "C" fn prepo_select_window(
    ids: *const usize,
    scores: *const f64,
    n: usize,
    rho: f64,
    k: usize,
    pace: PrepoPacing,
    out_ids: *mut usize,
    out_start: *mut usize,
) -> PrepoStatus {
    guard(|| {
        let ids = input(ids, n, "ids")?;
        let scores = input(scores, n, "scores")?;
        let scored = ScoredBatch::new(ids.iter().copied().zip(scores.iter().copied()).collect())?;
        let state = SelectionState::new(rho, k, n, pacing(pace))?;
        let sel = select_window(&scored, &state)?;
        output(out_ids, k, "out_ids")?.copy_from_slice(&sel.ids);
        if !out_start.is_null() {
            out_start.write(sel.start);
        }
        Ok(())
    })
}

/// Spearman rank correlation with average ranks for ties and a two-sided
/// t-approximation p-value.
///
/// # Safety
/// `x` and `y` must be valid for `n` elements; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn prepo_spearman(
    x: *const f64,
    y: *const f64,
    n: usize,
    out_rho: *mut f64,
    out_p_value: *mut f64,
) -> PrepoStatus {
    guard(|| {
        let s = prepo::stats::spearman(input(x, n, "x")?, input(y, n, "y")?)?;
        write(out_rho, s.rho, "out_rho")?;
        if !out_p_value.is_null() {
            out_p_value.write(s.p_value);
        }
        Ok(())
    })
}
