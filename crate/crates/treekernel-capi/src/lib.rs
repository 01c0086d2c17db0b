//! C ABI over the forest-kernel library. Handles are opaque pointers,
//! every fallible call returns a `TkStatus`, and the last error message is
//! kept in thread-local storage.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use treekernel::forest::{
    fit_forest, gram_cross, load_forest, predict, save_forest, Forest, KernelTag,
};
use treekernel::trees::{Dataset, GrowConfig, Strategy};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TkStatus {
    TkOk = 0,
    TkInvalidArgument = 1,
    TkRuntimeError = 2,
    TkPanic = 3,
}

/// Split selection strategies, mirroring the library enum.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TkStrategy {
    TkUniform = 0,
    TkExtraTrees = 1,
    TkSoftmax = 2,
    TkBreimanGreedy = 3,
}

/// Kernel selector for gram evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TkKernel {
    TkK0 = 0,
    TkKp = 1,
}

/// Forest growth parameters. Zero-initialise and set what you need;
/// `tk_config_default` fills in the library defaults for a strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TkConfig {
    pub strategy: TkStrategy,
    pub max_depth: usize,
    pub k_candidates: usize,
    pub beta: f64,
    pub max_features: usize,
    pub min_samples_leaf: usize,
    pub min_impurity_decrease: f64,
    pub bootstrap_for_partition: bool,
    pub seed: u64,
    pub m_trees: usize,
}

/// Opaque forest handle; free with `tk_forest_free`.
pub struct TkForest {
    forest: Forest,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn guard<F: FnOnce() -> TkStatus>(f: F) -> TkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            TkStatus::TkPanic
        }
    }
}

/// Pointer to the last error message for this thread. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn tk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn strategy_of(s: TkStrategy) -> Strategy {
    match s {
        TkStrategy::TkUniform => Strategy::Uniform,
        TkStrategy::TkExtraTrees => Strategy::ExtraTrees,
        TkStrategy::TkSoftmax => Strategy::Softmax,
        TkStrategy::TkBreimanGreedy => Strategy::BreimanGreedy,
    }
}

/// Fill `config` with the library defaults for `strategy` on `p` features.
///
/// # Safety
/// `config` must be a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tk_config_default(
    strategy: TkStrategy,
    p: usize,
    config: *mut TkConfig,
) -> TkStatus {
    if config.is_null() {
        set_error("config is null");
        return TkStatus::TkInvalidArgument;
    }
    let c = GrowConfig::new(strategy_of(strategy), p);
    *config = TkConfig {
        strategy,
        max_depth: c.max_depth,
        k_candidates: c.k_candidates,
        beta: c.beta,
        max_features: c.max_features,
        min_samples_leaf: c.min_samples_leaf,
        min_impurity_decrease: c.min_impurity_decrease,
        bootstrap_for_partition: c.bootstrap_for_partition,
        seed: c.seed,
        m_trees: 100,
    };
    TkStatus::TkOk
}

unsafe fn dataset_from_raw(
    x: *const f64,
    y: *const f64,
    n: usize,
    p: usize,
) -> Result<Dataset, TkStatus> {
    if x.is_null() || y.is_null() {
        set_error("x or y is null");
        return Err(TkStatus::TkInvalidArgument);
    }
    if n == 0 || p == 0 {
        set_error("n and p must be positive");
        return Err(TkStatus::TkInvalidArgument);
    }
    let xs = std::slice::from_raw_parts(x, n * p);
    let ys = std::slice::from_raw_parts(y, n);
    let rows: Vec<Vec<f64>> = xs.chunks(p).map(|c| c.to_vec()).collect();
    Dataset::new(rows, ys.to_vec()).map_err(|e| {
        set_error(&e.to_string());
        TkStatus::TkInvalidArgument
    })
}

/// Grow a forest on row-major features `x` (n rows, p columns, values in
/// [0,1]) with targets `y`. On success `*out` owns the forest.
///
/// # Safety
/// `x` must point to `n * p` doubles, `y` to `n` doubles, `config` and
/// `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_fit(
    x: *const f64,
    y: *const f64,
    n: usize,
    p: usize,
    config: *const TkConfig,
    out: *mut *mut TkForest,
) -> TkStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            set_error("config or out is null");
            return TkStatus::TkInvalidArgument;
        }
        let data = match dataset_from_raw(x, y, n, p) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let c = *config;
        let mut gcfg = GrowConfig::new(strategy_of(c.strategy), p);
        gcfg.max_depth = c.max_depth;
        gcfg.k_candidates = c.k_candidates;
        gcfg.beta = c.beta;
        gcfg.max_features = c.max_features;
        gcfg.min_samples_leaf = c.min_samples_leaf;
        gcfg.min_impurity_decrease = c.min_impurity_decrease;
        gcfg.bootstrap_for_partition = c.bootstrap_for_partition;
        gcfg.seed = c.seed;
        match fit_forest(&data, data.targets(), &gcfg, c.m_trees) {
            Ok(forest) => {
                *out = Box::into_raw(Box::new(TkForest { forest }));
                TkStatus::TkOk
            }
            Err(e) => {
                set_error(&e.to_string());
                TkStatus::TkInvalidArgument
            }
        }
    })
}

/// Number of trees in the forest.
///
/// # Safety
/// `handle` must come from `tk_forest_fit` or `tk_forest_load`.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_num_trees(handle: *const TkForest) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).forest.m()
}

/// Predict at `n` query points (row-major, p columns), writing into `out`.
///
/// # Safety
/// `handle` must be a live forest handle, `x` must hold `n * p` doubles,
/// `out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_predict(
    handle: *const TkForest,
    x: *const f64,
    n: usize,
    p: usize,
    out: *mut f64,
) -> TkStatus {
    guard(|| {
        if handle.is_null() || x.is_null() || out.is_null() {
            set_error("null pointer argument");
            return TkStatus::TkInvalidArgument;
        }
        let forest = &(*handle).forest;
        let xs = std::slice::from_raw_parts(x, n * p);
        let outs = std::slice::from_raw_parts_mut(out, n);
        for (row, o) in xs.chunks(p).zip(outs.iter_mut()) {
            *o = predict(forest, row);
        }
        TkStatus::TkOk
    })
}

/// Cross-Gram matrix between `a` (na x p) and `b` (nb x p), written
/// row-major into `out` (na x nb). `n_train` scales the weighted kernel;
/// pass the training sample size the forest was fit on.
///
/// # Safety
/// All pointers must be valid for the stated extents.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_gram(
    handle: *const TkForest,
    kernel: TkKernel,
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    p: usize,
    n_train: usize,
    out: *mut f64,
) -> TkStatus {
    guard(|| {
        if handle.is_null() || a.is_null() || b.is_null() || out.is_null() {
            set_error("null pointer argument");
            return TkStatus::TkInvalidArgument;
        }
        let forest = &(*handle).forest;
        let rows: Vec<Vec<f64>> = std::slice::from_raw_parts(a, na * p)
            .chunks(p)
            .map(|c| c.to_vec())
            .collect();
        let cols: Vec<Vec<f64>> = std::slice::from_raw_parts(b, nb * p)
            .chunks(p)
            .map(|c| c.to_vec())
            .collect();
        let tag = match kernel {
            TkKernel::TkK0 => KernelTag::K0,
            TkKernel::TkKp => KernelTag::KP,
        };
        let m = gram_cross(forest, &rows, &cols, tag, n_train);
        let outs = std::slice::from_raw_parts_mut(out, na * nb);
        for i in 0..na {
            for j in 0..nb {
                outs[i * nb + j] = m[(i, j)];
            }
        }
        TkStatus::TkOk
    })
}

unsafe fn path_from(ptr: *const c_char) -> Result<String, TkStatus> {
    if ptr.is_null() {
        set_error("path is null");
        return Err(TkStatus::TkInvalidArgument);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(|s| s.to_string())
        .map_err(|_| {
            set_error("path is not valid UTF-8");
            TkStatus::TkInvalidArgument
        })
}

/// Serialize the forest to `path`.
///
/// # Safety
/// `handle` must be live, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_save(
    handle: *const TkForest,
    path: *const c_char,
) -> TkStatus {
    guard(|| {
        if handle.is_null() {
            set_error("handle is null");
            return TkStatus::TkInvalidArgument;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_forest(&path, &(*handle).forest) {
            Ok(()) => TkStatus::TkOk,
            Err(e) => {
                set_error(&e.to_string());
                TkStatus::TkRuntimeError
            }
        }
    })
}

/// Load a forest previously written by `tk_forest_save`.
///
/// # Safety
/// `path` must be NUL-terminated, `out` a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_load(
    path: *const c_char,
    out: *mut *mut TkForest,
) -> TkStatus {
    guard(|| {
        if out.is_null() {
            set_error("out is null");
            return TkStatus::TkInvalidArgument;
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_forest(&path) {
            Ok(forest) => {
                *out = Box::into_raw(Box::new(TkForest { forest }));
                TkStatus::TkOk
            }
            Err(e) => {
                set_error(&e.to_string());
                TkStatus::TkRuntimeError
            }
        }
    })
}

/// Release a forest handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tk_forest_free(handle: *mut TkForest) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
