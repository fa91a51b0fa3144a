//! C ABI over `semrate`.
//!
//! Every function returns a [`SemrateStatus`]; results go through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`semrate_last_error`]. Handles are opaque and must be released with
//! their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use semrate::bounds::{certify, NormOrder, PerturbationBall};
use semrate::fbl::{self, LinkParams};
use semrate::graph::{CompGraph, Tensor, ToyFusionModel};
use semrate::quant::{dequantize, quantize, QuantizedFeature};
use semrate::ratesolver::{solve_bisection, ModalityLink, SolverError, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemrateStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Infeasible = 3,
    BufferTooSmall = 4,
    Internal = 5,
}

/// Norm of the perturbation ball, passed to [`semrate_robustness`] as an
/// integer so that out-of-range values are rejected instead of undefined.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemrateNorm {
    LInf = 0,
    L1 = 1,
    L2 = 2,
}

fn norm_order(code: u32) -> Result<NormOrder, (SemrateStatus, String)> {
    match code {
        c if c == SemrateNorm::LInf as u32 => Ok(NormOrder::Inf),
        c if c == SemrateNorm::L1 as u32 => Ok(NormOrder::One),
        c if c == SemrateNorm::L2 as u32 => Ok(NormOrder::Two),
        other => Err(invalid(format!("unknown norm code {other}"))),
    }
}

/// Rate-allocation problem under construction.
pub struct SemrateSolver {
    delta0: f64,
    tol: f64,
    max_iter: usize,
    links: Vec<ModalityLink>,
}

/// A computation graph whose output is bounded.
pub struct SemrateGraph {
    graph: CompGraph,
}

/// Solver output; read with the `semrate_solution_*` accessors.
pub struct SemrateSolution {
    tau_star: f64,
    delay: f64,
    gamma_pred: f64,
    capped: bool,
    rates: Vec<f64>,
    eps: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend(msg.bytes().filter(|&b| b != 0));
    });
}

type Fallible = Result<(), (SemrateStatus, String)>;

fn invalid(msg: impl Into<String>) -> (SemrateStatus, String) {
    (SemrateStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Fallible) -> SemrateStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SemrateStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SemrateStatus::Internal
        }
    }
}

fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, (SemrateStatus, String)> {
    // SAFETY: the caller guarantees a non-null `p` is valid and writable.
    unsafe { p.as_mut() }.ok_or((SemrateStatus::NullPointer, format!("{name} is null")))
}

fn input_slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], (SemrateStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err((SemrateStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees `p` points to `len` readable elements.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

fn output_slice<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], (SemrateStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err((SemrateStatus::NullPointer, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees `p` points to `len` writable elements.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
#[no_mangle]
pub extern "C" fn semrate_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            // SAFETY: `buf` holds at least `len` bytes per the contract.
            unsafe {
                ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        e.len()
    })
}

/// C = ½·log₂(1 + snr).
#[no_mangle]
pub extern "C" fn semrate_capacity(snr: f64, out_capacity: *mut f64) -> SemrateStatus {
    guard(|| {
        *out(out_capacity, "out_capacity")? = fbl::capacity(snr).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// V = 1 − (1 + snr)⁻².
#[no_mangle]
pub extern "C" fn semrate_dispersion(snr: f64, out_dispersion: *mut f64) -> SemrateStatus {
    guard(|| {
        *out(out_dispersion, "out_dispersion")? = fbl::dispersion(snr).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Block error probability at `rate` bits per channel use.
#[no_mangle]
pub extern "C" fn semrate_error_prob(snr: f64, blocklength: u64, rate: f64, out_eps: *mut f64) -> SemrateStatus {
    guard(|| {
        let link = LinkParams::new(snr, blocklength).map_err(|e| invalid(e.to_string()))?;
        *out(out_eps, "out_eps")? = fbl::error_prob_of_rate(&link, rate).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Creates an empty solver. `tol <= 0` and `max_iter == 0` select defaults.
#[no_mangle]
pub extern "C" fn semrate_solver_new(delta0: f64, tol: f64, max_iter: usize, out_solver: *mut *mut SemrateSolver) -> SemrateStatus {
    guard(|| {
        let slot = out(out_solver, "out_solver")?;
        if !(delta0.is_finite() && delta0 > 0.0) {
            return Err(invalid(format!("delta0 must be positive, got {delta0}")));
        }
        let solver = SemrateSolver {
            delta0,
            tol: if tol > 0.0 { tol } else { DEFAULT_TOL },
            max_iter: if max_iter > 0 { max_iter } else { DEFAULT_MAX_ITER },
            links: Vec::new(),
        };
        *slot = Box::into_raw(Box::new(solver));
        Ok(())
    })
}

/// Adds a modality described by its link: payload D bits, importance κ,
/// B quantization bits, SNR and blocklength.
#[no_mangle]
pub extern "C" fn semrate_solver_add_link(
    solver: *mut SemrateSolver,
    payload_bits: f64,
    kappa: f64,
    bits: u32,
    snr: f64,
    blocklength: u64,
) -> SemrateStatus {
    guard(|| {
        let s = out(solver, "solver")?;
        let link = LinkParams::new(snr, blocklength).map_err(|e| invalid(e.to_string()))?;
        s.links.push(ModalityLink::from_channel(payload_bits, kappa, bits, link).map_err(|e| invalid(e.to_string()))?);
        Ok(())
    })
}

/// Adds a modality given directly by its logistic constants (a, b, k).
#[no_mangle]
pub extern "C" fn semrate_solver_add_constants(
    solver: *mut SemrateSolver,
    payload_bits: f64,
    a: f64,
    b: f64,
    k: f64,
) -> SemrateStatus {
    guard(|| {
        let s = out(solver, "solver")?;
        s.links.push(ModalityLink::from_constants(payload_bits, a, b, k).map_err(|e| invalid(e.to_string()))?);
        Ok(())
    })
}

/// Solves the allocation. Infeasible budgets return `Infeasible` with both
/// sides of the violated inequality in the error message.
#[no_mangle]
pub extern "C" fn semrate_solver_solve(solver: *const SemrateSolver, out_solution: *mut *mut SemrateSolution) -> SemrateStatus {
    guard(|| {
        let slot = out(out_solution, "out_solution")?;
        // SAFETY: a non-null handle came from `semrate_solver_new`.
        let s = unsafe { solver.as_ref() }.ok_or((SemrateStatus::NullPointer, "solver is null".into()))?;
        let sol = solve_bisection(&s.links, s.delta0, s.tol, s.max_iter).map_err(|e| match e {
            SolverError::Infeasible(_) => (SemrateStatus::Infeasible, e.to_string()),
            _ => invalid(e.to_string()),
        })?;
        *slot = Box::into_raw(Box::new(SemrateSolution {
            tau_star: sol.tau_star,
            delay: sol.delay,
            gamma_pred: sol.gamma_pred,
            capped: sol.capped,
            rates: sol.rates,
            eps: sol.eps,
        }));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn semrate_solver_free(solver: *mut SemrateSolver) {
    if !solver.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in `semrate_solver_new`.
        drop(unsafe { Box::from_raw(solver) });
    }
}

fn solution<'a>(s: *const SemrateSolution) -> Result<&'a SemrateSolution, (SemrateStatus, String)> {
    // SAFETY: a non-null handle came from `semrate_solver_solve`.
    unsafe { s.as_ref() }.ok_or((SemrateStatus::NullPointer, "solution is null".into()))
}

/// τ*, the common delay 1/τ*, the predicted distortion and whether the
/// budget was non-binding (`capped`). Any out pointer may be null.
#[no_mangle]
pub extern "C" fn semrate_solution_summary(
    sol: *const SemrateSolution,
    out_tau: *mut f64,
    out_delay: *mut f64,
    out_gamma_pred: *mut f64,
    out_capped: *mut bool,
) -> SemrateStatus {
    guard(|| {
        let s = solution(sol)?;
        // SAFETY: each pointer is either null or writable per the contract.
        unsafe {
            if let Some(p) = out_tau.as_mut() {
                *p = s.tau_star;
            }
            if let Some(p) = out_delay.as_mut() {
                *p = s.delay;
            }
            if let Some(p) = out_gamma_pred.as_mut() {
                *p = s.gamma_pred;
            }
            if let Some(p) = out_capped.as_mut() {
                *p = s.capped;
            }
        }
        Ok(())
    })
}

/// Number of modalities in the solution.
#[no_mangle]
pub extern "C" fn semrate_solution_len(sol: *const SemrateSolution, out_len: *mut usize) -> SemrateStatus {
    guard(|| {
        *out(out_len, "out_len")? = solution(sol)?.rates.len();
        Ok(())
    })
}

/// Copies per-modality rates and error probabilities; either buffer may be
/// null. Buffers must hold `semrate_solution_len` elements.
#[no_mangle]
pub extern "C" fn semrate_solution_rates(
    sol: *const SemrateSolution,
    rates: *mut f64,
    eps: *mut f64,
    len: usize,
) -> SemrateStatus {
    guard(|| {
        let s = solution(sol)?;
        if len < s.rates.len() {
            return Err((SemrateStatus::BufferTooSmall, format!("need {} elements, got {len}", s.rates.len())));
        }
        if !rates.is_null() {
            output_slice(rates, s.rates.len(), "rates")?.copy_from_slice(&s.rates);
        }
        if !eps.is_null() {
            output_slice(eps, s.eps.len(), "eps")?.copy_from_slice(&s.eps);
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn semrate_solution_free(sol: *mut SemrateSolution) {
    if !sol.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in `semrate_solver_solve`.
        drop(unsafe { Box::from_raw(sol) });
    }
}

/// Parses a graph from NUL-terminated JSON: either a graph document or a
/// fusion-model document, whose decoder is used.
#[no_mangle]
pub extern "C" fn semrate_graph_from_json(json: *const c_char, out_graph: *mut *mut SemrateGraph) -> SemrateStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        if json.is_null() {
            return Err((SemrateStatus::NullPointer, "json is null".into()));
        }
        // SAFETY: the caller passes a NUL-terminated string.
        let text = unsafe { CStr::from_ptr(json) }.to_str().map_err(|e| invalid(format!("json is not UTF-8: {e}")))?;
        let graph = match serde_json::from_str::<CompGraph>(text) {
            Ok(g) => g,
            Err(graph_err) => match serde_json::from_str::<ToyFusionModel>(text) {
                Ok(m) => m.decoder().clone(),
                Err(_) => return Err(invalid(format!("invalid graph: {graph_err}"))),
            },
        };
        *slot = Box::into_raw(Box::new(SemrateGraph { graph }));
        Ok(())
    })
}

/// Number of modalities and total input dimension of the graph.
#[no_mangle]
pub extern "C" fn semrate_graph_dims(graph: *const SemrateGraph, out_modalities: *mut usize, out_input_dim: *mut usize) -> SemrateStatus {
    guard(|| {
        // SAFETY: a non-null handle came from `semrate_graph_from_json`.
        let g = unsafe { graph.as_ref() }.ok_or((SemrateStatus::NullPointer, "graph is null".into()))?;
        *out(out_modalities, "out_modalities")? = g.graph.num_modalities();
        *out(out_input_dim, "out_input_dim")? = g.graph.input_dim();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn semrate_graph_free(graph: *mut SemrateGraph) {
    if !graph.is_null() {
        // SAFETY: the pointer came from `Box::into_raw` in `semrate_graph_from_json`.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// Robustness bound γ over the ball of per-modality radii around the
/// concatenated `center`, with the per-modality importance κ written to
/// `out_kappa` (one entry per modality; may be null). `norm` is a
/// [`SemrateNorm`] value.
#[no_mangle]
pub extern "C" fn semrate_robustness(
    graph: *const SemrateGraph,
    center: *const f64,
    center_len: usize,
    radii: *const f64,
    num_radii: usize,
    norm: u32,
    out_gamma: *mut f64,
    out_kappa: *mut f64,
) -> SemrateStatus {
    guard(|| {
        // SAFETY: a non-null handle came from `semrate_graph_from_json`.
        let g = &unsafe { graph.as_ref() }.ok_or((SemrateStatus::NullPointer, "graph is null".into()))?.graph;
        let gamma = out(out_gamma, "out_gamma")?;
        let flat = input_slice(center, center_len, "center")?;
        let radii = input_slice(radii, num_radii, "radii")?;
        let tensors: Vec<Tensor> = g.split_input(flat).map_err(|e| invalid(e.to_string()))?;
        let ball = PerturbationBall::new(norm_order(norm)?, radii.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let report = certify(g, &tensors, &ball).map_err(|e| invalid(e.to_string()))?;
        *gamma = report.gamma;
        if !out_kappa.is_null() {
            output_slice(out_kappa, report.kappa.len(), "out_kappa")?.copy_from_slice(&report.kappa);
        }
        Ok(())
    })
}

/// Quantizes `n` values in [0, 1] to `bits` bits each and packs the bits
/// MSB first into `out_bytes`. `out_written` receives the byte count,
/// ⌈n·bits/8⌉, also on `BufferTooSmall`.
#[no_mangle]
pub extern "C" fn semrate_quantize(
    values: *const f64,
    n: usize,
    bits: u32,
    out_bytes: *mut u8,
    capacity: usize,
    out_written: *mut usize,
) -> SemrateStatus {
    guard(|| {
        let written = out(out_written, "out_written")?;
        let q = quantize(input_slice(values, n, "values")?, bits).map_err(|e| invalid(e.to_string()))?;
        let bytes = q.to_bytes();
        *written = bytes.len();
        if capacity < bytes.len() {
            return Err((SemrateStatus::BufferTooSmall, format!("need {} bytes, got {capacity}", bytes.len())));
        }
        output_slice(out_bytes, bytes.len(), "out_bytes")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Inverse of [`semrate_quantize`]: writes `n` values to `out_values`.
#[no_mangle]
pub extern "C" fn semrate_dequantize(
    bytes: *const u8,
    len: usize,
    bits: u32,
    n: usize,
    out_values: *mut f64,
) -> SemrateStatus {
    guard(|| {
        let q = QuantizedFeature::from_bytes(input_slice(bytes, len, "bytes")?, bits, n).map_err(|e| invalid(e.to_string()))?;
        output_slice(out_values, n, "out_values")?.copy_from_slice(&dequantize(&q));
        Ok(())
    })
}
