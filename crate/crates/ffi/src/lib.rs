//! C ABI over the `qoverlay` controller.
//!
//! A `QoController` is an opaque handle owning one simulated network.
//! Circuit ends are plain `uint64_t` handles issued by the controller.
//! Every call returns a `QoStatus`; on failure `qo_last_error()` gives a
//! message for the calling thread. Strings are NUL-terminated UTF-8.
//! Strings returned by the library are freed with `qo_string_free`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qoverlay::apps::{split_circular, to_fraction, SharedRandom, UnitPoint};
use qoverlay::classical::NodeId;
use qoverlay::config::TopologyConfig;
use qoverlay::control::{Controller, ControllerSettings, PathSpec};
use qoverlay::error::Error;
use qoverlay::overlay::{CircuitConfig, CircuitHandle, CircuitKind};
use qoverlay::qkd::QkdStatus;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    UnknownNode = 4,
    UnknownLink = 5,
    UnknownCircuit = 6,
    CircuitUnavailable = 7,
    PathUnavailable = 8,
    KeyExhausted = 9,
    DeliveryFailed = 10,
    Desync = 11,
    Timeout = 12,
    SessionFailed = 13,
    WrongKind = 14,
    NotFound = 15,
    /// Nothing to receive yet.
    Empty = 16,
    /// The output buffer is too small; the needed size was written.
    BufferTooSmall = 17,
    Internal = 18,
    Panic = 19,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QoCircuitKind {
    Lossy = 0,
    Reliable = 1,
    Bytestream = 2,
    Syncrand = 3,
}

impl From<QoCircuitKind> for CircuitKind {
    fn from(k: QoCircuitKind) -> Self {
        match k {
            QoCircuitKind::Lossy => CircuitKind::SecureLossyDatagram,
            QoCircuitKind::Reliable => CircuitKind::SecureReliableDatagram,
            QoCircuitKind::Bytestream => CircuitKind::SecureReliableBytestream,
            QoCircuitKind::Syncrand => CircuitKind::SynchronizedRandom,
        }
    }
}

/// Outcome of one QKD session.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QoQkdReport {
    /// 0 ok, 1 aborted on QBER, 2 aborted with too little key.
    pub status: i32,
    pub qber: f64,
    pub sifted_bits: u64,
    pub distilled_bits: u64,
}

pub struct QoController {
    ctrl: Controller,
    handles: BTreeMap<u64, CircuitHandle>,
    next_handle: u64,
    /// A datagram popped by `qo_recv` that did not fit the caller's buffer.
    stash: BTreeMap<u64, Vec<u8>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> QoStatus {
    match e {
        Error::InvalidInput(_) | Error::InvalidFilter(_) | Error::DuplicateLink(..) | Error::Malformed(_) => {
            QoStatus::InvalidInput
        }
        Error::Config { .. } => QoStatus::Config,
        Error::UnknownNode(_) => QoStatus::UnknownNode,
        Error::UnknownLink(_) => QoStatus::UnknownLink,
        Error::UnknownCircuit(_) => QoStatus::UnknownCircuit,
        Error::CircuitUnavailable(_) => QoStatus::CircuitUnavailable,
        Error::PathUnavailable { .. } => QoStatus::PathUnavailable,
        Error::KeyExhausted(_) => QoStatus::KeyExhausted,
        Error::DeliveryFailed { .. } => QoStatus::DeliveryFailed,
        Error::Desync(_) => QoStatus::Desync,
        Error::Timeout(_) => QoStatus::Timeout,
        Error::SessionTimeout | Error::ReconciliationFailed => QoStatus::SessionFailed,
        Error::WrongKind(_) => QoStatus::WrongKind,
        Error::NotFound => QoStatus::NotFound,
        Error::PartialAggregate { .. } => QoStatus::Internal,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), QoError>) -> QoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QoStatus::Ok,
        Ok(Err(QoError(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside qoverlay");
            QoStatus::Panic
        }
    }
}

struct QoError(QoStatus, String);

impl From<Error> for QoError {
    fn from(e: Error) -> Self {
        QoError(status_of(&e), e.to_string())
    }
}

fn null() -> QoError {
    QoError(QoStatus::NullPointer, "null pointer argument".into())
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, QoError> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| QoError(QoStatus::InvalidInput, "string is not UTF-8".into()))
}

unsafe fn controller<'a>(c: *mut QoController) -> Result<&'a mut QoController, QoError> {
    c.as_mut().ok_or_else(null)
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], QoError> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(data, len))
}

impl QoController {
    fn handle(&self, h: u64) -> Result<CircuitHandle, QoError> {
        self.handles
            .get(&h)
            .cloned()
            .ok_or_else(|| QoError(QoStatus::UnknownCircuit, format!("no circuit handle {h}")))
    }

    fn issue(&mut self, h: CircuitHandle) -> u64 {
        let id = self.next_handle;
        self.next_handle += 1;
        self.handles.insert(id, h);
        id
    }
}

/// Message of the last failed call on this thread; never null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a controller from topology text (null for the built-in
/// three-node line) and a seed.
///
/// # Safety
/// `topology` is null or a valid C string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qo_controller_new(topology: *const c_char, seed: u64, out: *mut *mut QoController) -> QoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let text = if topology.is_null() {
            qoverlay::cli::DEFAULT_TOPOLOGY
        } else {
            text(topology)?
        };
        let ctrl = TopologyConfig::parse(text)?.build(seed, ControllerSettings::default())?;
        let boxed = Box::new(QoController {
            ctrl,
            handles: BTreeMap::new(),
            next_handle: 1,
            stash: BTreeMap::new(),
        });
        *out = Box::into_raw(boxed);
        Ok(())
    })
}

/// # Safety
/// `ctrl` is null or came from `qo_controller_new` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn qo_controller_free(ctrl: *mut QoController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Runs one QKD session on the link between nodes `a` and `b`.
///
/// # Safety
/// Pointers are valid; strings are C strings.
#[no_mangle]
pub unsafe extern "C" fn qo_run_qkd_session(
    ctrl: *mut QoController,
    a: *const c_char,
    b: *const c_char,
    out: *mut QoQkdReport,
) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let out = out.as_mut().ok_or_else(null)?;
        let (a, b) = (c.ctrl.node(text(a)?)?, c.ctrl.node(text(b)?)?);
        let link = c.ctrl.link_between(&a, &b)?;
        let r = c.ctrl.run_qkd_session(link)?;
        *out = QoQkdReport {
            status: match r.outcome.status {
                QkdStatus::Ok => 0,
                QkdStatus::AbortedQber => 1,
                QkdStatus::AbortedInsufficient => 2,
            },
            qber: r.outcome.qber_estimate,
            sifted_bits: r.sifted_bits as u64,
            distilled_bits: r.outcome.distilled_bits as u64,
        };
        Ok(())
    })
}

/// Opens a circuit of `kind` along `nodes` (whitespace-separated names,
/// endpoints first and last). Writes the first node's handle to `out_a`
/// and the last node's to `out_b`.
///
/// # Safety
/// Pointers are valid; `nodes` is a C string.
#[no_mangle]
pub unsafe extern "C" fn qo_open_path(
    ctrl: *mut QoController,
    nodes: *const c_char,
    kind: QoCircuitKind,
    out_a: *mut u64,
    out_b: *mut u64,
) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        if out_a.is_null() || out_b.is_null() {
            return Err(null());
        }
        let ids = text(nodes)?
            .split_whitespace()
            .map(NodeId::new)
            .collect::<Result<Vec<_>, _>>()?;
        let p = c.ctrl.establish_path(&PathSpec::new(ids), CircuitConfig::new(kind.into()))?;
        *out_a = c.issue(p.a);
        *out_b = c.issue(p.b);
        Ok(())
    })
}

/// # Safety
/// `ctrl` is valid; `data` points to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qo_send_lossy(ctrl: *mut QoController, handle: u64, data: *const u8, len: usize) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let h = c.handle(handle)?;
        c.ctrl.send_lossy(&h, bytes(data, len)?)?;
        Ok(())
    })
}

/// Sends one datagram and waits (in simulated time) for its
/// acknowledgement.
///
/// # Safety
/// `ctrl` is valid; `data` points to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qo_send_reliable(ctrl: *mut QoController, handle: u64, data: *const u8, len: usize) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let h = c.handle(handle)?;
        c.ctrl.send_reliable(&h, bytes(data, len)?)?;
        Ok(())
    })
}

/// Copies the next received datagram into `buf`. Returns `Empty` when
/// none is waiting and `BufferTooSmall` (with `*out_len` set to the
/// needed size, datagram kept) when it does not fit.
///
/// # Safety
/// `ctrl` and `out_len` are valid; `buf` points to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qo_recv(
    ctrl: *mut QoController,
    handle: u64,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> QoStatus {
    let mut empty = false;
    let st = guard(|| {
        let c = controller(ctrl)?;
        let out_len = out_len.as_mut().ok_or_else(null)?;
        let h = c.handle(handle)?;
        let msg = match c.stash.remove(&handle) {
            Some(m) => m,
            None => match c.ctrl.recv(&h)? {
                Some(m) => m,
                None => {
                    empty = true;
                    *out_len = 0;
                    return Ok(());
                }
            },
        };
        *out_len = msg.len();
        if msg.len() > cap {
            c.stash.insert(handle, msg);
            return Err(QoError(QoStatus::BufferTooSmall, "datagram larger than buffer".into()));
        }
        if !msg.is_empty() {
            if buf.is_null() {
                c.stash.insert(handle, msg);
                return Err(null());
            }
            ptr::copy_nonoverlapping(msg.as_ptr(), buf, msg.len());
        }
        Ok(())
    });
    if st == QoStatus::Ok && empty {
        QoStatus::Empty
    } else {
        st
    }
}

/// # Safety
/// `ctrl` is valid; `data` points to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn qo_stream_write(ctrl: *mut QoController, handle: u64, data: *const u8, len: usize) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let h = c.handle(handle)?;
        c.ctrl.stream_write(&h, bytes(data, len)?)?;
        Ok(())
    })
}

/// Closes the writing direction of a bytestream.
///
/// # Safety
/// `ctrl` is valid.
#[no_mangle]
pub unsafe extern "C" fn qo_stream_close(ctrl: *mut QoController, handle: u64) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let h = c.handle(handle)?;
        c.ctrl.stream_close(&h)?;
        Ok(())
    })
}

/// Runs the simulation until everything written at `handle` is delivered.
///
/// # Safety
/// `ctrl` is valid.
#[no_mangle]
pub unsafe extern "C" fn qo_stream_drain(ctrl: *mut QoController, handle: u64) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let h = c.handle(handle)?;
        c.ctrl.stream_drain(&h)?;
        Ok(())
    })
}

/// Reads up to `cap` in-order bytes; `*out_len` may be 0.
///
/// # Safety
/// `ctrl` and `out_len` are valid; `buf` points to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn qo_stream_read(
    ctrl: *mut QoController,
    handle: u64,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let out_len = out_len.as_mut().ok_or_else(null)?;
        if buf.is_null() && cap > 0 {
            return Err(null());
        }
        let h = c.handle(handle)?;
        let got = c.ctrl.stream_read(&h, cap)?;
        if !got.is_empty() {
            ptr::copy_nonoverlapping(got.as_ptr(), buf, got.len());
        }
        *out_len = got.len();
        Ok(())
    })
}

/// Draws `n_bits` (1 to 64) from a synchronized random circuit.
///
/// # Safety
/// `ctrl` and `out` are valid.
#[no_mangle]
pub unsafe extern "C" fn qo_sync_random(ctrl: *mut QoController, handle: u64, n_bits: u32, out: *mut u64) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        let out = out.as_mut().ok_or_else(null)?;
        let h = c.handle(handle)?;
        *out = c.ctrl.sync_random(&h, n_bits)?;
        Ok(())
    })
}

/// Advances the simulation by `ticks`.
///
/// # Safety
/// `ctrl` is valid.
#[no_mangle]
pub unsafe extern "C" fn qo_pump(ctrl: *mut QoController, ticks: u64) -> QoStatus {
    guard(|| {
        controller(ctrl)?.ctrl.run_ticks(ticks)?;
        Ok(())
    })
}

/// The rendered event log, one record per line. Free with
/// `qo_string_free`.
///
/// # Safety
/// `ctrl` and `out` are valid.
#[no_mangle]
pub unsafe extern "C" fn qo_event_log(ctrl: *mut QoController, out: *mut *mut c_char) -> QoStatus {
    guard(|| {
        let c = controller(ctrl)?;
        if out.is_null() {
            return Err(null());
        }
        let s = CString::new(c.ctrl.event_log().render().replace('\0', " ")).unwrap_or_default();
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn qo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `value · 2^(-k_bits)`.
///
/// # Safety
/// `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn qo_to_fraction(value: u64, k_bits: u32, out: *mut f64) -> QoStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        *out = to_fraction(SharedRandom::new(value, k_bits)?);
        Ok(())
    })
}

/// The region of point `x` in the circular split at `r` into `parts`.
///
/// # Safety
/// `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn qo_split_circular_locate(r: f64, parts: usize, x: f64, out: *mut usize) -> QoStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(null)?;
        *out = split_circular(r, parts)?.locate(&UnitPoint::new(vec![x])?)?;
        Ok(())
    })
}
