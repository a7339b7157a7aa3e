#ifndef QOVERLAY_H
#define QOVERLAY_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QoCircuitKind {
  QO_CIRCUIT_KIND_LOSSY = 0,
  QO_CIRCUIT_KIND_RELIABLE = 1,
  QO_CIRCUIT_KIND_BYTESTREAM = 2,
  QO_CIRCUIT_KIND_SYNCRAND = 3,
} QoCircuitKind;

/**
 * Result of every call.
 */
typedef enum QoStatus {
  QO_STATUS_OK = 0,
  QO_STATUS_NULL_POINTER = 1,
  QO_STATUS_INVALID_INPUT = 2,
  QO_STATUS_CONFIG = 3,
  QO_STATUS_UNKNOWN_NODE = 4,
  QO_STATUS_UNKNOWN_LINK = 5,
  QO_STATUS_UNKNOWN_CIRCUIT = 6,
  QO_STATUS_CIRCUIT_UNAVAILABLE = 7,
  QO_STATUS_PATH_UNAVAILABLE = 8,
  QO_STATUS_KEY_EXHAUSTED = 9,
  QO_STATUS_DELIVERY_FAILED = 10,
  QO_STATUS_DESYNC = 11,
  QO_STATUS_TIMEOUT = 12,
  QO_STATUS_SESSION_FAILED = 13,
  QO_STATUS_WRONG_KIND = 14,
  QO_STATUS_NOT_FOUND = 15,
  /**
   * Nothing to receive yet.
   */
  QO_STATUS_EMPTY = 16,
  /**
   * The output buffer is too small; the needed size was written.
   */
  QO_STATUS_BUFFER_TOO_SMALL = 17,
  QO_STATUS_INTERNAL = 18,
  QO_STATUS_PANIC = 19,
} QoStatus;

typedef struct QoController QoController;

/**
 * Outcome of one QKD session.
 */
typedef struct QoQkdReport {
  /**
   * 0 ok, 1 aborted on QBER, 2 aborted with too little key.
   */
  int32_t status;
  double qber;
  uint64_t sifted_bits;
  uint64_t distilled_bits;
} QoQkdReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; never null. Valid until
 * the next failing call on the same thread.
 */
const char *qo_last_error(void);

/**
 * Builds a controller from topology text (null for the built-in
 * three-node line) and a seed.
 *
 * # Safety
 * `topology` is null or a valid C string; `out` is a valid pointer.
 */
enum QoStatus qo_controller_new(const char *topology, uint64_t seed, struct QoController **out);

/**
 * # Safety
 * `ctrl` is null or came from `qo_controller_new` and is not used again.
 */
void qo_controller_free(struct QoController *ctrl);

/**
 * Runs one QKD session on the link between nodes `a` and `b`.
 *
 * # Safety
 * Pointers are valid; strings are C strings.
 */
enum QoStatus qo_run_qkd_session(struct QoController *ctrl,
                                 const char *a,
                                 const char *b,
                                 struct QoQkdReport *out);

/**
 * Opens a circuit of `kind` along `nodes` (whitespace-separated names,
 * endpoints first and last). Writes the first node's handle to `out_a`
 * and the last node's to `out_b`.
 *
 * # Safety
 * Pointers are valid; `nodes` is a C string.
 */
enum QoStatus qo_open_path(struct QoController *ctrl,
                           const char *nodes,
                           enum QoCircuitKind kind,
                           uint64_t *out_a,
                           uint64_t *out_b);

/**
 * # Safety
 * `ctrl` is valid; `data` points to `len` bytes.
 */
enum QoStatus qo_send_lossy(struct QoController *ctrl,
                            uint64_t handle,
                            const uint8_t *data,
                            size_t len);

/**
 * Sends one datagram and waits (in simulated time) for its
 * acknowledgement.
 *
 * # Safety
 * `ctrl` is valid; `data` points to `len` bytes.
 */
enum QoStatus qo_send_reliable(struct QoController *ctrl,
                               uint64_t handle,
                               const uint8_t *data,
                               size_t len);

/**
 * Copies the next received datagram into `buf`. Returns `Empty` when
 * none is waiting and `BufferTooSmall` (with `*out_len` set to the
 * needed size, datagram kept) when it does not fit.
 *
 * # Safety
 * `ctrl` and `out_len` are valid; `buf` points to `cap` writable bytes.
 */
enum QoStatus qo_recv(struct QoController *ctrl,
                      uint64_t handle,
                      uint8_t *buf,
                      size_t cap,
                      size_t *out_len);

/**
 * # Safety
 * `ctrl` is valid; `data` points to `len` bytes.
 */
enum QoStatus qo_stream_write(struct QoController *ctrl,
                              uint64_t handle,
                              const uint8_t *data,
                              size_t len);

/**
 * Closes the writing direction of a bytestream.
 *
 * # Safety
 * `ctrl` is valid.
 */
enum QoStatus qo_stream_close(struct QoController *ctrl, uint64_t handle);

/**
 * Runs the simulation until everything written at `handle` is delivered.
 *
 * # Safety
 * `ctrl` is valid.
 */
enum QoStatus qo_stream_drain(struct QoController *ctrl, uint64_t handle);

/**
 * Reads up to `cap` in-order bytes; `*out_len` may be 0.
 *
 * # Safety
 * `ctrl` and `out_len` are valid; `buf` points to `cap` writable bytes.
 */
enum QoStatus qo_stream_read(struct QoController *ctrl,
                             uint64_t handle,
                             uint8_t *buf,
                             size_t cap,
                             size_t *out_len);

/**
 * Draws `n_bits` (1 to 64) from a synchronized random circuit.
 *
 * # Safety
 * `ctrl` and `out` are valid.
 */
enum QoStatus qo_sync_random(struct QoController *ctrl,
                             uint64_t handle,
                             uint32_t n_bits,
                             uint64_t *out);

/**
 * Advances the simulation by `ticks`.
 *
 * # Safety
 * `ctrl` is valid.
 */
enum QoStatus qo_pump(struct QoController *ctrl, uint64_t ticks);

/**
 * The rendered event log, one record per line. Free with
 * `qo_string_free`.
 *
 * # Safety
 * `ctrl` and `out` are valid.
 */
enum QoStatus qo_event_log(struct QoController *ctrl, char **out);

/**
 * # Safety
 * `s` is null or a string returned by this library, freed once.
 */
void qo_string_free(char *s);

/**
 * `value · 2^(-k_bits)`.
 *
 * # Safety
 * `out` is valid.
 */
enum QoStatus qo_to_fraction(uint64_t value, uint32_t k_bits, double *out);

/**
 * The region of point `x` in the circular split at `r` into `parts`.
 *
 * # Safety
 * `out` is valid.
 */
enum QoStatus qo_split_circular_locate(double r, size_t parts, double x, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QOVERLAY_H */
