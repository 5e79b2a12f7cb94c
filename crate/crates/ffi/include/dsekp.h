#ifndef DSEKP_H
#define DSEKP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum DsekpStatus {
  DSEKP_STATUS_OK = 0,
  DSEKP_STATUS_NULL_POINTER = 1,
  DSEKP_STATUS_INVALID_ARGUMENT = 2,
  DSEKP_STATUS_MALFORMED = 3,
  DSEKP_STATUS_AUTH_FAILURE = 4,
  /**
   * The edge refused an init or a data packet; see the error message.
   */
  DSEKP_STATUS_REJECTED = 5,
  DSEKP_STATUS_WRONG_STATE = 6,
  DSEKP_STATUS_INTERNAL = 7,
} DsekpStatus;

/**
 * Device-side session state machine.
 */
typedef struct DsekpDevice DsekpDevice;

/**
 * Edge-side session store.
 */
typedef struct DsekpEdge DsekpEdge;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *dsekp_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void dsekp_string_free(char *s);

/**
 * Derives the 32-byte session secret into `out_secret`.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths; `dev_nonce` is 12
 * bytes and `out_secret` 32 bytes.
 */
enum DsekpStatus dsekp_derive_session_secret(const uint8_t *dev_secret,
                                             size_t dev_secret_len,
                                             const uint8_t *edge_salt,
                                             size_t edge_salt_len,
                                             const uint8_t *dev_nonce,
                                             uint16_t sess_ctr,
                                             uint32_t timestamp_t,
                                             uint8_t *out_secret);

/**
 * AES-128-GCM encryption. `out_ciphertext` receives `plaintext_len` bytes
 * and `out_tag` 16 bytes.
 *
 * # Safety
 * `key` is 16 bytes, `iv` 12 bytes; other pointers reference buffers of the
 * stated lengths.
 */
enum DsekpStatus dsekp_aead_seal(const uint8_t *key,
                                 const uint8_t *iv,
                                 const uint8_t *aad,
                                 size_t aad_len,
                                 const uint8_t *plaintext,
                                 size_t plaintext_len,
                                 uint8_t *out_ciphertext,
                                 uint8_t *out_tag);

/**
 * AES-128-GCM decryption. `out_plaintext` receives `ciphertext_len` bytes
 * only when the tag verifies; otherwise `AuthFailure` is returned.
 *
 * # Safety
 * `key` is 16 bytes, `iv` 12 bytes, `tag` 16 bytes; other pointers
 * reference buffers of the stated lengths.
 */
enum DsekpStatus dsekp_aead_open(const uint8_t *key,
                                 const uint8_t *iv,
                                 const uint8_t *aad,
                                 size_t aad_len,
                                 const uint8_t *ciphertext,
                                 size_t ciphertext_len,
                                 const uint8_t *tag,
                                 uint8_t *out_plaintext);

/**
 * Creates a device. `seed` drives its nonces, counters and IV prefixes.
 *
 * # Safety
 * `dev_id` is a NUL-terminated string; buffers have the stated lengths.
 */
enum DsekpStatus dsekp_device_new(const char *dev_id,
                                  const uint8_t *dev_secret,
                                  size_t dev_secret_len,
                                  const uint8_t *edge_salt,
                                  size_t edge_salt_len,
                                  uint64_t seed,
                                  struct DsekpDevice **out_device);

/**
 * # Safety
 * `device` comes from [`dsekp_device_new`] and is not used afterwards.
 */
void dsekp_device_free(struct DsekpDevice *device);

/**
 * Starts a session and returns the init message body (JSON) to publish.
 *
 * # Safety
 * `device` is a live handle; `out_init_json` is writable.
 */
enum DsekpStatus dsekp_device_begin_session(struct DsekpDevice *device,
                                            uint64_t now_ms,
                                            char **out_init_json);

/**
 * Feeds an ack body received on the device's ack topic.
 *
 * # Safety
 * `device` is a live handle; `body` has `body_len` bytes.
 */
enum DsekpStatus dsekp_device_on_ack(struct DsekpDevice *device,
                                     const uint8_t *body,
                                     size_t body_len,
                                     uint64_t now_ms);

/**
 * Seals a reading under the active session and returns the data packet
 * body (JSON) for `dsekp/data`.
 *
 * # Safety
 * `device` is a live handle; `plaintext` has `plaintext_len` bytes.
 */
enum DsekpStatus dsekp_device_seal(struct DsekpDevice *device,
                                   const uint8_t *plaintext,
                                   size_t plaintext_len,
                                   uint64_t now_ms,
                                   char **out_packet_json);

/**
 * Creates an edge store. Zero arguments select the defaults (5 sessions,
 * 120 s skew).
 *
 * # Safety
 * `out_edge` is writable.
 */
enum DsekpStatus dsekp_edge_new(uint32_t capacity,
                                uint32_t max_skew_s,
                                struct DsekpEdge **out_edge);

/**
 * # Safety
 * `edge` comes from [`dsekp_edge_new`] and is not used afterwards.
 */
void dsekp_edge_free(struct DsekpEdge *edge);

/**
 * Registers a device's provisioned credentials.
 *
 * # Safety
 * `edge` is a live handle; `dev_id` is NUL-terminated; buffers have the
 * stated lengths.
 */
enum DsekpStatus dsekp_edge_register(struct DsekpEdge *edge,
                                     const char *dev_id,
                                     const uint8_t *dev_secret,
                                     size_t dev_secret_len,
                                     const uint8_t *edge_salt,
                                     size_t edge_salt_len);

/**
 * Handles an init body from `dsekp/init`. The ack body is always written
 * to `out_ack_json`; the status is `Rejected` when its status is
 * `rejected`.
 *
 * # Safety
 * `edge` is a live handle; `body` has `body_len` bytes.
 */
enum DsekpStatus dsekp_edge_handle_init(struct DsekpEdge *edge,
                                        const uint8_t *body,
                                        size_t body_len,
                                        uint64_t now_ms,
                                        char **out_ack_json);

/**
 * Handles a data body from `dsekp/data`. On success the accepted record is
 * written to `out_record_json` as `{"dev_id", "sessctr_id", "seq",
 * "plaintext", "latency_ms"}`.
 *
 * # Safety
 * `edge` is a live handle; `body` has `body_len` bytes.
 */
enum DsekpStatus dsekp_edge_handle_data(struct DsekpEdge *edge,
                                        const uint8_t *body,
                                        size_t body_len,
                                        uint64_t now_ms,
                                        char **out_record_json);

/**
 * Number of sessions the edge holds for `dev_id`.
 *
 * # Safety
 * `edge` is a live handle; `dev_id` is NUL-terminated.
 */
enum DsekpStatus dsekp_edge_session_count(const struct DsekpEdge *edge,
                                          const char *dev_id,
                                          size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSEKP_H */
