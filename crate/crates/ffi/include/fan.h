#ifndef FAN_H
#define FAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FanStatus {
  FAN_STATUS_OK = 0,
  FAN_STATUS_NULL_ARGUMENT = 1,
  FAN_STATUS_INVALID_ARGUMENT = 2,
  FAN_STATUS_IO = 3,
  FAN_STATUS_MALFORMED = 4,
  FAN_STATUS_UNKNOWN_SIGNER = 5,
  FAN_STATUS_SIGNATURE_INVALID = 6,
  FAN_STATUS_VERIFIER_REJECTED = 7,
  FAN_STATUS_UNKNOWN_CAPABILITY = 8,
  FAN_STATUS_ASSEMBLY = 9,
  FAN_STATUS_CONFIG = 10,
  FAN_STATUS_EXPECTATION_FAILED = 11,
  FAN_STATUS_TRAP = 12,
  FAN_STATUS_PANIC = 13,
} FanStatus;

/**
 * Trap kinds reported by `fan_vm_run`.
 */
typedef enum FanTrap {
  FAN_TRAP_NONE = 0,
  FAN_TRAP_MEMORY_OUT_OF_BOUNDS = 1,
  FAN_TRAP_DIVISION_BY_ZERO = 2,
  FAN_TRAP_GAS_EXHAUSTED = 3,
  FAN_TRAP_INVALID_HOST_CALL = 4,
  FAN_TRAP_CAPABILITY_DENIED = 5,
  FAN_TRAP_WRITE_TO_R10 = 6,
  FAN_TRAP_HOST_ERROR = 7,
} FanTrap;

typedef struct FanKeyPair FanKeyPair;

typedef struct FanPackage FanPackage;

typedef struct FanTrustStore FanTrustStore;

/**
 * Bytes owned by the library.
 */
typedef struct FanBuffer {
  uint8_t *data;
  size_t len;
} FanBuffer;

typedef struct FanRunResult {
  /**
   * r0 at exit; 0 after a trap.
   */
  uint64_t r0;
  enum FanTrap trap;
  /**
   * pc of the trapping instruction.
   */
  uint64_t trap_pc;
} FanRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into the library on the same thread.
 */
const char *fan_last_error(void);

/**
 * Static NUL-terminated version string.
 */
const char *fan_version(void);

void fan_buffer_free(struct FanBuffer *buf);

enum FanStatus fan_keypair_from_seed(const uint8_t *seed, struct FanKeyPair **out);

/**
 * Writes the 32-byte key id (SHA-256 of the public key).
 */
enum FanStatus fan_keypair_key_id(const struct FanKeyPair *key, uint8_t *out);

enum FanStatus fan_keypair_public_key(const struct FanKeyPair *key, uint8_t *out);

void fan_keypair_free(struct FanKeyPair *key);

struct FanTrustStore *fan_trust_new(void);

/**
 * Adds a raw 32-byte Ed25519 public key.
 */
enum FanStatus fan_trust_add(struct FanTrustStore *trust, const uint8_t *public_key);

/**
 * Loads every `*.pub` key file in `dir`.
 */
enum FanStatus fan_trust_load_dir(const char *dir, struct FanTrustStore **out);

size_t fan_trust_len(const struct FanTrustStore *trust);

void fan_trust_free(struct FanTrustStore *trust);

/**
 * Assembles NUL-terminated source into bytecode.
 */
enum FanStatus fan_assemble(const char *source, struct FanBuffer *out);

/**
 * Disassembles bytecode into text (not NUL-terminated).
 */
enum FanStatus fan_disassemble(const uint8_t *code, size_t len, struct FanBuffer *out);

/**
 * Signs one of the shipped sample plugins ("padding", "counter", "sink").
 */
enum FanStatus fan_sample_package(const char *name,
                                  const struct FanKeyPair *key,
                                  struct FanBuffer *out);

/**
 * Parses and fully verifies a `.fanp` package.
 */
enum FanStatus fan_package_verify(const uint8_t *data,
                                  size_t len,
                                  const struct FanTrustStore *trust,
                                  struct FanPackage **out);

uint32_t fan_package_capability_mask(const struct FanPackage *pkg);

uint32_t fan_package_memory_size(const struct FanPackage *pkg);

/**
 * Package name as UTF-8 bytes.
 */
enum FanStatus fan_package_name(const struct FanPackage *pkg, struct FanBuffer *out);

void fan_package_free(struct FanPackage *pkg);

/**
 * Verifies and runs bytecode from pc 0 with no host functions available.
 * A trap is reported in `out` with status `Trap`.
 */
enum FanStatus fan_vm_run(const uint8_t *code,
                          size_t len,
                          uint32_t memory_size,
                          uint64_t gas,
                          const uint64_t *args,
                          size_t nargs,
                          struct FanRunResult *out);

/**
 * Runs a scenario given as JSON. The trace (JSON lines) goes to `trace`;
 * `passed` is set when every expectation held. Returns
 * `ExpectationFailed` otherwise.
 */
enum FanStatus fan_sim_run(const char *config_json, struct FanBuffer *trace, bool *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAN_H */
