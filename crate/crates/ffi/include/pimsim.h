#ifndef PIMSIM_H
#define PIMSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PimsimStatus {
  PIMSIM_STATUS_OK = 0,
  PIMSIM_STATUS_NULL_POINTER = 1,
  PIMSIM_STATUS_INVALID_ARGUMENT = 2,
  PIMSIM_STATUS_UNKNOWN_PRESET = 3,
  PIMSIM_STATUS_INVALID_CONFIG = 4,
  PIMSIM_STATUS_SIMULATION_FAILED = 5,
  PIMSIM_STATUS_PANIC = 6,
} PimsimStatus;

typedef enum PimsimMode {
  PIMSIM_MODE_GPU_ONLY = 0,
  PIMSIM_MODE_HBCEM = 1,
  PIMSIM_MODE_LBIM = 2,
} PimsimMode;

typedef enum PimsimInstruction {
  PIMSIM_INSTRUCTION_PIM_MAC_FM = 0,
  PIMSIM_INSTRUCTION_MACT_LDB = 1,
  PIMSIM_INSTRUCTION_MACB_LDT = 2,
} PimsimInstruction;

typedef enum PimsimFlow {
  PIMSIM_FLOW_K = 0,
  PIMSIM_FLOW_V = 1,
} PimsimFlow;

// The result of one simulation.
typedef struct PimsimReport PimsimReport;

// A validated device, PIM organisation, model and calibration.
typedef struct PimsimSystem PimsimSystem;

typedef struct PimsimBandwidths {
  uint64_t external_bytes_per_s;
  uint64_t internal_hbcem_bytes_per_s;
  uint64_t internal_lbim_bytes_per_s;
  uint64_t mac_per_s;
} PimsimBandwidths;

typedef struct PimsimOverhead {
  double cu_area_um2;
  double area_fraction;
  double cu_power_mw;
} PimsimOverhead;

typedef struct PimsimSummary {
  double end_to_end_s;
  double mean_ttft_s;
  double mean_decode_s;
  double internal_bw_used;
  double pim_utilization;
  uint64_t pim_weight_bytes;
  uint64_t mode_switches;
} PimsimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pimsim_version(void);

// Message for the last failed call on this thread, or NULL. Valid until the next failing call.
const char *pimsim_last_error(void);

// Builds a system from device and model preset names (aliases such as "jetson" and "7b" work).
//
// # Safety
// `device` and `model` must be NUL-terminated strings; `out` must be writable.
enum PimsimStatus pimsim_system_new(const char *device,
                                    const char *model,
                                    struct PimsimSystem **out);

// Builds a system from JSON of the form
// `{"device": <preset or object>, "model": <preset or object>, "org": {...}, "params": {...}}`.
// `org` and `params` are optional.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum PimsimStatus pimsim_system_from_json(const char *json, struct PimsimSystem **out);

// # Safety
// `sys` must come from `pimsim_system_new`/`pimsim_system_from_json` and not be used afterwards. NULL is ignored.
void pimsim_system_free(struct PimsimSystem *sys);

// # Safety
// `sys` must be a live system handle; `out` must be writable.
enum PimsimStatus pimsim_system_bandwidths(const struct PimsimSystem *sys,
                                           struct PimsimBandwidths *out);

// Compute-unit area and power summed over all dies of the system.
//
// # Safety
// `sys` must be a live system handle; `out` must be writable.
enum PimsimStatus pimsim_system_overhead(const struct PimsimSystem *sys,
                                         struct PimsimOverhead *out);

// Simulates `batch` requests of `lin` prompt tokens and `lout` generated tokens.
//
// # Safety
// `sys` must be a live system handle; `out` must be writable.
enum PimsimStatus pimsim_simulate(const struct PimsimSystem *sys,
                                  enum PimsimMode mode,
                                  uint64_t lin,
                                  uint64_t lout,
                                  uint64_t batch,
                                  struct PimsimReport **out);

// # Safety
// `rep` must be a live report handle; `out` must be writable.
enum PimsimStatus pimsim_report_summary(const struct PimsimReport *rep, struct PimsimSummary *out);

// Serialises the full report. Release the string with `pimsim_string_free`.
//
// # Safety
// `rep` must be a live report handle; `out` must be writable.
enum PimsimStatus pimsim_report_json(const struct PimsimReport *rep, char **out);

// # Safety
// `rep` must come from `pimsim_simulate` and not be used afterwards. NULL is ignored.
void pimsim_report_free(struct PimsimReport *rep);

// # Safety
// `s` must come from this library and not be used afterwards. NULL is ignored.
void pimsim_string_free(char *s);

// Writes the (SEL0, SEL1) control bits of an instruction.
//
// # Safety
// `sel0` and `sel1` must be writable.
enum PimsimStatus pimsim_encode(enum PimsimInstruction kind, uint8_t *sel0, uint8_t *sel1);

// # Safety
// `out` must be writable.
enum PimsimStatus pimsim_decode(uint8_t sel0, uint8_t sel1, enum PimsimInstruction *out);

// Runs an INT8 GEMV through the PIM layout: `out[c] = sum_r matrix[r * cols + c] * input[r]`.
// The K flow expects a head_dim x context matrix, the V flow a context x head_dim matrix.
//
// # Safety
// `matrix` must hold `rows * cols` values, `input` `rows` values and `out` room for `cols` values.
enum PimsimStatus pimsim_gemv(enum PimsimFlow flow,
                              const int8_t *matrix,
                              size_t rows,
                              size_t cols,
                              const int8_t *input,
                              uint32_t dies,
                              int64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIMSIM_H */
