#ifndef IACKSIM_H
#define IACKSIM_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IacksimStatus {
  IACKSIM_STATUS_OK = 0,
  IACKSIM_STATUS_NULL_POINTER = 1,
  IACKSIM_STATUS_INVALID_UTF8 = 2,
  IACKSIM_STATUS_INVALID_CONFIG = 3,
  IACKSIM_STATUS_SIMULATION_FAILED = 4,
  IACKSIM_STATUS_INVALID_ARGUMENT = 5,
  IACKSIM_STATUS_OUT_OF_RANGE = 6,
  /**
   * The run never delivered a first application byte.
   */
  IACKSIM_STATUS_INCOMPLETE = 7,
  IACKSIM_STATUS_PANIC = 8,
} IacksimStatus;

typedef enum IacksimMode {
  IACKSIM_MODE_IACK = 0,
  IACKSIM_MODE_WFC = 1,
} IacksimMode;

typedef enum IacksimLoss {
  IACKSIM_LOSS_NONE = 0,
  IACKSIM_LOSS_FIRST_SERVER_FLIGHT_REMAINDER = 1,
  IACKSIM_LOSS_SECOND_CLIENT_FLIGHT = 2,
} IacksimLoss;

/**
 * Results of every cell of a scenario, in expansion order.
 */
typedef struct IacksimRunSet IacksimRunSet;

/**
 * Parsed and validated scenario file.
 */
typedef struct IacksimScenario IacksimScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next iacksim call on the same thread.
 */
const char *iacksim_last_error_message(void);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, freed once.
 */
void iacksim_string_free(char *s);

/**
 * Parses and validates a TOML scenario.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` a writable pointer.
 */
enum IacksimStatus iacksim_scenario_from_toml(const char *toml, struct IacksimScenario **out);

/**
 * # Safety
 * `scenario` must be NULL or a handle from `iacksim_scenario_from_toml`.
 */
void iacksim_scenario_free(struct IacksimScenario *scenario);

/**
 * Number of runs the scenario expands to.
 *
 * # Safety
 * `scenario` must be a live handle.
 */
enum IacksimStatus iacksim_scenario_cell_count(const struct IacksimScenario *scenario, size_t *out);

/**
 * Runs every cell. `parallelism` 0 uses all cores; results do not depend
 * on it.
 *
 * # Safety
 * `scenario` must be a live handle; `out` a writable pointer.
 */
enum IacksimStatus iacksim_scenario_run(const struct IacksimScenario *scenario,
                                        size_t parallelism,
                                        struct IacksimRunSet **out);

/**
 * # Safety
 * `runs` must be NULL or a handle from `iacksim_scenario_run`.
 */
void iacksim_runset_free(struct IacksimRunSet *runs);

/**
 * Number of runs; 0 for NULL.
 *
 * # Safety
 * `runs` must be NULL or a live handle.
 */
size_t iacksim_runset_len(const struct IacksimRunSet *runs);

/**
 * Time to first application byte of run `index`, in microseconds.
 * Returns `Incomplete` when the run timed out.
 *
 * # Safety
 * `runs` must be a live handle; `out` a writable pointer.
 */
enum IacksimStatus iacksim_runset_ttfb_us(const struct IacksimRunSet *runs,
                                          size_t index,
                                          uint64_t *out);

/**
 * # Safety
 * `runs` must be a live handle; `out` a writable pointer.
 */
enum IacksimStatus iacksim_runset_mode(const struct IacksimRunSet *runs,
                                       size_t index,
                                       enum IacksimMode *out);

/**
 * Scenario id of run `index` as a new string.
 *
 * # Safety
 * `runs` must be a live handle; `out` a writable pointer.
 */
enum IacksimStatus iacksim_runset_scenario_id(const struct IacksimRunSet *runs,
                                              size_t index,
                                              char **out);

/**
 * Per-run results as CSV text, same format as the CLI's `<name>.csv`.
 *
 * # Safety
 * `runs` must be a live handle; `out` a writable pointer.
 */
enum IacksimStatus iacksim_runset_csv(const struct IacksimRunSet *runs, char **out);

/**
 * Classifies one handshake observation (JSON object) and writes the result
 * as a JSON object with `classification`, `ack_sh_delay_us`,
 * `ack_delay_exceeds_rtt` and `ack_delay_minus_rtt_us`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a writable pointer.
 */
enum IacksimStatus iacksim_classify_observation_json(const char *json, char **out);

/**
 * Client PTO after one RTT sample.
 */
uint64_t iacksim_first_pto_us(uint64_t rtt_us);

/**
 * Client PTO under WFC and IACK after `sample_index + 1` samples.
 *
 * # Safety
 * `wfc_out` and `iack_out` must be writable pointers.
 */
enum IacksimStatus iacksim_pto_at_sample(uint64_t rtt_us,
                                         uint64_t delta_t_us,
                                         size_t sample_index,
                                         uint64_t *wfc_out,
                                         uint64_t *iack_out);

/**
 * Whether an IACK client probes before the ServerHello arrives.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum IacksimStatus iacksim_spurious_retransmit(uint64_t rtt_us, uint64_t delta_t_us, bool *out);

/**
 * Recommended server mode for a deployment situation.
 */
enum IacksimMode iacksim_recommend_mode(bool cert_exceeds_limit,
                                        enum IacksimLoss loss,
                                        uint64_t delta_t_us,
                                        uint64_t rtt_us);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IACKSIM_H */
