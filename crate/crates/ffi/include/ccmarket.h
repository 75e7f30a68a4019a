#ifndef CCMARKET_H
#define CCMARKET_H

#include <stddef.h>

/*
 Result code of every fallible call.
 */
typedef enum CcmStatus {
  CCM_STATUS_OK = 0,
  CCM_STATUS_NULL_POINTER = 1,
  CCM_STATUS_INVALID_ARGUMENT = 2,
  /*
   Case file unreadable or malformed.
   */
  CCM_STATUS_CASE = 3,
  CCM_STATUS_INFEASIBLE = 4,
  /*
   Solver failure or any other numerical error.
   */
  CCM_STATUS_SOLVER = 5,
  CCM_STATUS_BUFFER_TOO_SMALL = 6,
  CCM_STATUS_PANIC = 7,
} CcmStatus;

typedef enum CcmPolicy {
  CCM_POLICY_DETERMINISTIC = 0,
  CCM_POLICY_SW_SB = 1,
  CCM_POLICY_N2N_SB = 2,
  CCM_POLICY_SW_AB = 3,
  CCM_POLICY_N2N_AB = 4,
} CcmPolicy;

/*
 Opaque network case.
 */
typedef struct CcmCase CcmCase;

/*
 Opaque priced clearing.
 */
typedef struct CcmClearing CcmClearing;

typedef struct CcmCaseDims {
  size_t num_buses;
  size_t num_lines;
  size_t num_generators;
  size_t num_res;
} CcmCaseDims;

typedef struct CcmSettlement {
  double consumer_payment;
  double res_payment;
  double res_balancing_charge;
  double gen_revenue;
  double gen_profit;
  double congestion_rent;
  double adequacy_gap;
} CcmSettlement;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *ccm_version(void);

/*
 Copies the last error message of this thread into `buf` (truncated and
 NUL-terminated). Returns the full message length without the NUL.

 # Safety
 `buf` must be null or valid for `len` bytes.
 */
size_t ccm_last_error(char *buf, size_t len);

/*
 Loads a JSON case file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcmStatus ccm_case_load(const char *path, struct CcmCase **out);

/*
 Parses a case from a JSON document.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcmStatus ccm_case_from_json(const char *json, struct CcmCase **out);

/*
 New case with every RES forecast and sigma multiplied by `factor`.

 # Safety
 `grid` must be a live handle and `out` a valid pointer.
 */
enum CcmStatus ccm_case_scale_res(const struct CcmCase *grid, double factor, struct CcmCase **out);

/*
 # Safety
 `grid` must be a live handle and `dims` a valid pointer.
 */
enum CcmStatus ccm_case_dims(const struct CcmCase *grid, struct CcmCaseDims *dims);

/*
 Releases a case handle. Null is ignored.

 # Safety
 `grid` must be null or a handle not yet freed.
 */
void ccm_case_free(struct CcmCase *grid);

/*
 Clears `grid` under `policy` at risk level `epsilon` and prices the result.

 # Safety
 `grid` must be a live handle and `out` a valid pointer.
 */
enum CcmStatus ccm_clear(const struct CcmCase *grid,
                         enum CcmPolicy policy,
                         double epsilon,
                         struct CcmClearing **out);

/*
 Releases a clearing. Null is ignored.

 # Safety
 `clearing` must be null or a handle not yet freed.
 */
void ccm_clearing_free(struct CcmClearing *clearing);

/*
 # Safety
 `clearing` must be a live handle and `value` a valid pointer.
 */
enum CcmStatus ccm_clearing_objective(const struct CcmClearing *clearing, double *value);

/*
 Scheduled output per generator, in case order.

 # Safety
 `clearing` must be a live handle, `out` valid for `len` values and
 `needed` null or valid.
 */
enum CcmStatus ccm_clearing_dispatch(const struct CcmClearing *clearing,
                                     double *out,
                                     size_t len,
                                     size_t *needed);

/*
 Energy price per bus, in case order.

 # Safety
 As for [`ccm_clearing_dispatch`].
 */
enum CcmStatus ccm_clearing_lambda(const struct CcmClearing *clearing,
                                   double *out,
                                   size_t len,
                                   size_t *needed);

/*
 Balancing reserve price per column: one value for SW-SB, `[χ⁻, χ⁺]` for
 SW-AB, one per RES unit for N2N-SB, downward then upward per RES unit for
 N2N-AB, none for the deterministic clearing.

 # Safety
 As for [`ccm_clearing_dispatch`].
 */
enum CcmStatus ccm_clearing_chi(const struct CcmClearing *clearing,
                                double *out,
                                size_t len,
                                size_t *needed);

/*
 Participation factors, row-major with one row per generator and one
 column per balancing column.

 # Safety
 As for [`ccm_clearing_dispatch`].
 */
enum CcmStatus ccm_clearing_alpha(const struct CcmClearing *clearing,
                                  double *out,
                                  size_t len,
                                  size_t *needed);

/*
 # Safety
 `clearing` must be a live handle and `out` a valid pointer.
 */
enum CcmStatus ccm_clearing_settlement(const struct CcmClearing *clearing,
                                       struct CcmSettlement *out);

/*
 Canonical JSON of the clearing, NUL-terminated. `needed` receives the
 byte count including the NUL.

 # Safety
 `clearing` must be a live handle, `buf` valid for `len` bytes and
 `needed` null or valid.
 */
enum CcmStatus ccm_clearing_to_json(const struct CcmClearing *clearing,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCMARKET_H */
