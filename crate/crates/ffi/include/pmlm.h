/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PMLM_H
#define PMLM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of residue types.
 */
#define PMLM_NUM_RESIDUES 20

/**
 * Number of ordered residue pairs.
 */
#define PMLM_NUM_PAIRS 400

typedef enum PmlmStatus {
  PMLM_STATUS_OK = 0,
  PMLM_STATUS_NULL_POINTER = 1,
  PMLM_STATUS_INVALID_ARGUMENT = 2,
  PMLM_STATUS_IO = 3,
  PMLM_STATUS_FORMAT = 4,
  PMLM_STATUS_MODEL = 5,
  PMLM_STATUS_SYNTH = 6,
  PMLM_STATUS_EVAL = 7,
  PMLM_STATUS_PANIC = 8,
} PmlmStatus;

/**
 * Pre-trained encoder with its heads.
 */
typedef struct PmlmModel PmlmModel;

/**
 * Coupled-model specification for synthetic data.
 */
typedef struct PmlmSpec PmlmSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Owned by the library.
 */
const char *pmlm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pmlm_version(void);

/**
 * `acc_pmlm - acc_mlm²`.
 */
double pmlm_delta_acc(double acc_pmlm, double acc_mlm);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PmlmStatus pmlm_model_load(const char *path, struct PmlmModel **out);

/**
 * # Safety
 * `model` must come from [`pmlm_model_load`] and not be used afterwards. Null is a no-op.
 */
void pmlm_model_free(struct PmlmModel *model);

/**
 * Longest sequence the model accepts, in residues; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t pmlm_model_max_residues(const struct PmlmModel *model);

/**
 * Mask positions `i` and `j` of `residues` and write the pair-head joint
 * (`out_joint`, 400 entries, row-major over `(x_i, x_j)`), the token-head
 * marginals (`out_marginal_i`, `out_marginal_j`, 20 each) and
 * `KL(marginal_i·marginal_j ‖ joint)` into `out_kl`. Any output may be null.
 *
 * # Safety
 * `residues` must hold `len` bytes; non-null outputs must have the sizes above.
 */
enum PmlmStatus pmlm_model_predict_pair(const struct PmlmModel *model,
                                        const uint8_t *residues,
                                        size_t len,
                                        size_t i,
                                        size_t j,
                                        double *out_joint,
                                        double *out_marginal_i,
                                        double *out_marginal_j,
                                        double *out_kl);

/**
 * Named spec such as `accept-L8`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum PmlmStatus pmlm_spec_preset(const char *name, struct PmlmSpec **out);

/**
 * Spec from a file in the plain-text coupled-model format.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PmlmStatus pmlm_spec_read(const char *path, struct PmlmSpec **out);

/**
 * # Safety
 * `spec` must come from a `pmlm_spec_*` constructor and not be used afterwards. Null is a no-op.
 */
void pmlm_spec_free(struct PmlmSpec *spec);

/**
 * # Safety
 * `spec` must be a live handle or null.
 */
size_t pmlm_spec_length(const struct PmlmSpec *spec);

/**
 * # Safety
 * `spec` must be a live handle or null.
 */
size_t pmlm_spec_alphabet(const struct PmlmSpec *spec);

/**
 * Exact `P(x_i, x_j | context)` as an `A×A` row-major table in `out_joint`.
 * `context` holds one letter per position; entries at `i` and `j` are ignored.
 *
 * # Safety
 * `context` must hold `len` bytes and `out_joint` `alphabet²` doubles.
 */
enum PmlmStatus pmlm_spec_exact_conditional(const struct PmlmSpec *spec,
                                            size_t i,
                                            size_t j,
                                            const uint8_t *context,
                                            size_t len,
                                            double *out_joint);

/**
 * Draw `n` sequences into `out` (`n × length` letters, row-major). `gibbs`
 * nonzero selects Gibbs sampling with default burn-in and thinning.
 *
 * # Safety
 * `out` must hold `n × length` bytes.
 */
enum PmlmStatus pmlm_spec_sample(const struct PmlmSpec *spec,
                                 size_t n,
                                 uint64_t seed,
                                 int32_t gibbs,
                                 uint8_t *out);

/**
 * Precision of the top `max(1, ⌊L/5⌋)` pairs by score among pairs with
 * separation at least `min_separation` (strictly greater if `strict`).
 * `scores` and `truth` are `L×L` row-major; `truth` is nonzero for contacts.
 *
 * # Safety
 * `scores` and `truth` must hold `length²` entries; `out` must be writable.
 */
enum PmlmStatus pmlm_precision_at_l5(const double *scores,
                                     const uint8_t *truth,
                                     size_t length,
                                     size_t min_separation,
                                     int32_t strict,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMLM_H */
