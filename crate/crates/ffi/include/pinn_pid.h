#ifndef PINN_PID_H
#define PINN_PID_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum PinnPidStatus {
  PINN_PID_STATUS_OK = 0,
  PINN_PID_STATUS_NULL_POINTER = 1,
  PINN_PID_STATUS_INVALID_UTF8 = 2,
  PINN_PID_STATUS_DIMENSION = 3,
  PINN_PID_STATUS_NON_FINITE = 4,
  PINN_PID_STATUS_CONFIG = 5,
  PINN_PID_STATUS_SINGULAR = 6,
  PINN_PID_STATUS_INFEASIBLE_GAINS = 7,
  PINN_PID_STATUS_MODEL_FORMAT = 8,
  PINN_PID_STATUS_SELF_CHECK = 9,
  PINN_PID_STATUS_IO = 10,
  PINN_PID_STATUS_PANIC = 11,
} PinnPidStatus;

// Trained surrogate.
typedef struct PinnPidModel PinnPidModel;

// Nominal plant.
typedef struct PinnPidPlant PinnPidPlant;

// Frozen-gain stability report of the mass-spring-damper loop.
typedef struct PinnPidStabilityReport {
  double g;
  double margin;
  // Valid when `has_crossover` is true.
  double crossover;
  bool has_crossover;
  bool stable;
} PinnPidStabilityReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static, NUL-terminated version string.
const char *pinn_pid_version(void);

// Copies the last error message of this thread into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t pinn_pid_last_error_message(char *buf, uintptr_t len);

// Loads a model file written by the `train` stage.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PinnPidStatus pinn_pid_model_load(const char *path, double dt, struct PinnPidModel **out);

// # Safety
// `model` must be null or a handle from [`pinn_pid_model_load`] not yet freed.
void pinn_pid_model_free(struct PinnPidModel *model);

// State and input dimensions of a model.
//
// # Safety
// `model` must be a live handle; `n` and `m` valid pointers.
enum PinnPidStatus pinn_pid_model_dims(const struct PinnPidModel *model,
                                       uintptr_t *n,
                                       uintptr_t *m);

// `phi_hat(t, x, u)` into `out` (length `n`).
//
// # Safety
// `x`, `u` and `out` must hold `n`, `m` and `n` doubles.
enum PinnPidStatus pinn_pid_model_predict(const struct PinnPidModel *model,
                                          double t,
                                          const double *x,
                                          uintptr_t n,
                                          const double *u,
                                          uintptr_t m,
                                          double *out);

// `d phi_hat / dt (t, x, u)` into `out` (length `n`).
//
// # Safety
// As [`pinn_pid_model_predict`].
enum PinnPidStatus pinn_pid_model_time_derivative(const struct PinnPidModel *model,
                                                  double t,
                                                  const double *x,
                                                  uintptr_t n,
                                                  const double *u,
                                                  uintptr_t m,
                                                  double *out);

// Mass-spring-damper plant.
//
// # Safety
// `out` must be a valid pointer.
enum PinnPidStatus pinn_pid_plant_msd_new(double mass,
                                          double damping,
                                          double stiffness,
                                          struct PinnPidPlant **out);

// Two-link manipulator with the default parameters.
//
// # Safety
// `out` must be a valid pointer.
enum PinnPidStatus pinn_pid_plant_manipulator_default(struct PinnPidPlant **out);

// # Safety
// `plant` must be null or a live plant handle.
void pinn_pid_plant_free(struct PinnPidPlant *plant);

// Holds `u` for `duration` seconds with `steps` RK4 steps from `x`;
// the final state goes to `out`.
//
// # Safety
// `x`, `u` and `out` must hold `n`, `m` and `n` doubles.
enum PinnPidStatus pinn_pid_plant_integrate(const struct PinnPidPlant *plant,
                                            const double *x,
                                            uintptr_t n,
                                            const double *u,
                                            uintptr_t m,
                                            double duration,
                                            uintptr_t steps,
                                            double *out);

// Frozen-loop report for gains `(kp, ki, kd)` on a mass-spring-damper plant.
//
// # Safety
// `plant` must be a live handle and `out` a valid pointer.
enum PinnPidStatus pinn_pid_stability_report(const struct PinnPidPlant *plant,
                                             double kp,
                                             double ki,
                                             double kd,
                                             struct PinnPidStabilityReport *out);

// Runs the closed-loop experiment of a TOML configuration file into
// `out_dir`. `model_path` may be null: the model is then trained first.
//
// # Safety
// `config_path` and `out_dir` must be NUL-terminated strings; `model_path`
// null or NUL-terminated.
enum PinnPidStatus pinn_pid_run_experiment(const char *config_path,
                                           const char *model_path,
                                           const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PINN_PID_H */
