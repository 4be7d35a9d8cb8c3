/* cargo build -p mfoml-ffi
 * cc -std=c99 -Icrates/ffi/include crates/ffi/examples/smoke.c \
 *    target/debug/libmfoml_ffi.a -lm -lpthread -ldl -o smoke */
#include <stdio.h>
#include <stdlib.h>

#include "mfoml.h"

int main(void) {
    MfomlModel *model = NULL;
    MfomlSolution *solution = NULL;
    if (mfoml_model_from_env("building_evacuation", &model) != MFOML_STATUS_OK) {
        fprintf(stderr, "%s\n", mfoml_last_error());
        return 1;
    }
    if (mfoml_solve_fbs(model, 1.0, 0.0, 100, 1e-6, &solution) != MFOML_STATUS_OK) {
        fprintf(stderr, "%s\n", mfoml_last_error());
        mfoml_model_free(model);
        return 1;
    }
    size_t iterations = 0, len = 0;
    bool converged = false;
    double expl = 0.0;
    mfoml_solution_summary(solution, &iterations, &converged, &expl);
    mfoml_solution_policy(solution, NULL, 0, &len);
    double *policy = malloc(len * sizeof *policy);
    mfoml_solution_policy(solution, policy, len, &len);
    printf("mfoml %s: %zu iterations, converged=%d, exploitability=%.3e, policy[0]=%.4f\n",
           mfoml_version(), iterations, converged, expl, policy[0]);
    free(policy);
    mfoml_solution_free(solution);
    mfoml_model_free(model);
    return 0;
}
