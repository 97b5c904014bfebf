#include <stdio.h>
#include <stdlib.h>

#include "arraycal.h"

static const char *SCENARIO =
    "dt = 1.0\n"
    "[[arrays]]\nposition = [0.0, 0.0, 0.0]\neuler = [0.0, 0.0, 0.0]\ntau = 0.0\ndelta = 0.0\n"
    "[[arrays]]\nposition = [2.0, 0.5, 0.3]\neuler = [0.3, 0.8, 1.9]\ntau = 0.02\ndelta = 1e-5\n"
    "[[arrays]]\nposition = [-1.0, 2.0, 0.8]\neuler = [2.2, 1.1, 0.4]\ntau = 0.04\ndelta = -2e-5\n"
    "[trajectory]\nkind = \"observable\"\nsteps = 8\n";

int main(void) {
    ArraycalScenario *sc = NULL;
    if (arraycal_scenario_from_toml(SCENARIO, &sc) != ARRAYCAL_STATUS_OK) {
        fprintf(stderr, "parse: %s\n", arraycal_last_error());
        return 1;
    }
    ArraycalDims d;
    arraycal_scenario_dims(sc, &d);

    size_t *ranks = calloc(d.n_steps, sizeof *ranks);
    size_t *g2 = calloc(d.n_steps, sizeof *g2);
    if (arraycal_rank_trace(sc, 0.0, ranks, g2, d.n_steps) != ARRAYCAL_STATUS_OK) {
        fprintf(stderr, "trace: %s\n", arraycal_last_error());
        return 1;
    }
    for (size_t k = 0; k < d.n_steps; k++) {
        printf("%zu %zu %zu\n", k + 1, ranks[k], g2[k]);
    }

    ArraycalVerdict v;
    arraycal_check(sc, 0.0, &v);
    printf("observable %d rank %zu of %zu\n", v.observable, v.rank_j, v.state_dim);

    if (arraycal_rank_trace(sc, 0.0, ranks, g2, 1) != ARRAYCAL_STATUS_BUFFER_TOO_SMALL) {
        return 1;
    }
    free(ranks);
    free(g2);
    arraycal_scenario_free(sc);
    return v.observable ? 0 : 1;
}
