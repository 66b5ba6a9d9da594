/*
 * Minimal C client: a linear feature map z = A x has zero holonomy.
 *
 *   cargo build --release -p rep-holonomy-ffi
 *   cc -I crates/ffi/include crates/ffi/examples/smoke.c \
 *      -L target/release -lrep_holonomy_ffi -lm -o smoke
 *   LD_LIBRARY_PATH=target/release ./smoke
 */
#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "holonomy.h"

#define D 4
#define P 6
#define N 256
#define L 8

static double A[P][D];

static int linear_map(void *user, const double *x, size_t d, double *out, size_t p) {
    (void)user;
    for (size_t i = 0; i < p; i++) {
        out[i] = 0.0;
        for (size_t j = 0; j < d; j++) out[i] += A[i][j] * x[j];
    }
    return 0;
}

static double uniform(unsigned *state) {
    *state = *state * 1103515245u + 12345u;
    return ((*state >> 8) & 0xffff) / 65536.0 - 0.5;
}

static int check(HolStatus st, const char *what) {
    if (st != HOL_STATUS_OK) {
        fprintf(stderr, "%s failed (%d): %s\n", what, (int)st, hol_last_error());
        return 1;
    }
    return 0;
}

int main(void) {
    unsigned seed = 7;
    for (int i = 0; i < P; i++)
        for (int j = 0; j < D; j++) A[i][j] = uniform(&seed);

    static double inputs[N * D], feats[N * P];
    for (int n = 0; n < N; n++) {
        for (int j = 0; j < D; j++) inputs[n * D + j] = uniform(&seed);
        linear_map(NULL, &inputs[n * D], D, &feats[n * P], P);
    }

    HolPool *pool = NULL;
    if (check(hol_pool_new(feats, N, P, &pool), "hol_pool_new")) return 1;
    if (check(hol_pool_set_inputs(pool, inputs, N, D), "hol_pool_set_inputs")) return 1;

    HolConfig cfg;
    hol_default_config(&cfg);
    cfg.k = 64;
    cfg.q = 4;

    double pts[(L + 1) * D] = {0};
    for (int t = 0; t <= L; t++) {
        double a = 2.0 * M_PI * (t % L) / L;
        pts[t * D + 0] = 0.05 * cos(a);
        pts[t * D + 1] = 0.05 * sin(a);
    }

    HolResult *res = NULL;
    if (check(hol_estimate_callback(pool, &cfg, linear_map, NULL, pts, L + 1, D, &res),
              "hol_estimate_callback"))
        return 1;

    double h = 0.0;
    hol_result_h_norm(res, &h);
    printf("rep-holonomy %s: h_norm = %.3e\n", hol_version(), h);

    hol_result_free(res);
    hol_pool_free(pool);
    return h < 1e-8 ? 0 : 1;
}
