/* Build: cargo build -p aspca-ffi
 *        cc crates/ffi/examples/smoke.c -Icrates/ffi/include -Ltarget/debug -laspca_ffi -o smoke
 *        LD_LIBRARY_PATH=target/debug ./smoke */
#include <stdio.h>
#include "aspca.h"

int main(void) {
    enum { N = 8 };
    double d[N];
    for (int i = 0; i < N; ++i) d[i] = 1.0 + 0.1 * i;
    AspcaSimConfig cfg = aspca_sim_config_default();
    cfg.flux_left = 1.0;
    cfg.flux_right = -1.0;
    cfg.n_steps = 4;
    double states[(4 + 1) * N];
    AspcaStatus st = aspca_simulate(d, N, 1.0, &cfg, states, sizeof states / sizeof *states);
    if (st != ASPCA_STATUS_OK) {
        char msg[256];
        aspca_last_error(msg, sizeof msg);
        fprintf(stderr, "simulate failed (%d): %s\n", (int)st, msg);
        return 1;
    }
    printf("u(T, 0) = %.6f\n", states[4 * N]);

    st = aspca_simulate(NULL, N, 1.0, &cfg, states, 1);
    char msg[256];
    aspca_last_error(msg, sizeof msg);
    printf("null input -> %d (%s)\n", (int)st, msg);
    return st == ASPCA_STATUS_NULL_POINTER ? 0 : 1;
}
