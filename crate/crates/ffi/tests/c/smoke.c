#include <stdio.h>
#include <string.h>
#include "iacksim.h"

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "failed: %s (line %d)\n", #cond, __LINE__); return 1; } } while (0)

int main(void) {
    const char *toml =
        "name = \"c\"\n"
        "rtt_us = 9000\n"
        "delta_t_us = 4000\n"
        "profiles = \"quic-go\"\n"
        "bandwidth_bits_per_s = 0\n";
    IacksimScenario *sc = NULL;
    CHECK(iacksim_scenario_from_toml(toml, &sc) == IACKSIM_STATUS_OK);

    IacksimRunSet *runs = NULL;
    CHECK(iacksim_scenario_run(sc, 1, &runs) == IACKSIM_STATUS_OK);
    CHECK(iacksim_runset_len(runs) == 2);
    for (size_t i = 0; i < 2; i++) {
        uint64_t ttfb = 0;
        CHECK(iacksim_runset_ttfb_us(runs, i, &ttfb) == IACKSIM_STATUS_OK);
        CHECK(ttfb == 22000);
    }
    uint64_t t;
    CHECK(iacksim_runset_ttfb_us(runs, 2, &t) == IACKSIM_STATUS_OUT_OF_RANGE);
    CHECK(iacksim_last_error_message() != NULL);

    char *csv = NULL;
    CHECK(iacksim_runset_csv(runs, &csv) == IACKSIM_STATUS_OK);
    CHECK(strncmp(csv, "scenario_id,mode,", 17) == 0);
    iacksim_string_free(csv);

    CHECK(iacksim_first_pto_us(9000) == 27000);
    CHECK(iacksim_recommend_mode(false, IACKSIM_LOSS_NONE, 40000, 9000) == IACKSIM_MODE_WFC);

    IacksimScenario *bad = NULL;
    CHECK(iacksim_scenario_from_toml("name = 3", &bad) == IACKSIM_STATUS_INVALID_CONFIG);
    CHECK(bad == NULL);

    iacksim_runset_free(runs);
    iacksim_scenario_free(sc);
    printf("ok\n");
    return 0;
}
