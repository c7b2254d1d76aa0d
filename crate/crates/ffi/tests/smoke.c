#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "deltakv.h"

#define CHECK(expr)                                                        \
    do {                                                                   \
        int32_t rc_ = (expr);                                              \
        if (rc_ != DKV_OK) {                                               \
            fprintf(stderr, "%s -> %d: %s\n", #expr, rc_, dkv_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    DkvEngine *h = NULL;
    CHECK(dkv_engine_new("{\"controller\": {\"budget\": 0.5}}", &h));
    size_t vocab = 0;
    CHECK(dkv_engine_vocab(h, &vocab));
    float *logits = malloc(vocab * sizeof(float));
    uint32_t prompt[24];
    for (uint32_t i = 0; i < 24; i++) prompt[i] = (i * 5) % (uint32_t)vocab;
    CHECK(dkv_engine_prefill(h, prompt, 24, 5, logits, vocab));
    for (int step = 0; step < 4; step++) {
        size_t best = 0;
        for (size_t v = 1; v < vocab; v++)
            if (logits[v] > logits[best]) best = v;
        CHECK(dkv_engine_decode(h, (uint32_t)best, logits, vocab));
    }
    char *report = NULL;
    CHECK(dkv_engine_memory_report(h, &report));
    if (strstr(report, "\"tokens\":28") == NULL) {
        fprintf(stderr, "unexpected report %s\n", report);
        return 1;
    }
    dkv_string_free(report);
    dkv_engine_free(h);

    DkvBudgetRatios r;
    CHECK(dkv_budget_ratios(4, 32, 10, 0.25, 1.0, 0.3, &r));
    if (fabs(r.kr - 0.43125) > 1e-12) return 1;

    float z[5] = {0.1f, -0.4f, 0.9f, 0.0f, 0.3f};
    uint8_t q[16];
    float back[5];
    size_t n = dkv_quantized_bytes(5);
    CHECK(dkv_quantize(z, 5, q, sizeof q));
    CHECK(dkv_dequantize(q, n, 5, back));
    for (int i = 0; i < 5; i++)
        if (fabs(back[i] - z[i]) > 1.3f / 15.0f / 2.0f + 1e-6f) return 1;
    free(logits);
    printf("ok\n");
    return 0;
}
