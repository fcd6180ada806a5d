#include <math.h>
#include <stdio.h>
#include <string.h>

#include "galaxyedit.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            const char *e = gx_last_error();                          \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, e ? e : "no error");                       \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    /* y = w1*x + (a*x)(b*x) on a 1x1 kernel, one channel in and out. */
    double w[3] = {0.5, 2.0, -3.0};
    GxVolterraLayer *layer = NULL;
    CHECK(gx_volterra_from_weights(1, 1, 1, 1, w, 3, &layer) == GX_STATUS_OK);
    CHECK(gx_volterra_param_count(layer) == 3);
    double x[4] = {1.0, -2.0, 0.25, 3.0};
    double y[4];
    CHECK(gx_volterra_forward(layer, x, 1, 2, 2, y, 4) == GX_STATUS_OK);
    for (int i = 0; i < 4; i++) {
        double want = 0.5 * x[i] + (2.0 * x[i]) * (-3.0 * x[i]);
        CHECK(fabs(y[i] - want) < 1e-12);
    }
    CHECK(gx_volterra_forward(layer, x, 1, 2, 2, y, 3) == GX_STATUS_SHAPE);
    CHECK(gx_last_error() != NULL);
    gx_volterra_free(layer);

    unsigned char mask[25] = {0};
    mask[12] = 1;
    unsigned char out[25];
    CHECK(gx_dilate(mask, 5, 5, 3, out) == GX_STATUS_OK);
    int set = 0;
    for (int i = 0; i < 25; i++) set += out[i];
    CHECK(set == 9);

    char *s = NULL;
    CHECK(gx_multi_instance_instruction("car", 2, 1, 0, &s) == GX_STATUS_OK);
    CHECK(strcmp(s, "remove two cars from the right") == 0);
    gx_string_free(s);
    CHECK(gx_simple_instruction(NULL, 0, &s) == GX_STATUS_NULL_POINTER);

    printf("ok %s\n", gx_version());
    return 0;
}
