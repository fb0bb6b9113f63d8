/* Rasterize an ellipse, fit it back, and query a schedule through the C ABI. */
#include <stdio.h>

#include "blobdrag.h"

int main(void) {
    BdBlobParams p = {16.0, 16.0, 8.0, 4.0, 0.6};
    BdMask *mask = NULL;
    if (bd_rasterize(&p, 32, 32, &mask) != BD_STATUS_OK) {
        return 1;
    }
    BdBlobParams fit;
    if (bd_fit_ellipse(mask, &fit) != BD_STATUS_OK) {
        return 1;
    }
    BdMask *refit = NULL;
    double iou = 0.0;
    bd_rasterize(&fit, 32, 32, &refit);
    bd_mask_iou(mask, refit, &iou);
    printf("fit cx=%.3f cy=%.3f a=%.3f b=%.3f theta=%.3f iou=%.4f\n", fit.cx, fit.cy, fit.a, fit.b,
           fit.theta, iou);

    BdSchedule *s = NULL;
    double ab = 0.0;
    bd_schedule_new(20, 1e-4, 0.02, &s);
    bd_schedule_alpha_bar(s, 20, &ab);
    printf("alpha_bar(20)=%.12f\n", ab);

    BdMask *tiny = NULL;
    unsigned char bits[4] = {1, 1, 0, 0};
    bd_mask_from_bytes(2, 2, bits, &tiny);
    BdStatus st = bd_fit_ellipse(tiny, &fit);
    char msg[256];
    bd_last_error_message(msg, sizeof msg);
    printf("tiny status=%d message=%s\n", (int)st, msg);

    bd_mask_free(tiny);
    bd_mask_free(refit);
    bd_mask_free(mask);
    bd_schedule_free(s);
    return (iou >= 0.95 && st == BD_STATUS_DEGENERATE_MASK) ? 0 : 1;
}
