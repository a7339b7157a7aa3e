#include <stdio.h>
#include <string.h>
#include "qoverlay.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        QoStatus st_ = (call);                                             \
        if (st_ != QO_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #call, st_, qo_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    QoController *c = NULL;
    CHECK(qo_controller_new(NULL, 7, &c));

    uint64_t a, b;
    CHECK(qo_open_path(c, "alice relay bob", QO_CIRCUIT_KIND_RELIABLE, &a, &b));
    const char *msg = "over two hops";
    CHECK(qo_send_reliable(c, a, (const uint8_t *)msg, strlen(msg)));
    uint8_t buf[64];
    size_t n = 0;
    CHECK(qo_recv(c, b, buf, sizeof buf, &n));
    if (n != strlen(msg) || memcmp(buf, msg, n) != 0) {
        fprintf(stderr, "payload mismatch\n");
        return 1;
    }
    if (qo_recv(c, b, buf, sizeof buf, &n) != QO_STATUS_EMPTY) {
        fprintf(stderr, "expected an empty inbox\n");
        return 1;
    }

    uint64_t sa, sb, x, y;
    CHECK(qo_open_path(c, "alice relay", QO_CIRCUIT_KIND_SYNCRAND, &sa, &sb));
    for (int i = 0; i < 50; i++) {
        CHECK(qo_sync_random(c, sa, 32, &x));
        CHECK(qo_sync_random(c, sb, 32, &y));
        if (x != y) {
            fprintf(stderr, "draw %d differs\n", i);
            return 1;
        }
    }

    if (qo_open_path(c, "alice nobody", QO_CIRCUIT_KIND_LOSSY, &a, &b) != QO_STATUS_UNKNOWN_NODE) {
        fprintf(stderr, "expected unknown node\n");
        return 1;
    }

    double f;
    CHECK(qo_to_fraction(1, 1, &f));
    size_t region;
    CHECK(qo_split_circular_locate(0.75, 2, 0.1, &region));
    if (f != 0.5 || region != 0) {
        fprintf(stderr, "apps mismatch\n");
        return 1;
    }

    char *log = NULL;
    CHECK(qo_event_log(c, &log));
    qo_string_free(log);
    qo_controller_free(c);
    printf("ok\n");
    return 0;
}
