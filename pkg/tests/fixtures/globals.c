#include <stdio.h>

volatile long g_watched = 5;
char g_buffer[8192];
char g_scratch[256];

__attribute__((noinline)) void writer(void) { g_watched = 42; }

int main(void) {
    writer();
    printf("val=%ld\n", (long)g_watched);
    return 0;
}
