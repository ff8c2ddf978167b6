#include <stdio.h>
#include <stdlib.h>

volatile long sink;

__attribute__((noinline)) void hot(long i) { sink += i; }

int main(int argc, char **argv) {
    long n = argc > 1 ? strtol(argv[1], 0, 10) : 1000;
    for (long i = 0; i < n; i++) hot(i);
    printf("sum=%ld\n", (long)sink);
    return 0;
}
