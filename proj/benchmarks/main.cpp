#include <benchmark/benchmark.h>

// The packaged benchmark_main archive carries LTO bytecode tied to its compiler build.
BENCHMARK_MAIN();
