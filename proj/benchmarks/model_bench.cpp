#include <benchmark/benchmark.h>

#include <random>

#include "xmal/encoders.hpp"
#include "xmal/fusion.hpp"
#include "xmal/image.hpp"
#include "xmal/rng.hpp"

namespace {

using xmal::ad::Matrix;
using xmal::ad::Var;

void BM_ImageEncoder(benchmark::State& state) {
  const int side = static_cast<int>(state.range(0));
  const xmal::ImageEncoder encoder = xmal::ImageEncoder::initialize({.height = side, .width = side});
  xmal::Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  xmal::ImageTensor img = xmal::ImageTensor::filled(side, side, 0.0);
  for (double& p : img.pixels) p = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(encoder.encode(img).global.values.sum());
}
BENCHMARK(BM_ImageEncoder)->Arg(56)->Arg(112)->Unit(benchmark::kMillisecond);

void BM_FcfmForward(benchmark::State& state) {
  xmal::Rng rng(5);
  const xmal::Fcfm fcfm({}, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  auto g = [&](int r, int c) { return Var(Matrix(Matrix::NullaryExpr(r, c, [&] { return n(rng); }))); };
  const Var words = g(32, 12), regions = g(32, xmal::kRegionCount), global = g(32, 1), caption = g(32, 1);
  for (auto _ : state) benchmark::DoNotOptimize(fcfm.forward(words, regions, global, caption).value().sum());
}
BENCHMARK(BM_FcfmForward);

}  // namespace
