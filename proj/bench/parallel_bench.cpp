// Copyright 2026 The leapsim Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Serial reference vs OpenMP kernels: the random-scenario sweep and the
// level-parallel bounded exploration. Results must be identical.
//
//   leapsim_parallel_bench [sweep_count] [explore_depth]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include <omp.h>

#include "leapsim/bench.hpp"

using namespace leapsim;

namespace
{

template <typename F>
double
seconds(F&& f)
{
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int
main(int argc, char** argv)
{
  const std::size_t count = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 1000;
  const std::uint32_t depth = argc > 2 ? std::uint32_t(std::strtoul(argv[2], nullptr, 10)) : 10;
  std::printf("threads: %d\n", omp_get_max_threads());

  SweepResult ss, sp;
  const double t_ss = seconds([&] { ss = sweep_serial(0, count); });
  const double t_sp = seconds([&] { sp = sweep_parallel(0, count); });
  const bool sweep_same = ss.trace_digests == sp.trace_digests and ss.violations == sp.violations;
  std::printf("sweep   n=%zu  serial %.3f s  parallel %.3f s  speedup %.2fx  identical: %s\n",
              count, t_ss, t_sp, t_ss / t_sp, sweep_same ? "yes" : "NO");

  ExploreConfig cfg;
  cfg.depth = depth;
  ExploreResult es, ep;
  const double t_es = seconds([&] { es = explore_serial(cfg); });
  const double t_ep = seconds([&] { ep = explore(cfg); });
  const bool explore_same = es.states_visited == ep.states_visited
    and es.transitions == ep.transitions and es.level_sizes == ep.level_sizes;
  std::printf("explore depth=%u states=%zu  serial %.3f s  parallel %.3f s  speedup %.2fx  "
              "identical: %s\n",
              depth, es.states_visited, t_es, t_ep, t_es / t_ep, explore_same ? "yes" : "NO");
  return sweep_same and explore_same ? 0 : 1;
}
