#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <thread>
#include <vector>

namespace hyperfair::detail {

/// Chunk size used by every reduction. Fixed so that partial sums, and hence
/// results, do not depend on the number of threads.
inline constexpr std::size_t kReduceChunk = 4096;

/// Calls fn(begin, end) over [0, n) split into contiguous blocks, one per thread.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn, std::size_t grain = kReduceChunk)
{
  threads = std::max(1u, threads);
  grain = std::max<std::size_t>(1, grain);
  if (threads == 1 || n < 2 * grain) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t nthreads = std::min<std::size_t>(threads, (n + grain - 1) / grain);
  const std::size_t block = (n + nthreads - 1) / nthreads;
  std::vector<std::jthread> pool;
  pool.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t) {
    const std::size_t b = t * block;
    const std::size_t e = std::min(n, b + block);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
}

/// Sum of term(i) for i in [0, n). Summation order is fixed per kReduceChunk
/// block, then blocks are added left to right: bit-stable for any thread count.
template <typename Term>
double deterministic_sum(std::size_t n, unsigned threads, Term&& term)
{
  const std::size_t nchunks = (n + kReduceChunk - 1) / kReduceChunk;
  std::vector<double> partial(nchunks, 0.0);
  parallel_for(nchunks, threads, [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      const std::size_t b = c * kReduceChunk;
      const std::size_t e = std::min(n, b + kReduceChunk);
      double s = 0.0;
      for (std::size_t i = b; i < e; ++i) s += term(i);
      partial[c] = s;
    }
  }, 1);
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

}  // namespace hyperfair::detail
