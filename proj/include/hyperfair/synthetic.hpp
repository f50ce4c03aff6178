#pragma once

// Seeded toy datasets with a built-in rating gap between the two gender
// groups. Used by the tests, the acceptance suite and the CLI demo.

#include <cmath>
#include <random>

#include "hyperfair/dataio.hpp"

namespace hyperfair {

struct SyntheticOptions {
  int users = 20;        // first half female, second half male
  int items = 10;
  double density = 0.8;  // chance a user rated a given item
  double gap = 0.5;      // normalized mean rating of males minus females
  double item_spread = 0.1;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

/// Normalized latent rating = 0.5 -+ gap/2 by group + item offset + noise,
/// rounded to the nearest star. Every user rates at least one item and every
/// item is rated by both groups.
inline Dataset make_synthetic(const SyntheticOptions& opt = {})
{
  if (opt.users < 2 || opt.items < 1) throw ConfigError("synthetic data needs >= 2 users and >= 1 item");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise);
  static const char* genres[] = {"Action", "Romance", "Crime", "Musical", "Sci-Fi"};

  Dataset ds;
  std::vector<double> offset(opt.items);
  for (int i = 0; i < opt.items; ++i) {
    offset[i] = (2.0 * unit(rng) - 1.0) * opt.item_spread;
    ds.movies[ItemId{i + 1}] = {"Movie " + std::to_string(i + 1), {genres[i % 5]}};
  }
  const int half = opt.users / 2;
  for (int u = 0; u < opt.users; ++u) {
    const bool female = u < half;
    ds.users[UserId{u + 1}] = {female ? "F" : "M", 25, u % 21, "00000"};
    const double center = 0.5 + (female ? -0.5 : 0.5) * opt.gap;
    for (int i = 0; i < opt.items; ++i) {
      // Users 0 and half rate everything so each item sees both groups.
      if (u != 0 && u != half && unit(rng) >= opt.density) continue;
      const double v = std::clamp(center + offset[i] + noise(rng), 0.0, 1.0);
      ds.ratings.push_back({UserId{u + 1}, ItemId{i + 1}, static_cast<int>(std::lround(4.0 * v)) + 1,
                            978300000 + static_cast<std::int64_t>(ds.ratings.size())});
    }
  }
  return ds;
}

}  // namespace hyperfair
