#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dskd/data.hpp"

namespace dskd {

DatasetSplit split_dataset(std::size_t count, std::array<double, 3> ratios, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("split_dataset: no samples to split");
  double total = 0.0;
  for (double r : ratios) {
    if (!std::isfinite(r) || r < 0.0) {
      throw std::invalid_argument("split_dataset: ratios must be finite and non-negative");
    }
    total += r;
  }
  if (!(total > 0.0) || std::abs(total - std::round(total)) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios must sum to a whole number");
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto portion = [&](double r) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(count) * r / total));
  };
  std::size_t n_val = portion(ratios[1]);
  std::size_t n_test = portion(ratios[2]);
  if (n_val + n_test > count) n_test = count - std::min(count, n_val);

  DatasetSplit split;
  split.ratios = ratios;
  const std::size_t n_train = count - n_val - n_test;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  split.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return split;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size,
                                                   std::uint64_t seed, int epoch) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace dskd
