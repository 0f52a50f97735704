#include "ipvrm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ipvrm/error.hpp"

namespace ipvrm::stats {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("mean of an empty sequence");
  double acc = 0.0;
  for (double x : xs) acc += x;
  return acc / static_cast<double>(xs.size());
}

double population_std(std::span<const double> xs) {
  const double m = mean(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(xs.size()));
}

std::vector<double> ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> out(xs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[order[k]] = r;
    i = j + 1;
  }
  return out;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("pearson: length mismatch");
  if (x.size() < 2) return std::nullopt;
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  return pearson(rx, ry);
}

std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractError("auc: length mismatch");
  const auto r = ranks(scores);
  double pos_rank_sum = 0.0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      pos_rank_sum += r[i];
      ++npos;
    }
  }
  const std::size_t nneg = labels.size() - npos;
  if (npos == 0 || nneg == 0) return std::nullopt;
  const double np = static_cast<double>(npos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(nneg));
}

}  // namespace ipvrm::stats
