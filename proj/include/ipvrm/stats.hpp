#ifndef IPVRM_STATS_HPP_
#define IPVRM_STATS_HPP_

#include <optional>
#include <span>
#include <vector>

namespace ipvrm::stats {

double mean(std::span<const double> xs);
// Divides by n.
double population_std(std::span<const double> xs);

// Average ranks (1-based), ties share the mean rank.
std::vector<double> ranks(std::span<const double> xs);

// nullopt when either input has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

// Probability that a random positive scores above a random negative (ties
// count one half). nullopt when either class is empty.
std::optional<double> auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace ipvrm::stats

#endif  // IPVRM_STATS_HPP_
