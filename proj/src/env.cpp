#include "ipvrm/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "ipvrm/error.hpp"

namespace ipvrm::env {

namespace {

constexpr double kNormTolerance = 1e-6;

void check_distribution(std::span<const double> probs, int vocab, const char* where) {
  if (static_cast<int>(probs.size()) != vocab) {
    throw ContractError(std::string(where) + ": policy returned a distribution of the wrong size");
  }
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ContractError(std::string(where) + ": negative or NaN probability");
    total += p;
  }
  if (std::abs(total - 1.0) > kNormTolerance) {
    std::ostringstream os;
    os << where << ": policy distribution sums to " << total;
    throw ContractError(os.str());
  }
}

bool terminal_success(const Prompt& p, int statistic) { return statistic == p.target; }

std::uint64_t checked_power(int base, int exp) {
  std::uint64_t v = 1;
  for (int i = 0; i < exp; ++i) {
    v *= static_cast<std::uint64_t>(base);
    if (v > kEnumerationBudget) return kEnumerationBudget + 1;
  }
  return v;
}

}  // namespace

std::string to_string(EnvKind kind) {
  return kind == EnvKind::kModSum ? "modsum" : "bitbudget";
}

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "modsum") return EnvKind::kModSum;
  if (name == "bitbudget") return EnvKind::kBitBudget;
  throw ContractError("unknown environment '" + name + "' (expected modsum or bitbudget)");
}

void validate(const Prompt& p) {
  if (p.horizon < 1) throw ContractError("prompt horizon must be >= 1");
  if (p.kind == EnvKind::kModSum) {
    if (p.modulus < 2) throw ContractError("ModSum modulus must be >= 2");
    if (p.digits < 1) throw ContractError("ModSum needs at least one digit token");
    if (p.target < 0 || p.target >= p.modulus) throw ContractError("ModSum target outside [0, K)");
  } else {
    if (p.target < 0 || p.target > p.horizon) throw ContractError("BitBudget target outside [0, L]");
  }
}

int vocab_size(const Prompt& p) { return p.kind == EnvKind::kModSum ? p.digits : 2; }

int statistic_range(const Prompt& p) {
  return p.kind == EnvKind::kModSum ? p.modulus : p.horizon + 1;
}

int next_statistic(const Prompt& p, int statistic, int token) {
  if (p.kind == EnvKind::kModSum) return (statistic + token) % p.modulus;
  return token == kInc ? statistic + 1 : statistic;
}

EnvState reset(const Prompt& prompt) {
  validate(prompt);
  EnvState s;
  s.prompt = prompt;
  return s;
}

EnvState step(const EnvState& state, int token) {
  if (state.t >= state.prompt.horizon) throw ContractError("step past the horizon");
  if (token < 0 || token >= vocab_size(state.prompt)) throw ContractError("token outside vocabulary");
  EnvState next = state;
  next.t += 1;
  next.statistic = next_statistic(state.prompt, state.statistic, token);
  next.tokens.push_back(token);
  return next;
}

EnvState state_after(const Prompt& prompt, std::span<const int> prefix) {
  EnvState s = reset(prompt);
  for (int tok : prefix) s = step(s, tok);
  return s;
}

int verify(const Prompt& prompt, std::span<const int> tokens) {
  if (static_cast<int>(tokens.size()) != prompt.horizon) {
    throw ContractError("verify: token count differs from the horizon");
  }
  return terminal_success(prompt, state_after(prompt, tokens).statistic) ? 1 : 0;
}

// --- oracles -----------------------------------------------------------------------

double exact_success_prob(const MarkovPolicy& policy, const EnvState& state) {
  const Prompt& p = state.prompt;
  const int range = statistic_range(p);
  const int vocab = vocab_size(p);
  const int horizon = p.horizon;
  // Forward reachability so the policy is only queried where it must be defined.
  std::vector<std::vector<char>> reach(horizon + 1, std::vector<char>(range, 0));
  reach[state.t][state.statistic] = 1;
  for (int t = state.t; t < horizon; ++t) {
    for (int s = 0; s < range; ++s) {
      if (!reach[t][s]) continue;
      for (int a = 0; a < vocab; ++a) reach[t + 1][next_statistic(p, s, a)] = 1;
    }
  }
  std::vector<double> value(range, 0.0);
  for (int s = 0; s < range; ++s) value[s] = terminal_success(p, s) ? 1.0 : 0.0;
  for (int t = horizon - 1; t >= state.t; --t) {
    std::vector<double> prev(range, 0.0);
    for (int s = 0; s < range; ++s) {
      if (!reach[t][s]) continue;
      const std::vector<double> probs = policy(p, t, s);
      check_distribution(probs, vocab, "exact_success_prob");
      double acc = 0.0;
      for (int a = 0; a < vocab; ++a) acc += probs[a] * value[next_statistic(p, s, a)];
      prev[s] = acc;
    }
    value = std::move(prev);
  }
  return value[state.statistic];
}

namespace {

double success_recursive(const PrefixPolicy& policy, const EnvState& state, int vocab) {
  if (state.t == state.prompt.horizon) {
    return terminal_success(state.prompt, state.statistic) ? 1.0 : 0.0;
  }
  const std::vector<double> probs = policy(state);
  check_distribution(probs, vocab, "exact_success_prob");
  double acc = 0.0;
  for (int a = 0; a < vocab; ++a) {
    if (probs[a] == 0.0) continue;
    acc += probs[a] * success_recursive(policy, step(state, a), vocab);
  }
  return acc;
}

}  // namespace

double exact_success_prob(const PrefixPolicy& policy, const EnvState& state) {
  const int vocab = vocab_size(state.prompt);
  if (checked_power(vocab, state.prompt.horizon - state.t) > kEnumerationBudget) {
    throw BudgetError("exact_success_prob: continuation tree exceeds the enumeration budget");
  }
  return success_recursive(policy, state, vocab);
}

SuccessTable::SuccessTable(const BatchPolicy& policy, const EnvState& root)
    : vocab_(vocab_size(root.prompt)) {
  const Prompt& p = root.prompt;
  const int depth = p.horizon - root.t;
  std::uint64_t total = 0;
  for (int d = 0; d <= depth; ++d) total += checked_power(vocab_, d);
  if (total > kEnumerationBudget) {
    throw BudgetError("SuccessTable: prefix tree exceeds the enumeration budget");
  }
  std::vector<ad::Matrix> probs;
  std::vector<EnvState> frontier{root};
  std::vector<int> last_stats;
  for (int d = 0; d < depth; ++d) {
    ad::Matrix pr = policy(frontier);
    if (pr.rows() != static_cast<int>(frontier.size()) || pr.cols() != vocab_) {
      throw ContractError("SuccessTable: batch policy returned the wrong shape");
    }
    for (int r = 0; r < pr.rows(); ++r) check_distribution(pr.row_span(r), vocab_, "SuccessTable");
    probs.push_back(std::move(pr));
    if (d + 1 < depth) {
      std::vector<EnvState> next;
      next.reserve(frontier.size() * vocab_);
      for (const EnvState& s : frontier) {
        for (int a = 0; a < vocab_; ++a) next.push_back(step(s, a));
      }
      frontier = std::move(next);
    } else {
      last_stats.reserve(frontier.size());
      for (const EnvState& s : frontier) last_stats.push_back(s.statistic);
    }
  }
  levels_.resize(depth + 1);
  if (depth == 0) {
    levels_[0] = {terminal_success(p, root.statistic) ? 1.0 : 0.0};
    return;
  }
  auto& leaves = levels_[depth];
  leaves.resize(last_stats.size() * vocab_);
  for (std::size_t i = 0; i < last_stats.size(); ++i) {
    for (int a = 0; a < vocab_; ++a) {
      leaves[i * vocab_ + a] = terminal_success(p, next_statistic(p, last_stats[i], a)) ? 1.0 : 0.0;
    }
  }
  for (int d = depth - 1; d >= 0; --d) {
    const ad::Matrix& pr = probs[d];
    auto& level = levels_[d];
    const auto& child = levels_[d + 1];
    level.assign(pr.rows(), 0.0);
    for (int i = 0; i < pr.rows(); ++i) {
      double acc = 0.0;
      for (int a = 0; a < vocab_; ++a) {
        acc += pr(i, a) * child[static_cast<std::size_t>(i) * vocab_ + a];
      }
      level[i] = acc;
    }
  }
}

double SuccessTable::prob(std::span<const int> suffix) const {
  if (static_cast<int>(suffix.size()) > depth()) throw ContractError("SuccessTable: suffix too long");
  std::size_t index = 0;
  for (int tok : suffix) {
    if (tok < 0 || tok >= vocab_) throw ContractError("SuccessTable: token outside vocabulary");
    index = index * vocab_ + tok;
  }
  return levels_[suffix.size()][index];
}

int optimal_value(const Prompt& p, int t, int statistic) {
  if (p.kind == EnvKind::kBitBudget) {
    const int remaining = p.horizon - t;
    return (statistic <= p.target && p.target <= statistic + remaining) ? 1 : 0;
  }
  // ModSum: residues reachable with the remaining tokens.
  const int range = statistic_range(p);
  const int vocab = vocab_size(p);
  std::vector<char> cur(range, 0);
  cur[statistic] = 1;
  for (int k = t; k < p.horizon; ++k) {
    std::vector<char> nxt(range, 0);
    for (int s = 0; s < range; ++s) {
      if (!cur[s]) continue;
      for (int a = 0; a < vocab; ++a) nxt[next_statistic(p, s, a)] = 1;
    }
    cur = std::move(nxt);
  }
  return cur[p.target] ? 1 : 0;
}

int optimal_value(const EnvState& s) { return optimal_value(s.prompt, s.t, s.statistic); }

double exact_soft_value(const RewardFn& reward, const PrefixPolicy& ref, const EnvState& state,
                        double beta) {
  if (!(beta > 0.0)) throw ContractError("exact_soft_value: beta must be positive");
  const int vocab = vocab_size(state.prompt);
  if (checked_power(vocab, state.prompt.horizon - state.t) > kEnumerationBudget) {
    throw BudgetError("exact_soft_value: completion count exceeds the enumeration budget");
  }
  std::vector<double> terms;
  // Depth-first enumeration carrying log-probability and the reference log-probs.
  struct Frame {
    EnvState state;
    double logp;
    std::vector<double> logprobs;
  };
  std::vector<Frame> stack;
  stack.push_back({state, 0.0, {}});
  while (!stack.empty()) {
    Frame f = std::move(stack.back());
    stack.pop_back();
    if (f.state.t == f.state.prompt.horizon) {
      Trajectory tr;
      tr.prompt = f.state.prompt;
      tr.tokens = f.state.tokens;
      tr.behavior_logprobs = f.logprobs;
      tr.outcome = terminal_success(tr.prompt, f.state.statistic) ? 1 : 0;
      terms.push_back(f.logp + reward(tr) / beta);
      continue;
    }
    const std::vector<double> probs = ref(f.state);
    check_distribution(probs, vocab, "exact_soft_value");
    for (int a = vocab - 1; a >= 0; --a) {
      if (probs[a] == 0.0) continue;
      Frame child{step(f.state, a), f.logp + std::log(probs[a]), f.logprobs};
      child.logprobs.push_back(std::log(probs[a]));
      stack.push_back(std::move(child));
    }
  }
  return beta * ad::log_sum_exp(terms);
}

Trajectory sample_teacher_trajectory(const Prompt& prompt, Rng& rng) {
  EnvState s = reset(prompt);
  const int vocab = vocab_size(prompt);
  Trajectory tr;
  tr.prompt = prompt;
  while (s.t < prompt.horizon) {
    std::vector<int> good;
    for (int a = 0; a < vocab; ++a) {
      if (optimal_value(prompt, s.t + 1, next_statistic(prompt, s.statistic, a))) good.push_back(a);
    }
    if (good.empty()) {
      for (int a = 0; a < vocab; ++a) good.push_back(a);
    }
    const int tok = good[rng.uniform_int(0, static_cast<int>(good.size()) - 1)];
    tr.behavior_logprobs.push_back(-std::log(static_cast<double>(good.size())));
    s = step(s, tok);
  }
  tr.tokens = s.tokens;
  tr.outcome = terminal_success(prompt, s.statistic) ? 1 : 0;
  return tr;
}

// --- localization ------------------------------------------------------------------

std::optional<int> first_error_position(const Prompt& prompt, std::span<const int> tokens) {
  EnvState s = reset(prompt);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int before = optimal_value(s);
    s = step(s, tokens[i]);
    if (before == 1 && optimal_value(s) == 0) return static_cast<int>(i) + 1;
  }
  return std::nullopt;
}

int step_of_position(int position, int step_size) {
  if (position < 1 || step_size < 1) throw ContractError("step_of_position: arguments must be >= 1");
  return (position + step_size - 1) / step_size;
}

namespace {

// Samples from the base policy restricted to value-preserving tokens; falls
// back to the unrestricted distribution once the optimal value is 0.
int sample_preserving(const PrefixPolicy& base, const EnvState& s, Rng& rng, double* logp) {
  const std::vector<double> probs = base(s);
  const int vocab = vocab_size(s.prompt);
  check_distribution(probs, vocab, "make_localization_case");
  std::vector<double> masked(vocab, 0.0);
  std::vector<int> keep;
  for (int a = 0; a < vocab; ++a) {
    if (optimal_value(s.prompt, s.t + 1, next_statistic(s.prompt, s.statistic, a))) {
      masked[a] = probs[a];
      keep.push_back(a);
    }
  }
  int tok = 0;
  if (keep.empty()) {
    tok = rng.categorical(probs);
  } else {
    double mass = 0.0;
    for (int a : keep) mass += masked[a];
    if (mass <= 0.0) {
      for (int a : keep) masked[a] = 1.0;
    }
    tok = rng.categorical(masked);
  }
  *logp = std::log(std::max(probs[tok], std::numeric_limits<double>::min()));
  return tok;
}

}  // namespace

LocalizationCase make_localization_case(const LocalizationConfig& config,
                                        const PrefixPolicy& base_policy, Rng& rng) {
  if (config.step_size < 1) throw ContractError("localization step size must be >= 1");
  const bool with_error = rng.bernoulli(config.p_err);
  for (int attempt = 0; attempt < config.max_retries; ++attempt) {
    Prompt prompt;
    prompt.kind = EnvKind::kBitBudget;
    prompt.horizon = config.horizon;
    prompt.target = rng.uniform_int(config.target_min, config.target_max);
    EnvState s = reset(prompt);
    if (!optimal_value(s)) continue;

    Trajectory clean;
    clean.prompt = prompt;
    std::vector<int> feasible;
    while (s.t < prompt.horizon) {
      for (int a = 0; a < 2; ++a) {
        if (!optimal_value(prompt, s.t + 1, next_statistic(prompt, s.statistic, a))) {
          feasible.push_back(s.t + 1);
          break;
        }
      }
      double lp = 0.0;
      const int tok = sample_preserving(base_policy, s, rng, &lp);
      clean.behavior_logprobs.push_back(lp);
      s = step(s, tok);
    }
    clean.tokens = s.tokens;
    clean.outcome = verify(prompt, clean.tokens);

    LocalizationCase out;
    out.step_size = config.step_size;
    if (!with_error) {
      out.trajectory = std::move(clean);
      return out;
    }
    if (feasible.empty()) continue;

    const int pos = feasible[rng.uniform_int(0, static_cast<int>(feasible.size()) - 1)];
    EnvState e = state_after(prompt, std::span<const int>(clean.tokens).first(pos - 1));
    std::vector<int> flips;
    for (int a = 0; a < 2; ++a) {
      if (!optimal_value(prompt, e.t + 1, next_statistic(prompt, e.statistic, a))) flips.push_back(a);
    }
    const int flip = flips[rng.uniform_int(0, static_cast<int>(flips.size()) - 1)];
    Trajectory tr;
    tr.prompt = prompt;
    tr.behavior_logprobs.assign(clean.behavior_logprobs.begin(),
                                clean.behavior_logprobs.begin() + (pos - 1));
    {
      const std::vector<double> probs = base_policy(e);
      tr.behavior_logprobs.push_back(
          std::log(std::max(probs[flip], std::numeric_limits<double>::min())));
    }
    e = step(e, flip);
    while (e.t < prompt.horizon) {
      double lp = 0.0;
      const int tok = sample_preserving(base_policy, e, rng, &lp);
      tr.behavior_logprobs.push_back(lp);
      e = step(e, tok);
    }
    tr.tokens = e.tokens;
    tr.outcome = verify(prompt, tr.tokens);
    out.trajectory = std::move(tr);
    out.first_error_step = step_of_position(pos, config.step_size);
    return out;
  }
  throw GenerationError("make_localization_case: no feasible error position after retries");
}

std::string to_json_line(const LocalizationCase& c) {
  const Prompt& p = c.trajectory.prompt;
  nlohmann::json j;
  j["prompt"] = {{"env", to_string(p.kind)},
                 {"target", p.target},
                 {"horizon", p.horizon},
                 {"modulus", p.modulus},
                 {"digits", p.digits}};
  j["tokens"] = c.trajectory.tokens;
  j["step_size"] = c.step_size;
  j["first_error_step"] =
      c.first_error_step ? nlohmann::json(*c.first_error_step) : nlohmann::json(nullptr);
  return j.dump();
}

LocalizationCase localization_case_from_json_line(const std::string& line) {
  LocalizationCase c;
  try {
    const auto j = nlohmann::json::parse(line);
    const auto& jp = j.at("prompt");
    Prompt p;
    p.kind = env_kind_from_string(jp.at("env").get<std::string>());
    p.target = jp.at("target").get<int>();
    p.horizon = jp.at("horizon").get<int>();
    p.modulus = jp.value("modulus", 7);
    p.digits = jp.value("digits", 8);
    validate(p);
    c.trajectory.prompt = p;
    c.trajectory.tokens = j.at("tokens").get<std::vector<int>>();
    c.trajectory.outcome = verify(p, c.trajectory.tokens);
    c.step_size = j.at("step_size").get<int>();
    if (!j.at("first_error_step").is_null()) c.first_error_step = j.at("first_error_step").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("malformed localization case: ") + e.what());
  }
  return c;
}

}  // namespace ipvrm::env
