#include "ipvrm/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ipvrm/error.hpp"

namespace ipvrm::policy {

namespace {

constexpr char kMagic[4] = {'I', 'P', 'V', 'R'};
constexpr std::uint32_t kVersion = 1;

void encode_features(const Architecture& arch, const env::EnvState& s, double* f) {
  const env::Prompt& p = s.prompt;
  std::fill(f, f + arch.num_features(), 0.0);
  f[0] = p.target / 10.0;
  f[1] = p.horizon / 10.0;
  f[2] = static_cast<double>(static_cast<int>(p.kind));
  f[3] = static_cast<double>(s.t) / p.horizon;
  f[4 + p.target] = 1.0;
  f[4 + arch.stat_range + s.statistic] = 1.0;
}

// Embedding row for context slot j (0 = oldest) at state s.
int context_row(const Architecture& arch, const env::EnvState& s, int j) {
  const int pos = s.t - arch.context + j;
  return pos < 0 ? 0 : s.tokens[pos] + 1;
}

void check_states(const Architecture& arch, std::span<const env::EnvState> states) {
  for (const auto& s : states) {
    check_compatible(arch, s.prompt);
    if (static_cast<int>(s.tokens.size()) != s.t) {
      throw ContractError("policy: state prefix length differs from its position");
    }
  }
}

void check_layout(const Architecture& arch, const ad::ParamVector& params) {
  if (!params.same_layout(zero_params(arch))) {
    throw ContractError("policy: parameter layout does not match the architecture");
  }
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IoError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace

std::string to_string(Role role) {
  switch (role) {
    case Role::kSft: return "sft";
    case Role::kBehavior: return "behavior";
    case Role::kReference: return "reference";
    case Role::kRewardModel: return "reward_model";
    case Role::kStudent: return "student";
  }
  return "unknown";
}

Role role_from_string(const std::string& name) {
  for (Role r : {Role::kSft, Role::kBehavior, Role::kReference, Role::kRewardModel, Role::kStudent}) {
    if (to_string(r) == name) return r;
  }
  throw ContractError("unknown policy role '" + name + "'");
}

Architecture architecture_for(const env::Prompt& prompt, int context, int embed, int hidden) {
  Architecture a;
  a.context = context;
  a.embed = embed;
  a.hidden = hidden;
  a.vocab = env::vocab_size(prompt);
  a.stat_range = std::max(env::statistic_range(prompt), prompt.target + 1);
  return a;
}

void check_compatible(const Architecture& arch, const env::Prompt& prompt) {
  if (env::vocab_size(prompt) != arch.vocab) throw ContractError("policy: vocabulary mismatch");
  if (env::statistic_range(prompt) > arch.stat_range || prompt.target >= arch.stat_range) {
    throw ContractError("policy: prompt statistic range exceeds the architecture");
  }
}

ad::ParamVector zero_params(const Architecture& arch) {
  if (arch.context < 1 || arch.embed < 1 || arch.hidden < 1 || arch.vocab < 1 || arch.stat_range < 1) {
    throw ContractError("policy: architecture sizes must be positive");
  }
  ad::ParamVector p;
  p.add_segment("embedding", arch.vocab + 1, arch.embed);
  p.add_segment("hidden.w", arch.input_dim(), arch.hidden);
  p.add_segment("hidden.b", 1, arch.hidden);
  p.add_segment("output.w", arch.hidden, arch.vocab);
  p.add_segment("output.b", 1, arch.vocab);
  return p;
}

ad::ParamVector init_params(const Architecture& arch, Rng& rng, double stddev) {
  ad::ParamVector p = zero_params(arch);
  for (const char* name : {"embedding", "hidden.w"}) {
    for (double& v : p.segment_values(name)) v = stddev * rng.normal();
  }
  return p;
}

PolicySnapshot snapshot(const Architecture& arch, const ad::ParamVector& params, Role role) {
  check_layout(arch, params);
  return PolicySnapshot{arch, role, params};
}

ad::ParamVector restore(const PolicySnapshot& snap) { return snap.params; }

void check_same_architecture(const PolicySnapshot& a, const PolicySnapshot& b) {
  if (!(a.arch == b.arch)) throw ContractError("policy snapshots have different architectures");
}

// --- inference -----------------------------------------------------------------

ad::Matrix logits(const Architecture& arch, const ad::ParamVector& params,
                  std::span<const env::EnvState> states) {
  check_layout(arch, params);
  check_states(arch, states);
  const int n = static_cast<int>(states.size());
  const int nf = arch.num_features();
  const int h = arch.hidden;
  const int v = arch.vocab;
  const auto emb = params.segment_values("embedding");
  const auto w1 = params.segment_values("hidden.w");
  const auto b1 = params.segment_values("hidden.b");
  const auto w2 = params.segment_values("output.w");
  const auto b2 = params.segment_values("output.b");
  ad::Matrix out(n, v);
  std::vector<double> x(arch.input_dim());
  std::vector<double> hid(h);
  for (int r = 0; r < n; ++r) {
    const env::EnvState& s = states[r];
    encode_features(arch, s, x.data());
    for (int j = 0; j < arch.context; ++j) {
      const int row = context_row(arch, s, j);
      std::copy_n(emb.data() + static_cast<std::size_t>(row) * arch.embed, arch.embed,
                  x.data() + nf + j * arch.embed);
    }
    std::copy(b1.begin(), b1.end(), hid.begin());
    for (int i = 0; i < arch.input_dim(); ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      const double* wrow = w1.data() + static_cast<std::size_t>(i) * h;
      for (int k = 0; k < h; ++k) hid[k] += xi * wrow[k];
    }
    double* orow = &out(r, 0);
    std::copy(b2.begin(), b2.end(), orow);
    for (int k = 0; k < h; ++k) {
      const double hk = std::tanh(hid[k]);
      const double* wrow = w2.data() + static_cast<std::size_t>(k) * v;
      for (int a = 0; a < v; ++a) orow[a] += hk * wrow[a];
    }
  }
  return out;
}

std::vector<double> logits(const Architecture& arch, const ad::ParamVector& params,
                           const env::EnvState& state) {
  const ad::Matrix m = logits(arch, params, std::span<const env::EnvState>(&state, 1));
  return {m.data().begin(), m.data().end()};
}

ad::Matrix log_probs(const Architecture& arch, const ad::ParamVector& params,
                     std::span<const env::EnvState> states) {
  ad::Matrix m = logits(arch, params, states);
  for (int r = 0; r < m.rows(); ++r) {
    const std::vector<double> lp = ad::log_softmax(m.row_span(r));
    std::copy(lp.begin(), lp.end(), m.row_span(r).begin());
  }
  return m;
}

ad::Matrix probs(const Architecture& arch, const ad::ParamVector& params,
                 std::span<const env::EnvState> states, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("policy: temperature must be positive");
  ad::Matrix m = logits(arch, params, states);
  for (int r = 0; r < m.rows(); ++r) {
    auto row = m.row_span(r);
    for (double& x : row) x /= temperature;
    const std::vector<double> lp = ad::log_softmax(row);
    for (std::size_t a = 0; a < row.size(); ++a) row[a] = std::exp(lp[a]);
  }
  return m;
}

ad::Var logits_graph(ad::Tape& tape, const Architecture& arch,
                     std::span<const env::EnvState> states) {
  check_layout(arch, tape.params());
  check_states(arch, states);
  const int n = static_cast<int>(states.size());
  ad::Matrix feats(n, arch.num_features());
  std::vector<std::vector<int>> rows(arch.context, std::vector<int>(n));
  for (int r = 0; r < n; ++r) {
    encode_features(arch, states[r], &feats(r, 0));
    for (int j = 0; j < arch.context; ++j) rows[j][r] = context_row(arch, states[r], j);
  }
  const ad::Var emb = tape.param("embedding");
  std::vector<ad::Var> parts{tape.constant(std::move(feats))};
  for (int j = 0; j < arch.context; ++j) parts.push_back(ad::gather_rows(emb, std::move(rows[j])));
  const ad::Var x = ad::concat_cols(parts);
  const ad::Var hid = ad::tanh(ad::matmul(x, tape.param("hidden.w")) + tape.param("hidden.b"));
  return ad::matmul(hid, tape.param("output.w")) + tape.param("output.b");
}

std::vector<env::EnvState> trajectory_states(const env::Trajectory& tr) {
  std::vector<env::EnvState> out;
  out.reserve(tr.tokens.size());
  env::EnvState s = env::reset(tr.prompt);
  for (int tok : tr.tokens) {
    out.push_back(s);
    s = env::step(s, tok);
  }
  return out;
}

std::vector<env::EnvState> batch_states(std::span<const env::Trajectory> trs) {
  std::vector<env::EnvState> out;
  for (const auto& tr : trs) {
    auto st = trajectory_states(tr);
    std::move(st.begin(), st.end(), std::back_inserter(out));
  }
  return out;
}

namespace {

std::vector<int> batch_tokens(std::span<const env::Trajectory> trs) {
  std::vector<int> out;
  for (const auto& tr : trs) out.insert(out.end(), tr.tokens.begin(), tr.tokens.end());
  return out;
}

}  // namespace

ad::Var sequence_log_prob(ad::Tape& tape, const Architecture& arch,
                          std::span<const env::Trajectory> trs) {
  const auto states = batch_states(trs);
  if (states.empty()) throw ContractError("sequence_log_prob: no tokens");
  return ad::pick(ad::log_softmax_rows(logits_graph(tape, arch, states)), batch_tokens(trs));
}

std::vector<double> token_log_probs(const Architecture& arch, const ad::ParamVector& params,
                                    std::span<const env::Trajectory> trs) {
  const auto states = batch_states(trs);
  const auto toks = batch_tokens(trs);
  const ad::Matrix lp = log_probs(arch, params, states);
  std::vector<double> out(toks.size());
  for (std::size_t i = 0; i < toks.size(); ++i) out[i] = lp(static_cast<int>(i), toks[i]);
  return out;
}

std::vector<double> sequence_log_prob(const Architecture& arch, const ad::ParamVector& params,
                                      const env::Trajectory& tr) {
  return token_log_probs(arch, params, std::span<const env::Trajectory>(&tr, 1));
}

// --- sampling ------------------------------------------------------------------

namespace {

template <typename RngFor>
std::vector<env::Trajectory> sample_lockstep(const Architecture& arch, const ad::ParamVector& params,
                                             std::span<const env::Prompt> prompts,
                                             const SampleOptions& opts, RngFor rng_for) {
  if (!opts.greedy && !(opts.temperature > 0.0)) {
    throw ContractError("sample_trajectory: temperature must be positive");
  }
  std::vector<env::EnvState> states;
  std::vector<env::Trajectory> out(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    states.push_back(env::reset(prompts[i]));
    out[i].prompt = prompts[i];
  }
  // Prompts may have different horizons; finished ones drop out of the batch.
  std::vector<std::size_t> live(prompts.size());
  for (std::size_t i = 0; i < live.size(); ++i) live[i] = i;
  while (true) {
    std::erase_if(live, [&](std::size_t i) { return states[i].t >= states[i].prompt.horizon; });
    if (live.empty()) break;
    std::vector<env::EnvState> cur;
    cur.reserve(live.size());
    for (std::size_t i : live) cur.push_back(states[i]);
    ad::Matrix lg = logits(arch, params, cur);
    for (std::size_t r = 0; r < live.size(); ++r) {
      const std::size_t i = live[r];
      auto row = lg.row_span(static_cast<int>(r));
      int tok = 0;
      double lp = 0.0;
      if (opts.greedy) {
        tok = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      } else {
        for (double& x : row) x /= opts.temperature;
        const std::vector<double> logp = ad::log_softmax(row);
        std::vector<double> p(logp.size());
        for (std::size_t a = 0; a < p.size(); ++a) p[a] = std::exp(logp[a]);
        tok = rng_for(i).categorical(p);
        lp = logp[tok];
      }
      out[i].behavior_logprobs.push_back(lp);
      states[i] = env::step(states[i], tok);
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].tokens = states[i].tokens;
    out[i].outcome = env::verify(out[i].prompt, out[i].tokens);
  }
  return out;
}

}  // namespace

std::vector<env::Trajectory> sample_trajectories(const Architecture& arch,
                                                 const ad::ParamVector& params,
                                                 std::span<const env::Prompt> prompts,
                                                 const SampleOptions& opts, Rng& rng) {
  return sample_lockstep(arch, params, prompts, opts, [&rng](std::size_t) -> Rng& { return rng; });
}

std::vector<env::Trajectory> sample_trajectories(const Architecture& arch,
                                                 const ad::ParamVector& params,
                                                 std::span<const env::Prompt> prompts,
                                                 const SampleOptions& opts, std::span<Rng> rngs) {
  if (rngs.size() != prompts.size()) throw ContractError("sample_trajectories: one generator per prompt");
  return sample_lockstep(arch, params, prompts, opts, [rngs](std::size_t i) -> Rng& { return rngs[i]; });
}

env::Trajectory sample_trajectory(const Architecture& arch, const ad::ParamVector& params,
                                  const env::Prompt& prompt, const SampleOptions& opts, Rng& rng) {
  return sample_trajectories(arch, params, std::span<const env::Prompt>(&prompt, 1), opts, rng)
      .front();
}

env::BatchPolicy as_batch_policy(const PolicySnapshot& p) {
  return [&p](std::span<const env::EnvState> states) { return probs(p.arch, p.params, states); };
}

env::PrefixPolicy as_prefix_policy(const PolicySnapshot& p) {
  return [&p](const env::EnvState& s) {
    const ad::Matrix m = probs(p.arch, p.params, std::span<const env::EnvState>(&s, 1));
    return std::vector<double>(m.data().begin(), m.data().end());
  };
}

// --- supervised fine-tuning ----------------------------------------------------

ad::Var nll_graph(ad::Tape& tape, const Architecture& arch, std::span<const env::Trajectory> batch) {
  return ad::neg(ad::mean(sequence_log_prob(tape, arch, batch)));
}

double nll(const Architecture& arch, const ad::ParamVector& params,
           std::span<const env::Trajectory> batch) {
  if (batch.empty()) throw ContractError("nll: empty batch");
  const auto lp = token_log_probs(arch, params, batch);
  double acc = 0.0;
  for (double x : lp) acc += x;
  return -acc / static_cast<double>(lp.size());
}

ad::ParamVector sft_update(const Architecture& arch, const ad::ParamVector& params,
                           std::span<const env::Trajectory> batch, double lr) {
  if (batch.empty()) throw ContractError("sft_update: empty batch");
  for (const auto& tr : batch) {
    if (tr.outcome != 1) throw ContractError("sft_update: batch contains an incorrect trajectory");
  }
  const auto res = ad::eval_with_grad(
      [&](ad::Tape& tape) { return nll_graph(tape, arch, batch); }, params);
  ad::ParamVector out = params;
  out.axpy(-lr, res.grad);
  return out;
}

// --- checkpoints ---------------------------------------------------------------

std::string serialize(const PolicySnapshot& snap) {
  check_layout(snap.arch, snap.params);
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(snap.role));
  put_u32(out, snap.arch.context);
  put_u32(out, snap.arch.embed);
  put_u32(out, snap.arch.hidden);
  put_u32(out, snap.arch.vocab);
  put_u32(out, snap.arch.stat_range);
  for (double v : snap.params.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

PolicySnapshot deserialize(const std::string& bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw IoError("not a policy checkpoint (bad magic)");
  }
  std::size_t pos = 4;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  PolicySnapshot snap;
  const std::uint32_t role = get_u32(bytes, pos);
  if (role > static_cast<std::uint32_t>(Role::kStudent)) throw IoError("checkpoint has an unknown role");
  snap.role = static_cast<Role>(role);
  snap.arch.context = static_cast<int>(get_u32(bytes, pos));
  snap.arch.embed = static_cast<int>(get_u32(bytes, pos));
  snap.arch.hidden = static_cast<int>(get_u32(bytes, pos));
  snap.arch.vocab = static_cast<int>(get_u32(bytes, pos));
  snap.arch.stat_range = static_cast<int>(get_u32(bytes, pos));
  try {
    snap.params = zero_params(snap.arch);
  } catch (const ContractError& e) {
    throw IoError(std::string("checkpoint architecture is invalid: ") + e.what());
  }
  if (bytes.size() != pos + 4 * snap.params.size()) throw IoError("checkpoint size does not match its header");
  for (double& v : snap.params.values()) v = std::bit_cast<float>(get_u32(bytes, pos));
  return snap;
}

void save_checkpoint(const PolicySnapshot& snap, const std::string& path) {
  const std::string bytes = serialize(snap);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path + "'");
}

PolicySnapshot load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

void round_to_float(ad::ParamVector& params) {
  for (double& v : params.values()) v = static_cast<float>(v);
}

}  // namespace ipvrm::policy
