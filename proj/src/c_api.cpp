#include "ipvrm/ipvrm.h"

#include <cstring>
#include <exception>
#include <string>

#include "ipvrm/config.hpp"
#include "ipvrm/env.hpp"
#include "ipvrm/error.hpp"
#include "ipvrm/pipeline.hpp"
#include "ipvrm/policy.hpp"

struct ipvrm_config {
  ipvrm::config::ExperimentConfig cfg;
};

struct ipvrm_policy {
  ipvrm::policy::PolicySnapshot snap;
};

namespace {

thread_local std::string g_last_error;

ipvrm_status fail(ipvrm_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

// Runs fn and maps exceptions onto status codes.
template <typename Fn>
ipvrm_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return IPVRM_OK;
  } catch (const ipvrm::Error& e) {
    return fail(static_cast<ipvrm_status>(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(IPVRM_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(IPVRM_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(IPVRM_ERR_INTERNAL, "unknown exception");
  }
}

void copy_out(const std::string& text, char* buf, size_t buf_size, size_t* needed) {
  if (needed) *needed = text.size() + 1;
  if (!buf || buf_size == 0) return;
  const size_t n = std::min(buf_size - 1, text.size());
  std::memcpy(buf, text.data(), n);
  buf[n] = '\0';
}

ipvrm::env::Prompt to_prompt(const ipvrm_prompt& p) {
  if (p.env != IPVRM_ENV_MODSUM && p.env != IPVRM_ENV_BITBUDGET) {
    throw ipvrm::ContractError("unknown environment id " + std::to_string(p.env));
  }
  ipvrm::env::Prompt out;
  out.kind = static_cast<ipvrm::env::EnvKind>(p.env);
  out.target = p.target;
  out.horizon = p.horizon;
  out.modulus = p.modulus;
  out.digits = p.digits;
  ipvrm::env::validate(out);
  return out;
}

}  // namespace

extern "C" {

const char* ipvrm_version(void) { return "0.1.0"; }

const char* ipvrm_last_error(void) { return g_last_error.c_str(); }

const char* ipvrm_status_name(ipvrm_status status) {
  switch (status) {
    case IPVRM_OK: return "ok";
    case IPVRM_ERR_CONTRACT: return "contract error";
    case IPVRM_ERR_NUMERICAL: return "numerical error";
    case IPVRM_ERR_DOMAIN: return "domain error";
    case IPVRM_ERR_BUDGET: return "budget error";
    case IPVRM_ERR_GENERATION: return "generation error";
    case IPVRM_ERR_COLLECTION: return "collection error";
    case IPVRM_ERR_IO: return "io error";
    case IPVRM_ERR_STAGE_DEPENDENCY: return "stage dependency error";
    case IPVRM_ERR_CONFIG: return "config error";
    case IPVRM_ERR_INVALID_ARGUMENT: return "invalid argument";
    case IPVRM_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

ipvrm_status ipvrm_config_default(ipvrm_config** out) {
  if (!out) return fail(IPVRM_ERR_INVALID_ARGUMENT, "out is null");
  return guarded([&] { *out = new ipvrm_config{ipvrm::config::defaults()}; });
}

ipvrm_status ipvrm_config_load(const char* path, ipvrm_config** out) {
  if (!path || !out) return fail(IPVRM_ERR_INVALID_ARGUMENT, "path and out must be non-null");
  return guarded([&] { *out = new ipvrm_config{ipvrm::config::load(path)}; });
}

ipvrm_status ipvrm_config_save(const ipvrm_config* cfg, const char* path) {
  if (!cfg || !path) return fail(IPVRM_ERR_INVALID_ARGUMENT, "cfg and path must be non-null");
  return guarded([&] { ipvrm::config::save(cfg->cfg, path); });
}

ipvrm_status ipvrm_config_set(ipvrm_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return fail(IPVRM_ERR_INVALID_ARGUMENT, "cfg, key and value must be non-null");
  return guarded([&] { ipvrm::config::set(cfg->cfg, key, value); });
}

ipvrm_status ipvrm_config_get(const ipvrm_config* cfg, const char* key, char* buf, size_t buf_size,
                              size_t* needed) {
  if (!cfg || !key) return fail(IPVRM_ERR_INVALID_ARGUMENT, "cfg and key must be non-null");
  return guarded([&] { copy_out(ipvrm::config::get(cfg->cfg, key), buf, buf_size, needed); });
}

ipvrm_status ipvrm_config_to_json(const ipvrm_config* cfg, char* buf, size_t buf_size, size_t* needed) {
  if (!cfg) return fail(IPVRM_ERR_INVALID_ARGUMENT, "cfg is null");
  return guarded([&] { copy_out(ipvrm::config::to_json(cfg->cfg), buf, buf_size, needed); });
}

ipvrm_status ipvrm_config_validate(const ipvrm_config* cfg) {
  if (!cfg) return fail(IPVRM_ERR_INVALID_ARGUMENT, "cfg is null");
  return guarded([&] { ipvrm::config::validate(cfg->cfg); });
}

void ipvrm_config_free(ipvrm_config* cfg) { delete cfg; }

ipvrm_status ipvrm_run(const char* stage, const ipvrm_config* cfg) {
  if (!stage || !cfg) return fail(IPVRM_ERR_INVALID_ARGUMENT, "stage and cfg must be non-null");
  return guarded([&] { ipvrm::pipeline::run(ipvrm::pipeline::stage_from_string(stage), cfg->cfg); });
}

ipvrm_status ipvrm_policy_load(const char* path, ipvrm_policy** out) {
  if (!path || !out) return fail(IPVRM_ERR_INVALID_ARGUMENT, "path and out must be non-null");
  return guarded([&] { *out = new ipvrm_policy{ipvrm::policy::load_checkpoint(path)}; });
}

ipvrm_status ipvrm_policy_save(const ipvrm_policy* policy, const char* path) {
  if (!policy || !path) return fail(IPVRM_ERR_INVALID_ARGUMENT, "policy and path must be non-null");
  return guarded([&] { ipvrm::policy::save_checkpoint(policy->snap, path); });
}

ipvrm_status ipvrm_policy_info_get(const ipvrm_policy* policy, ipvrm_policy_info* out) {
  if (!policy || !out) return fail(IPVRM_ERR_INVALID_ARGUMENT, "policy and out must be non-null");
  const auto& a = policy->snap.arch;
  out->role = static_cast<int>(policy->snap.role);
  out->context = a.context;
  out->embed = a.embed;
  out->hidden = a.hidden;
  out->vocab = a.vocab;
  out->stat_range = a.stat_range;
  out->num_params = policy->snap.params.size();
  g_last_error.clear();
  return IPVRM_OK;
}

ipvrm_status ipvrm_policy_next_token_probs(const ipvrm_policy* policy, const ipvrm_prompt* prompt,
                                           const int* prefix, size_t prefix_len, double* out,
                                           size_t out_len) {
  if (!policy || !prompt || !out || (prefix_len > 0 && !prefix)) {
    return fail(IPVRM_ERR_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const auto p = to_prompt(*prompt);
    const auto& snap = policy->snap;
    ipvrm::policy::check_compatible(snap.arch, p);
    if (out_len < static_cast<size_t>(snap.arch.vocab)) {
      throw ipvrm::ContractError("output buffer holds fewer than vocab entries");
    }
    if (prefix_len >= static_cast<size_t>(p.horizon)) {
      throw ipvrm::ContractError("prefix must be shorter than the horizon");
    }
    const auto state = ipvrm::env::state_after(p, std::span<const int>(prefix, prefix_len));
    const auto probs = ipvrm::policy::probs(snap, std::span<const ipvrm::env::EnvState>(&state, 1));
    for (int v = 0; v < snap.arch.vocab; ++v) out[v] = probs(0, v);
  });
}

void ipvrm_policy_free(ipvrm_policy* policy) { delete policy; }

ipvrm_status ipvrm_verify(const ipvrm_prompt* prompt, const int* tokens, size_t len, int* outcome) {
  if (!prompt || !outcome || (len > 0 && !tokens)) return fail(IPVRM_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const auto p = to_prompt(*prompt);
    *outcome = ipvrm::env::verify(p, std::span<const int>(tokens, len));
  });
}

}  // extern "C"
