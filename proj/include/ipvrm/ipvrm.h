#ifndef IPVRM_IPVRM_H_
#define IPVRM_IPVRM_H_

/* C interface to libipvrm. Every fallible call returns an ipvrm_status; on
 * failure ipvrm_last_error() holds a message for the calling thread. Handles
 * are opaque and owned by the caller until passed to the matching _free. */

#include <stddef.h>

#if defined(_WIN32)
#define IPVRM_API __declspec(dllexport)
#else
#define IPVRM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ipvrm_status {
  IPVRM_OK = 0,
  IPVRM_ERR_CONTRACT = 1,
  IPVRM_ERR_NUMERICAL = 2,
  IPVRM_ERR_DOMAIN = 3,
  IPVRM_ERR_BUDGET = 4,
  IPVRM_ERR_GENERATION = 5,
  IPVRM_ERR_COLLECTION = 6,
  IPVRM_ERR_IO = 7,
  IPVRM_ERR_STAGE_DEPENDENCY = 8,
  IPVRM_ERR_CONFIG = 9,
  IPVRM_ERR_INVALID_ARGUMENT = 10,
  IPVRM_ERR_INTERNAL = 11
} ipvrm_status;

typedef enum ipvrm_env_kind { IPVRM_ENV_MODSUM = 0, IPVRM_ENV_BITBUDGET = 1 } ipvrm_env_kind;

typedef struct ipvrm_prompt {
  int env;     /* ipvrm_env_kind */
  int target;  /* residue for ModSum, INC count for BitBudget */
  int horizon;
  int modulus; /* ModSum only */
  int digits;  /* ModSum only */
} ipvrm_prompt;

typedef struct ipvrm_policy_info {
  int role; /* 0 sft, 1 behavior, 2 reference, 3 reward model, 4 student */
  int context;
  int embed;
  int hidden;
  int vocab;
  int stat_range;
  size_t num_params;
} ipvrm_policy_info;

typedef struct ipvrm_config ipvrm_config;
typedef struct ipvrm_policy ipvrm_policy;

IPVRM_API const char* ipvrm_version(void);
/* Message of the last failed call on this thread; empty after success. */
IPVRM_API const char* ipvrm_last_error(void);
IPVRM_API const char* ipvrm_status_name(ipvrm_status status);

/* --- configuration --- */

IPVRM_API ipvrm_status ipvrm_config_default(ipvrm_config** out);
IPVRM_API ipvrm_status ipvrm_config_load(const char* path, ipvrm_config** out);
IPVRM_API ipvrm_status ipvrm_config_save(const ipvrm_config* cfg, const char* path);
/* key is dotted, e.g. "rl.ppo.alpha"; value is JSON text (strings may be bare). */
IPVRM_API ipvrm_status ipvrm_config_set(ipvrm_config* cfg, const char* key, const char* value);
/* Writes the JSON text of a field into buf (NUL-terminated, truncated to
 * buf_size). *needed receives the full length including the terminator. */
IPVRM_API ipvrm_status ipvrm_config_get(const ipvrm_config* cfg, const char* key, char* buf,
                                        size_t buf_size, size_t* needed);
/* Same contract as ipvrm_config_get, for the whole configuration. */
IPVRM_API ipvrm_status ipvrm_config_to_json(const ipvrm_config* cfg, char* buf, size_t buf_size,
                                            size_t* needed);
IPVRM_API ipvrm_status ipvrm_config_validate(const ipvrm_config* cfg);
IPVRM_API void ipvrm_config_free(ipvrm_config* cfg);

/* --- pipeline --- */

/* stage: sft, rm-data, train-rm, train-rl, eval-bon, eval-steps, eval-td, report */
IPVRM_API ipvrm_status ipvrm_run(const char* stage, const ipvrm_config* cfg);

/* --- checkpoints and inference --- */

IPVRM_API ipvrm_status ipvrm_policy_load(const char* path, ipvrm_policy** out);
IPVRM_API ipvrm_status ipvrm_policy_save(const ipvrm_policy* policy, const char* path);
IPVRM_API ipvrm_status ipvrm_policy_info_get(const ipvrm_policy* policy, ipvrm_policy_info* out);
/* Next-token distribution after `prefix`; out must hold info.vocab doubles. */
IPVRM_API ipvrm_status ipvrm_policy_next_token_probs(const ipvrm_policy* policy,
                                                     const ipvrm_prompt* prompt, const int* prefix,
                                                     size_t prefix_len, double* out, size_t out_len);
IPVRM_API void ipvrm_policy_free(ipvrm_policy* policy);

/* Verifier outcome (0 or 1) of a complete token sequence. */
IPVRM_API ipvrm_status ipvrm_verify(const ipvrm_prompt* prompt, const int* tokens, size_t len,
                                    int* outcome);

#ifdef __cplusplus
}
#endif

#endif /* IPVRM_IPVRM_H_ */
