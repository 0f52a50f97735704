#ifndef IPVRM_ERROR_HPP_
#define IPVRM_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace ipvrm {

// Mirrors ipvrm_status in the C API; values must stay in sync.
enum class ErrorCode : int {
  kContract = 1,
  kNumerical = 2,
  kDomain = 3,
  kBudget = 4,
  kGeneration = 5,
  kCollection = 6,
  kIo = 7,
  kStageDependency = 8,
  kConfig = 9,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define IPVRM_DEFINE_ERROR(Name, Code)                                  \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(ErrorCode::Code, what) {} \
  };

// A caller violated a documented precondition.
IPVRM_DEFINE_ERROR(ContractError, kContract)
// A forward value became NaN or infinite.
IPVRM_DEFINE_ERROR(NumericalError, kNumerical)
// Argument outside a function's mathematical domain.
IPVRM_DEFINE_ERROR(DomainError, kDomain)
// Exhaustive enumeration would exceed its state budget.
IPVRM_DEFINE_ERROR(BudgetError, kBudget)
IPVRM_DEFINE_ERROR(GenerationError, kGeneration)
// Not enough mixed-outcome prompts could be collected.
IPVRM_DEFINE_ERROR(CollectionError, kCollection)
IPVRM_DEFINE_ERROR(IoError, kIo)
// A pipeline stage ran before the stage that produces its inputs.
IPVRM_DEFINE_ERROR(StageDependencyError, kStageDependency)
IPVRM_DEFINE_ERROR(ConfigError, kConfig)

#undef IPVRM_DEFINE_ERROR

}  // namespace ipvrm

#endif  // IPVRM_ERROR_HPP_
