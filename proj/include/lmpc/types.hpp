#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace lmpc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using StateVec = Eigen::VectorXd;
using InputVec = Eigen::VectorXd;

// Base class for every error this library throws on purpose. Callers that
// want blanket handling catch this; tests catch the concrete types.
class LmpcError : public std::runtime_error {
 public:
  explicit LmpcError(const std::string& msg) : std::runtime_error(msg) {}
};

#define LMPC_DEFINE_ERROR(NAME)                                     \
  class NAME : public LmpcError {                                   \
   public:                                                          \
    explicit NAME(const std::string& msg) : LmpcError(#NAME ": " + msg) {} \
  }

LMPC_DEFINE_ERROR(DimensionMismatch);
LMPC_DEFINE_ERROR(SingularGeometry);
LMPC_DEFINE_ERROR(InitializationFailed);
LMPC_DEFINE_ERROR(EmptyStore);
LMPC_DEFINE_ERROR(NotInSafeSet);
LMPC_DEFINE_ERROR(OutsideHull);
LMPC_DEFINE_ERROR(ReplayMismatch);
LMPC_DEFINE_ERROR(GoalNotReached);
LMPC_DEFINE_ERROR(CallbackFailure);
LMPC_DEFINE_ERROR(NoFeasibleCandidate);
LMPC_DEFINE_ERROR(StepCapExceeded);
LMPC_DEFINE_ERROR(CostDecreaseViolation);
LMPC_DEFINE_ERROR(DegenerateDenominator);
LMPC_DEFINE_ERROR(AuditFailure);
LMPC_DEFINE_ERROR(ConfigError);

#undef LMPC_DEFINE_ERROR

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw LmpcError(msg);
}

inline double inf_norm(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace lmpc
