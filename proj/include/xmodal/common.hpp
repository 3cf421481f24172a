#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>

namespace xmodal {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// A forward pass produced a NaN or Inf. `where` names the sub-network.
class NumericalFailure : public std::runtime_error {
 public:
  NumericalFailure(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

// A caller-side contract was broken at runtime (e.g. a loss that should be
// deterministic was not).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A file on disk could not be parsed: truncated, bad magic, unknown version,
// or inconsistent shapes.
class CorruptFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace xmodal
