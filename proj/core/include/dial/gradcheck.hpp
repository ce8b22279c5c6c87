#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dial/optim.hpp"
#include "dial/tensor.hpp"

namespace dial {

struct GradCheckEntry {
  std::string name;       // "group/param_index" or "group (direction)"
  float max_rel_err = 0;
  float analytic = 0;     // value at the worst entry / directional derivative
  float numeric = 0;
  bool trainable = true;  // false -> reported but flagged "not updated"
  int checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  float max_rel_err = 0;
  double tol = 0;
  bool pass = true;
  std::string summary() const;
};

// How parameters are probed against central differences.
//   kPerEntry:  perturb sampled scalar entries (step h). Suited to shallow
//               graphs where float32 forward noise stays below h * |grad|.
//   kDirection: perturb a whole group along its normalized analytic gradient,
//               comparing the directional derivative. Suited to deep networks.
enum class GradCheckMode { kPerEntry, kDirection };

struct GradCheckOptions {
  double step = 1e-3;
  double tol = 1e-3;
  GradCheckMode mode = GradCheckMode::kPerEntry;
  int entries_per_param = 8;  // per-entry mode sampling budget
  std::uint64_t seed = 0;
};

// Compares analytic gradients of forward() (a scalar loss rebuilt per call
// from the current parameter values) against central finite differences.
// The finite-difference side runs forward-only under PreciseMathScope and is
// independent of the reverse-mode path it validates.
GradCheckReport grad_check(const std::function<Tensor()>& forward,
                           std::vector<ParamGroup>& groups, const GradCheckOptions& opts);

}  // namespace dial
