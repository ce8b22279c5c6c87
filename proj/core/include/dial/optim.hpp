#pragma once

#include <string>
#include <vector>

#include "dial/tensor.hpp"

namespace dial {

// A named set of parameters with a shared trainability flag. A parameter
// belongs to exactly one group; freezing is expressed at group level.
struct ParamGroup {
  std::string name;
  std::vector<Tensor> params;
  bool trainable = true;

  std::size_t numel() const;
};

ParamGroup* find_group(std::vector<ParamGroup>& groups, const std::string& name);
std::uint64_t group_hash(const ParamGroup& g);
// Hash over every value buffer; used for the frozen-encoder contract.
std::uint64_t groups_hash(const std::vector<ParamGroup>& groups);

struct AdamConfig {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// Standard Adam with bias correction. Moment buffers are kept per parameter
// in group order; frozen groups are skipped entirely (values bit-identical,
// moments untouched).
class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<ParamGroup>& groups, AdamConfig cfg);

  // Applies one update to trainable groups, then clears all gradients
  // (including those of frozen groups).
  void step(std::vector<ParamGroup>& groups);

  std::int64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return cfg_; }

  struct Slot {
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<std::vector<Slot>>& slots() { return slots_; }
  const std::vector<std::vector<Slot>>& slots() const { return slots_; }
  void set_step_count(std::int64_t c) { step_count_ = c; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<Slot>> slots_;  // [group][param]
  std::int64_t step_count_ = 0;
};

}  // namespace dial
