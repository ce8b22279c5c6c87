#include "dial/optim.hpp"

#include <cmath>

namespace dial {

std::size_t ParamGroup::numel() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

ParamGroup* find_group(std::vector<ParamGroup>& groups, const std::string& name) {
  for (auto& g : groups)
    if (g.name == name) return &g;
  return nullptr;
}

std::uint64_t group_hash(const ParamGroup& g) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  h = fnv1a(g.name.data(), g.name.size(), h);
  for (const auto& p : g.params) h = fnv1a(p.value().data(), p.numel() * 4, h);
  return h;
}

std::uint64_t groups_hash(const std::vector<ParamGroup>& groups) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& g : groups) {
    const std::uint64_t gh = group_hash(g);
    h = fnv1a(&gh, sizeof(gh), h);
  }
  return h;
}

AdamState::AdamState(const std::vector<ParamGroup>& groups, AdamConfig cfg) : cfg_(cfg) {
  slots_.resize(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    slots_[gi].resize(groups[gi].params.size());
    for (std::size_t pi = 0; pi < groups[gi].params.size(); ++pi) {
      const std::size_t n = groups[gi].params[pi].numel();
      slots_[gi][pi].m.assign(n, 0.0f);
      slots_[gi][pi].v.assign(n, 0.0f);
    }
  }
}

void AdamState::step(std::vector<ParamGroup>& groups) {
  check(slots_.size() == groups.size(), "adam state was built for ", slots_.size(),
        " groups, got ", groups.size());
  ++step_count_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_count_));
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& g = groups[gi];
    if (!g.trainable) continue;
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      Tensor& p = g.params[pi];
      check(p.has_grad(), "adam_step: trainable parameter '", g.name, "[", pi,
            "]' has no gradient; was backward run?");
      auto& slot = slots_[gi][pi];
      float* theta = p.mutable_value().data();
      const float* grad = p.grad().data();
      const std::size_t n = p.numel();
      const float lr = cfg_.lr;
      const float b1 = cfg_.beta1, b2 = cfg_.beta2;
      const float inv_bc1 = static_cast<float>(1.0 / bc1);
      const float inv_bc2 = static_cast<float>(1.0 / bc2);
      for (std::size_t i = 0; i < n; ++i) {
        float gi2 = grad[i];
        if (cfg_.weight_decay != 0.0f) gi2 += cfg_.weight_decay * theta[i];
        slot.m[i] = b1 * slot.m[i] + (1.0f - b1) * gi2;
        slot.v[i] = b2 * slot.v[i] + (1.0f - b2) * gi2 * gi2;
        const float mhat = slot.m[i] * inv_bc1;
        const float vhat = slot.v[i] * inv_bc2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }
  for (auto& g : groups)
    for (auto& p : g.params) p.zero_grad();
}

}  // namespace dial
