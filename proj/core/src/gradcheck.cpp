#include "dial/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dial {

namespace {

double eval_loss(const std::function<Tensor()>& forward) {
  PreciseMathScope precise;
  return static_cast<double>(forward().item());
}

// Error relative to the parameter's gradient scale. float32 forward noise
// puts a hard floor on how well a near-zero entry can be resolved by finite
// differences, so entries are judged against the largest gradient component
// of their parameter rather than against themselves alone.
float rel_err(double analytic, double numeric, double param_scale) {
  const double denom = std::max({param_scale, std::abs(analytic), std::abs(numeric), 1e-2});
  return static_cast<float>(std::abs(analytic - numeric) / denom);
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::string out = strcat(pass ? "PASS" : "FAIL", " max_rel_err=", max_rel_err, " tol=", tol, "\n");
  for (const auto& e : entries) {
    out += strcat("  ", e.name, ": rel_err=", e.max_rel_err, " analytic=", e.analytic,
                  " numeric=", e.numeric, e.trainable ? "" : " [not updated]", "\n");
  }
  return out;
}

GradCheckReport grad_check(const std::function<Tensor()>& forward,
                           std::vector<ParamGroup>& groups, const GradCheckOptions& opts) {
  GradCheckReport report;
  report.tol = opts.tol;

  // Analytic pass on the normal float32 path.
  for (auto& g : groups)
    for (auto& p : g.params) p.zero_grad();
  Tensor loss = forward();
  backward(loss);
  std::vector<std::vector<std::vector<float>>> analytic(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    analytic[gi].resize(groups[gi].params.size());
    for (std::size_t pi = 0; pi < groups[gi].params.size(); ++pi) {
      const Tensor& p = groups[gi].params[pi];
      analytic[gi][pi].assign(p.numel(), 0.0f);
      if (p.has_grad())
        std::copy(p.grad().begin(), p.grad().end(), analytic[gi][pi].begin());
    }
  }

  Rng rng(opts.seed, 0x67616463ull);
  const double h = opts.step;

  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    auto& g = groups[gi];
    if (opts.mode == GradCheckMode::kPerEntry) {
      for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
        Tensor& p = g.params[pi];
        GradCheckEntry entry;
        entry.name = strcat(g.name, "/", pi);
        entry.trainable = g.trainable;
        const std::size_t n = p.numel();
        const int budget = std::min<std::size_t>(n, opts.entries_per_param);
        float* theta = p.mutable_value().data();
        double param_scale = 0.0;
        for (float v : analytic[gi][pi]) param_scale = std::max(param_scale, double(std::abs(v)));
        for (int c = 0; c < budget; ++c) {
          const std::size_t i =
              n <= static_cast<std::size_t>(opts.entries_per_param) ? c : rng.below(n);
          const float saved = theta[i];
          theta[i] = saved + static_cast<float>(h);
          const double fp = eval_loss(forward);
          theta[i] = saved - static_cast<float>(h);
          const double fm = eval_loss(forward);
          theta[i] = saved;
          const double numeric = (fp - fm) / (2.0 * h);
          const double a = analytic[gi][pi][i];
          const float e = rel_err(a, numeric, param_scale);
          ++entry.checked;
          if (e >= entry.max_rel_err) {
            entry.max_rel_err = e;
            entry.analytic = static_cast<float>(a);
            entry.numeric = static_cast<float>(numeric);
          }
        }
        report.entries.push_back(entry);
      }
    } else {
      // One probe along the normalized analytic gradient of the whole group.
      GradCheckEntry entry;
      entry.name = strcat(g.name, " (direction)");
      entry.trainable = g.trainable;
      double norm2 = 0.0;
      for (const auto& buf : analytic[gi])
        for (float v : buf) norm2 += static_cast<double>(v) * v;
      const double norm = std::sqrt(norm2);
      if (norm < 1e-12) {
        entry.checked = 0;
        report.entries.push_back(entry);
        continue;
      }
      auto shift = [&](double delta) {
        for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
          float* theta = g.params[pi].mutable_value().data();
          const auto& dir = analytic[gi][pi];
          for (std::size_t i = 0; i < dir.size(); ++i)
            theta[i] += static_cast<float>(delta * dir[i] / norm);
        }
      };
      std::vector<std::vector<float>> saved;
      for (auto& p : g.params)
        saved.emplace_back(p.value().begin(), p.value().end());
      shift(h);
      const double fp = eval_loss(forward);
      for (std::size_t pi = 0; pi < g.params.size(); ++pi)
        std::copy(saved[pi].begin(), saved[pi].end(), g.params[pi].mutable_value().begin());
      shift(-h);
      const double fm = eval_loss(forward);
      for (std::size_t pi = 0; pi < g.params.size(); ++pi)
        std::copy(saved[pi].begin(), saved[pi].end(), g.params[pi].mutable_value().begin());
      const double numeric = (fp - fm) / (2.0 * h);
      entry.checked = 1;
      entry.analytic = static_cast<float>(norm);  // directional derivative along ghat
      entry.numeric = static_cast<float>(numeric);
      entry.max_rel_err = rel_err(norm, numeric, 0.0);
      report.entries.push_back(entry);
    }
  }

  for (const auto& e : report.entries) report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
  report.pass = report.max_rel_err < opts.tol;
  return report;
}

}  // namespace dial
