#include "collab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace collab {

namespace {

constexpr int kMaxRefinements = 3;

template <typename T>
T evaluate(const std::function<Tensor<T>()>& f, std::uint64_t* signature = nullptr) {
  NoGradGuard no_grad;
  KinkProbe probe;
  const Tensor<T> loss = f();
  if (loss.numel() != 1) {
    fail(ErrorKind::usage, "finite_diff_check: objective must be scalar, got " +
                               shape_str(loss.shape()));
  }
  if (signature) *signature = probe.signature();
  return loss.item();
}

}  // namespace

template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::span<Tensor<T>> params, double h) {
  return finite_diff_check<T>(f, f, params, h);
}

template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f_grad,
                                  const std::function<Tensor<T>()>& f,
                                  std::span<Tensor<T>> params, double h) {
  if (!(h > 0.0)) fail(ErrorKind::parameter, "finite_diff_check: step must be positive");

  std::uint64_t base_sig = 0, again_sig = 0;
  const T first = evaluate(f, &base_sig);
  const T second = evaluate(f, &again_sig);
  if (std::memcmp(&first, &second, sizeof(T)) != 0 || base_sig != again_sig) {
    fail(ErrorKind::invalid_check,
         "finite_diff_check: objective is not deterministic (masks or seeds resampled "
         "between evaluations)");
  }

  for (auto& p : params) p.zero_grad();
  const Tensor<T> loss = f_grad();
  const double base = loss.item();
  const double tol = sizeof(T) == sizeof(double) ? 1e-12 : 1e-5;
  if (std::abs(base - first) > tol * std::max(1.0, std::abs(base))) {
    fail(ErrorKind::invalid_check, "finite_diff_check: gradient and value objectives disagree (" +
                                       std::to_string(base) + " vs " + std::to_string(first) + ")");
  }
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), T(0));
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const T saved = values[k];
      double hk = h;
      double numeric = 0.0;
      for (int attempt = 0;; ++attempt) {
        const T s = static_cast<T>(hk);
        std::uint64_t sig_plus = 0, sig_minus = 0;
        values[k] = saved + s;
        const double plus = evaluate(f, &sig_plus);
        values[k] = saved - s;
        const double minus = evaluate(f, &sig_minus);
        values[k] = saved;
        numeric = (plus - minus) / (2.0 * hk);
        const bool straddles = sig_plus != base_sig || sig_minus != base_sig;
        if (!straddles) break;
        if (attempt == kMaxRefinements) {
          ++report.kinks_unresolved;
          break;
        }
        if (attempt == 0) ++report.kinks_refined;
        hk /= 10.0;
      }
      const double a = analytic[pi][k];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.coordinates;
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : HUGE_VAL;
        report.worst_param = pi;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

template <typename T>
double finite_diff_check(const std::function<Tensor<T>()>& f, Tensor<T>& theta, double h) {
  return finite_diff_check<T>(f, std::span<Tensor<T>>(&theta, 1), h).max_rel_error;
}

template GradCheckReport finite_diff_check<float>(const std::function<Tensor<float>()>&,
                                                  std::span<Tensor<float>>, double);
template GradCheckReport finite_diff_check<double>(const std::function<Tensor<double>()>&,
                                                   std::span<Tensor<double>>, double);
template GradCheckReport finite_diff_check<float>(const std::function<Tensor<float>()>&,
                                                  const std::function<Tensor<float>()>&,
                                                  std::span<Tensor<float>>, double);
template GradCheckReport finite_diff_check<double>(const std::function<Tensor<double>()>&,
                                                   const std::function<Tensor<double>()>&,
                                                   std::span<Tensor<double>>, double);
template double finite_diff_check<float>(const std::function<Tensor<float>()>&, Tensor<float>&,
                                         double);
template double finite_diff_check<double>(const std::function<Tensor<double>()>&,
                                          Tensor<double>&, double);

}  // namespace collab
