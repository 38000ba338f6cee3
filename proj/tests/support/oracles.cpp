#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

Vec conv2d(const Vec& x, std::size_t N, std::size_t C, std::size_t H, std::size_t W, const Vec& k,
           std::size_t F, std::size_t Kh, std::size_t Kw, std::size_t stride, std::size_t pad) {
  const std::size_t Ho = (H + 2 * pad - Kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - Kw) / stride + 1;
  Vec out(N * F * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < Kh; ++a)
              for (std::size_t b = 0; b < Kw; ++b) {
                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W)) continue;
                acc += x[((n * C + c) * H + r) * W + s] * k[((f * C + c) * Kh + a) * Kw + b];
              }
          out[((n * F + f) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

Vec linear(const Vec& x, std::size_t N, std::size_t D, const Vec& w, std::size_t M, const Vec& b) {
  Vec out(N * M);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < M; ++j) {
      double acc = b[j];
      for (std::size_t d = 0; d < D; ++d) acc += x[n * D + d] * w[d * M + j];
      out[n * M + j] = acc;
    }
  return out;
}

Vec maxpool(const Vec& x, std::size_t N, std::size_t C, std::size_t H, std::size_t W,
            std::size_t window, std::size_t stride) {
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  Vec out;
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double best = -INFINITY;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b)
            best = std::max(best, x[nc * H * W + (i * stride + a) * W + j * stride + b]);
        out.push_back(best);
      }
  return out;
}

Vec batchnorm(const Vec& x, std::size_t N, std::size_t C, std::size_t HW, const Vec& gamma,
              const Vec& beta, double eps) {
  Vec out(x.size());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) mean += x[(n * C + c) * HW + p];
    mean /= static_cast<double>(N * HW);
    double var = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const double d = x[(n * C + c) * HW + p] - mean;
        var += d * d;
      }
    var /= static_cast<double>(N * HW);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const std::size_t o = (n * C + c) * HW + p;
        out[o] = gamma[c] * (x[o] - mean) / std::sqrt(var + eps) + beta[c];
      }
  }
  return out;
}

Vec softmax(const Vec& z, double T) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v / T);
  Vec p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / T - mx);
  for (double& v : p) v /= s;
  return p;
}

namespace {

Vec row(const Vec& z, std::size_t n, std::size_t m) {
  return Vec(z.begin() + static_cast<long>(n * m), z.begin() + static_cast<long>((n + 1) * m));
}

}  // namespace

double j_hard(const std::vector<int>& labels, const Vec& z, std::size_t m, double T) {
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    total -= std::log(softmax(row(z, n, m), T)[static_cast<std::size_t>(labels[n])]);
  }
  return total / static_cast<double>(labels.size());
}

double j_soft(const Vec& q, const Vec& z, std::size_t m, double T) {
  const std::size_t N = z.size() / m;
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const Vec p = softmax(row(z, n, m), T);
    for (std::size_t k = 0; k < m; ++k) total -= q[n * m + k] * std::log(p[k]);
  }
  return total / static_cast<double>(N);
}

double l_out(const std::vector<int>& labels, const std::vector<Vec>& branches, std::size_t m,
             double alpha, double T) {
  const std::size_t B = branches.size(), N = labels.size();
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    // consensus of every other branch, softened at T
    Vec q(N * m, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      Vec avg(m, 0.0);
      for (std::size_t j = 0; j < B; ++j) {
        if (j == i) continue;
        for (std::size_t k = 0; k < m; ++k) avg[k] += branches[j][n * m + k] / static_cast<double>(B - 1);
      }
      const Vec p = softmax(avg, T);
      for (std::size_t k = 0; k < m; ++k) q[n * m + k] = p[k];
    }
    total += alpha * j_hard(labels, branches[i], m, 1.0) + (1.0 - alpha) * j_soft(q, branches[i], m, T);
  }
  return total / static_cast<double>(B);
}

double l_mid(const std::vector<int>& labels, const std::vector<Vec>& z_list, std::size_t m,
             std::size_t i, double alpha_mid, double beta_mid, double T, bool include_self) {
  const std::size_t N = labels.size(), L = z_list.size();
  double loss = alpha_mid * j_hard(labels, z_list[i - 1], m, T);
  const std::size_t first = include_self ? i : i + 1;
  if (first > L) return loss;
  Vec q(N * m);
  for (std::size_t n = 0; n < N; ++n) {
    Vec avg(m, 0.0);
    for (std::size_t j = first; j <= L; ++j)
      for (std::size_t k = 0; k < m; ++k) avg[k] += z_list[j - 1][n * m + k];
    for (double& v : avg) v /= static_cast<double>(L - first + 1);
    const Vec p = softmax(avg, T);
    for (std::size_t k = 0; k < m; ++k) q[n * m + k] = p[k];
  }
  return loss + beta_mid * j_soft(q, z_list[i - 1], m, T);
}

Vec std_descriptor(const Vec& maps, std::size_t N, std::size_t C, std::size_t HW) {
  Vec z(N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = &maps[(n * C + c) * HW];
      double mean = 0.0;
      for (std::size_t k = 0; k < HW; ++k) mean += p[k];
      mean /= static_cast<double>(HW);
      double var = 0.0;
      for (std::size_t k = 0; k < HW; ++k) var += (p[k] - mean) * (p[k] - mean);
      z[n * C + c] = std::sqrt(var / static_cast<double>(HW));
    }
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < N; ++n) mean += z[n * C + c];
    mean /= static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n) z[n * C + c] -= mean;
  }
  return z;
}

Vec cosine(const Vec& rows, std::size_t N, std::size_t D) {
  Vec s(N * N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) {
        s[i * N + j] = 1.0;
        continue;
      }
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        dot += rows[i * D + d] * rows[j * D + d];
        ni += rows[i * D + d] * rows[i * D + d];
        nj += rows[j * D + d] * rows[j * D + d];
      }
      s[i * N + j] = dot / ((std::sqrt(ni) + 1e-12) * (std::sqrt(nj) + 1e-12));
    }
  return s;
}

Vec target_similarity(const std::vector<int>& labels, std::size_t m) {
  const std::size_t N = labels.size();
  Vec y(N * m, 0.0);
  for (std::size_t n = 0; n < N; ++n) y[n * m + static_cast<std::size_t>(labels[n])] = 1.0;
  for (std::size_t k = 0; k < m; ++k) {
    double mean = 0.0;
    for (std::size_t n = 0; n < N; ++n) mean += y[n * m + k];
    mean /= static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n) y[n * m + k] -= mean;
  }
  return cosine(y, N, m);
}

Vec input_similarity(const Vec& x, std::size_t N, std::size_t C, std::size_t HW) {
  return cosine(std_descriptor(x, N, C, HW), N, C);
}

namespace {

double frobenius_diff(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

double pull_push(const Vec& projected, std::size_t N, std::size_t C, std::size_t HW,
                 const std::vector<int>& labels, std::size_t m, const Vec& x, std::size_t Cx,
                 std::size_t HWx, double alpha_pull, double alpha_push) {
  const Vec s = cosine(std_descriptor(projected, N, C, HW), N, C);
  return alpha_pull * frobenius_diff(s, target_similarity(labels, m)) -
         alpha_push * frobenius_diff(s, input_similarity(x, N, Cx, HWx));
}

Vec kernel_covariance(const Vec& w, std::size_t F, std::size_t G) {
  Vec t(F * G);
  for (std::size_t f = 0; f < F; ++f) {
    double mean = 0.0;
    for (std::size_t g = 0; g < G; ++g) mean += w[f * G + g];
    mean /= static_cast<double>(G);
    double var = 0.0;
    for (std::size_t g = 0; g < G; ++g) var += (w[f * G + g] - mean) * (w[f * G + g] - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(G)), 1e-8);
    for (std::size_t g = 0; g < G; ++g) t[f * G + g] = (w[f * G + g] - mean) / sd;
  }
  Vec c(F * F);
  for (std::size_t i = 0; i < F; ++i)
    for (std::size_t j = 0; j < F; ++j) {
      double acc = 0.0;
      for (std::size_t g = 0; g < G; ++g) acc += t[i * G + g] * t[j * G + g];
      c[i * F + j] = acc / static_cast<double>(G);
    }
  return c;
}

double kernel_decorrelation(const Vec& w, std::size_t F, std::size_t G) {
  const Vec c = kernel_covariance(w, F, G);
  double s = 0.0;
  for (std::size_t i = 0; i < F; ++i)
    for (std::size_t j = 0; j < F; ++j)
      if (i != j) s += c[i * F + j] * c[i * F + j];
  return std::sqrt(s);
}

}  // namespace oracle
