#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <set>

#include <unistd.h>

namespace xmal::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter.fetch_add(1)));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

ad::Matrix random_matrix(int rows, int cols, Rng& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) m(r, c) = n(rng);
  return m;
}

ad::Matrix random_unit_cols(int rows, int cols, Rng& rng) {
  ad::Matrix m = random_matrix(rows, cols, rng);
  for (int c = 0; c < cols; ++c) m.col(c) /= m.col(c).norm();
  return m;
}

GradCheck check_gradients(const std::function<ad::Var()>& loss, std::vector<ad::Var> inputs, double h,
                          double floor) {
  for (auto& v : inputs) v.zero_grad();
  loss().backward();
  std::vector<ad::Matrix> analytic;
  for (auto& v : inputs) {
    analytic.push_back(v.has_grad() ? v.grad() : ad::Matrix::Zero(v.rows(), v.cols()));
  }

  GradCheck out;
  ad::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    ad::Matrix& x = inputs[k].mutable_value();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + h;
      const double up = loss().item();
      x.data()[i] = saved - h;
      const double down = loss().item();
      x.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      out.max_relative_error = std::max(out.max_relative_error, std::abs(a - numeric) / denom);
      ++out.entries;
    }
  }
  return out;
}

namespace {

double cosine(const ad::Vector& a, const ad::Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

// -log( exp(x[target]) / sum_j exp(x[j]) ), computed with a max shift.
double neg_log_softmax(const std::vector<double>& x, std::size_t target) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return -(x[target] - m - std::log(s));
}

}  // namespace

double cicl_oracle(const ad::Matrix& images, const ad::Matrix& captions, double tau) {
  const auto b = static_cast<std::size_t>(images.cols());
  std::vector<std::vector<double>> sim(b, std::vector<double>(b));
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < b; ++k)
      sim[i][k] = cosine(images.col(static_cast<Eigen::Index>(i)), captions.col(static_cast<Eigen::Index>(k))) / tau;
  double f2c = 0.0;
  double c2f = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> row(b);
    std::vector<double> col(b);
    for (std::size_t k = 0; k < b; ++k) {
      row[k] = sim[i][k];
      col[k] = sim[k][i];
    }
    f2c += neg_log_softmax(row, i);
    c2f += neg_log_softmax(col, i);
  }
  return (f2c + c2f) / static_cast<double>(b);
}

std::pair<double, double> wrcl_oracle(const std::vector<ad::Matrix>& words, const std::vector<ad::Matrix>& regions,
                                      double tau1, double tau2, double tau3) {
  const std::size_t b = words.size();
  std::vector<std::vector<double>> f(b, std::vector<double>(b));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < b; ++k) {
      const ad::Matrix& w = words[k];
      const ad::Matrix& r = regions[i];
      const auto n = w.cols();
      const auto m = r.cols();
      // s(a, j) = w_a . r_j, then a softmax down each region's column.
      ad::Matrix sbar(n, m);
      for (Eigen::Index j = 0; j < m; ++j) {
        std::vector<double> s(static_cast<std::size_t>(n));
        for (Eigen::Index a = 0; a < n; ++a) s[static_cast<std::size_t>(a)] = w.col(a).dot(r.col(j));
        const double top = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double v : s) z += std::exp(v - top);
        for (Eigen::Index a = 0; a < n; ++a) sbar(a, j) = std::exp(s[static_cast<std::size_t>(a)] - top) / z;
      }
      double acc = 0.0;
      for (Eigen::Index a = 0; a < n; ++a) {
        double top = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < m; ++j) top = std::max(top, sbar(a, j) / tau1);
        double z = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) z += std::exp(sbar(a, j) / tau1 - top);
        ad::Vector attended = ad::Vector::Zero(r.rows());
        for (Eigen::Index j = 0; j < m; ++j) attended += (std::exp(sbar(a, j) / tau1 - top) / z) * r.col(j);
        acc += std::exp(cosine(attended, w.col(a)) / tau2);
      }
      f[i][k] = tau2 * std::log(acc);
    }
  }
  double r_given_w = 0.0;
  double w_given_r = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> over_captions(b);
    std::vector<double> over_images(b);
    for (std::size_t k = 0; k < b; ++k) {
      over_captions[k] = f[i][k] / tau3;
      over_images[k] = f[k][i] / tau3;
    }
    r_given_w += neg_log_softmax(over_captions, i);
    w_given_r += neg_log_softmax(over_images, i);
  }
  return {r_given_w / static_cast<double>(b), w_given_r / static_cast<double>(b)};
}

double softmax_ce_oracle(const ad::Matrix& embeddings, const ad::Matrix& class_weights,
                         const std::vector<int>& labels, double scale) {
  double total = 0.0;
  for (Eigen::Index b = 0; b < embeddings.cols(); ++b) {
    std::vector<double> logits;
    for (Eigen::Index k = 0; k < class_weights.cols(); ++k) {
      logits.push_back(scale * cosine(embeddings.col(b), class_weights.col(k)));
    }
    total += neg_log_softmax(logits, static_cast<std::size_t>(labels[static_cast<std::size_t>(b)]));
  }
  return total / static_cast<double>(embeddings.cols());
}

double eer_oracle(const std::vector<double>& scores, const std::vector<bool>& genuine) {
  std::set<double> candidates(scores.begin(), scores.end());
  candidates.insert(std::numeric_limits<double>::infinity());
  double ng = 0.0;
  double ni = 0.0;
  for (bool g : genuine) (g ? ng : ni) += 1.0;
  double best = 1.0;
  for (double t : candidates) {
    double false_accepts = 0.0;
    double false_rejects = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const bool accept = scores[i] >= t;
      if (genuine[i] && !accept) false_rejects += 1.0;
      if (!genuine[i] && accept) false_accepts += 1.0;
    }
    best = std::min(best, std::max(false_accepts / ni, false_rejects / ng));
  }
  return best;
}

double rank1_oracle(const std::vector<ad::Vector>& gallery, const std::vector<int>& gallery_subjects,
                    const std::vector<ad::Vector>& probes, const std::vector<int>& probe_subjects) {
  int hits = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const double s = cosine(probes[p], gallery[g]);
      if (s > best_score) {
        best_score = s;
        best = g;
      }
    }
    if (gallery_subjects[best] == probe_subjects[p]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

}  // namespace xmal::testing
