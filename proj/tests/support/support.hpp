#pragma once

// Shared test helpers. The oracles here are written straight from the
// formulas with plain loops and never call into xmal::align or
// xmal::evaluation, so agreement with the library is evidence, not tautology.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xmal/autograd.hpp"
#include "xmal/rng.hpp"

namespace xmal::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "xmal");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

ad::Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0);
/// Columns with unit L2 norm.
ad::Matrix random_unit_cols(int rows, int cols, Rng& rng);

// ---- finite differences ----

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
};

/// Compares the analytic gradient of the scalar `loss()` with respect to every
/// entry of every input against central differences with step `h`. Relative
/// error per entry is |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(const std::function<ad::Var()>& loss, std::vector<ad::Var> inputs, double h = 1e-4,
                          double floor = 1e-6);

// ---- oracles ----

/// Sum of both directions of the caption-image InfoNCE; samples are columns.
double cicl_oracle(const ad::Matrix& images, const ad::Matrix& captions, double tau);

/// Word-region loss from raw (words_k, regions_k) pairs. Returns {r|w, w|r}.
std::pair<double, double> wrcl_oracle(const std::vector<ad::Matrix>& words, const std::vector<ad::Matrix>& regions,
                                      double tau1, double tau2, double tau3);

/// Mean softmax cross-entropy of s * cos(embedding_b, weight_k), no margin.
double softmax_ce_oracle(const ad::Matrix& embeddings, const ad::Matrix& class_weights,
                         const std::vector<int>& labels, double scale);

/// min over every candidate threshold (each score and +inf) of max(FAR, FRR).
double eer_oracle(const std::vector<double>& scores, const std::vector<bool>& genuine);

/// Nearest gallery entry by cosine, first index wins ties.
double rank1_oracle(const std::vector<ad::Vector>& gallery, const std::vector<int>& gallery_subjects,
                    const std::vector<ad::Vector>& probes, const std::vector<int>& probe_subjects);

}  // namespace xmal::testing
