#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metarisk/rng.hpp"
#include "metarisk/tensor.hpp"

namespace metarisk {

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct LabeledDataset {
  Tensor features;             // n x d
  std::vector<int> labels;     // in [0, num_classes)
  int num_classes = 0;
  std::vector<std::uint8_t> noise_mask;  // empty, or size n marking corrupted rows
  std::vector<std::uint8_t> flip_mask;   // rows whose label actually changed

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.cols() : 0; }
  bool has_noise_mask() const { return !noise_mask.empty(); }
  long flipped_count() const;
  void validate() const;
};

struct Batch {
  Tensor X;               // b x d
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

/// Rows of `ds` at the given indices, noise mask included.
LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> idx);
Batch take(const LabeledDataset& ds, std::span<const std::size_t> idx);

/// C gaussian clusters in d dimensions with standard-normal random centers
/// and per-cluster standard deviation `spread`. Class counts differ by at
/// most one. Same seed, same dataset.
LabeledDataset gen_blobs(std::uint64_t seed, std::size_t n, int C, int d, double spread);

/// Train/test pair drawn around the same centers.
std::pair<LabeledDataset, LabeledDataset> gen_blobs_pair(std::uint64_t seed,
                                                         std::size_t n_train,
                                                         std::size_t n_test, int C, int d,
                                                         double spread);

/// Reassign round(fraction*n) uniformly chosen labels, each redrawn uniformly
/// over all classes (the redraw may equal the original). noise_mask marks the
/// selected rows; features are untouched.
LabeledDataset inject_label_noise(const LabeledDataset& ds, double fraction,
                                  std::uint64_t seed);

struct SplitSet {
  LabeledDataset train, val, hyper_val, test;
  std::uint64_t seed = 0;
};

/// Random 90/5/5 partition of the pool (floor rounding, remainder to train);
/// the test set passes through untouched.
SplitSet split_90_5_5(const LabeledDataset& pool, LabeledDataset test, std::uint64_t seed);

/// Mini-batch index stream. Without replacement it reshuffles each epoch and
/// emits every index exactly once per epoch, dropping a short final batch;
/// with replacement every draw is iid uniform.
class BatchSampler {
public:
  BatchSampler(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed,
               bool with_replacement = false);

  Batch next();
  std::size_t batch_size() const { return b_; }

private:
  const LabeledDataset& ds_;
  std::size_t b_;
  bool with_replacement_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Delimited numeric text format: header `d,C`, then one
/// `feature,...,feature,label` row per sample.
void save_delimited(const std::string& path, const LabeledDataset& ds);
LabeledDataset load_delimited(const std::string& path);

}  // namespace metarisk
