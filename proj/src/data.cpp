#include "metarisk/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace metarisk {

long LabeledDataset::flipped_count() const {
  long n = 0;
  for (std::uint8_t f : flip_mask) n += f;
  return n;
}

void LabeledDataset::validate() const {
  if (features.rank() != 2 || features.rows() != labels.size())
    throw DataError("dataset: features " + features.shape_str() + " do not match " +
                    std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw DataError("dataset: label " + std::to_string(y) + " out of range [0," +
                      std::to_string(num_classes) + ")");
  if (!noise_mask.empty() && noise_mask.size() != labels.size())
    throw DataError("dataset: noise mask length mismatch");
}

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  LabeledDataset out;
  std::size_t d = ds.dim();
  out.features = Tensor({idx.size(), d});
  out.labels.reserve(idx.size());
  out.num_classes = ds.num_classes;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::size_t i = idx[r];
    for (std::size_t j = 0; j < d; ++j) out.features.at(r, j) = ds.features.at(i, j);
    out.labels.push_back(ds.labels[i]);
    if (ds.has_noise_mask()) {
      out.noise_mask.push_back(ds.noise_mask[i]);
      out.flip_mask.push_back(ds.flip_mask[i]);
    }
  }
  return out;
}

Batch take(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  Batch b;
  std::size_t d = ds.dim();
  b.X = Tensor({idx.size(), d});
  b.y.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) b.X.at(r, j) = ds.features.at(idx[r], j);
    b.y.push_back(ds.labels[idx[r]]);
  }
  return b;
}

namespace {

Tensor draw_centers(std::uint64_t seed, int C, int d) {
  Rng rng(mix_seed(seed, "blob-centers"));
  Tensor centers({static_cast<std::size_t>(C), static_cast<std::size_t>(d)});
  for (std::size_t i = 0; i < centers.numel(); ++i) centers[i] = rng.normal();
  return centers;
}

LabeledDataset sample_blobs(const Tensor& centers, Rng& rng, std::size_t n, int C, int d,
                            double spread) {
  LabeledDataset ds;
  ds.features = Tensor({n, static_cast<std::size_t>(d)});
  ds.labels.resize(n);
  ds.num_classes = C;
  for (std::size_t i = 0; i < n; ++i) {
    int y = static_cast<int>(i % static_cast<std::size_t>(C));
    ds.labels[i] = y;
    for (int j = 0; j < d; ++j)
      ds.features.at(i, static_cast<std::size_t>(j)) =
          centers.at(static_cast<std::size_t>(y), static_cast<std::size_t>(j)) +
          spread * rng.normal();
  }
  return ds;
}

}  // namespace

LabeledDataset gen_blobs(std::uint64_t seed, std::size_t n, int C, int d, double spread) {
  if (C < 2 || n < static_cast<std::size_t>(C) || d < 1 || !(spread > 0.0))
    throw DataError("gen_blobs: need n >= C >= 2, d >= 1, spread > 0");
  Tensor centers = draw_centers(seed, C, d);
  Rng rng(mix_seed(seed, "blob-samples"));
  return sample_blobs(centers, rng, n, C, d, spread);
}

std::pair<LabeledDataset, LabeledDataset> gen_blobs_pair(std::uint64_t seed,
                                                         std::size_t n_train,
                                                         std::size_t n_test, int C, int d,
                                                         double spread) {
  if (C < 2 || n_train < static_cast<std::size_t>(C) ||
      n_test < static_cast<std::size_t>(C) || d < 1 || !(spread > 0.0))
    throw DataError("gen_blobs_pair: need n >= C >= 2, d >= 1, spread > 0");
  Tensor centers = draw_centers(seed, C, d);
  Rng rng_train(mix_seed(seed, "blob-samples"));
  Rng rng_test(mix_seed(seed, "blob-samples-test"));
  return {sample_blobs(centers, rng_train, n_train, C, d, spread),
          sample_blobs(centers, rng_test, n_test, C, d, spread)};
}

LabeledDataset inject_label_noise(const LabeledDataset& ds, double fraction,
                                  std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw DataError("inject_label_noise: fraction must lie in [0,1]");
  ds.validate();
  LabeledDataset out = ds;
  std::size_t n = ds.size();
  out.noise_mask.assign(n, 0);
  out.flip_mask.assign(n, 0);

  auto n_corrupt = static_cast<std::size_t>(
      std::lround(fraction * static_cast<double>(n)));
  Rng rng(mix_seed(seed, "label-noise"));
  auto order = rng.permutation(n);
  for (std::size_t r = 0; r < n_corrupt; ++r) {
    std::size_t i = order[r];
    int fresh = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(ds.num_classes)));
    out.noise_mask[i] = 1;
    if (fresh != out.labels[i]) out.flip_mask[i] = 1;
    out.labels[i] = fresh;
  }
  return out;
}

SplitSet split_90_5_5(const LabeledDataset& pool, LabeledDataset test,
                      std::uint64_t seed) {
  pool.validate();
  std::size_t n = pool.size();
  if (n < 20) throw DataError("split_90_5_5: pool too small, need n >= 20");

  std::size_t n_val = n / 20, n_hv = n / 20;  // floor(0.05 n)
  Rng rng(mix_seed(seed, "split"));
  auto order = rng.permutation(n);

  std::span<const std::size_t> all(order);
  SplitSet s;
  s.seed = seed;
  s.val = subset(pool, all.first(n_val));
  s.hyper_val = subset(pool, all.subspan(n_val, n_hv));
  s.train = subset(pool, all.subspan(n_val + n_hv));
  s.test = std::move(test);
  return s;
}

BatchSampler::BatchSampler(const LabeledDataset& ds, std::size_t batch_size,
                           std::uint64_t seed, bool with_replacement)
    : ds_(ds),
      b_(batch_size),
      with_replacement_(with_replacement),
      rng_(mix_seed(seed, "sampler")) {
  if (b_ == 0 || (!with_replacement_ && b_ > ds_.size()))
    throw DataError("sampler: batch size " + std::to_string(b_) +
                    " invalid for a dataset of " + std::to_string(ds_.size()));
}

Batch BatchSampler::next() {
  std::vector<std::size_t> idx(b_);
  if (with_replacement_) {
    for (auto& i : idx) i = rng_.uniform_int(ds_.size());
  } else {
    // drop the short remainder at the end of each epoch
    if (cursor_ + b_ > order_.size()) {
      order_ = rng_.permutation(ds_.size());
      cursor_ = 0;
    }
    for (std::size_t r = 0; r < b_; ++r) idx[r] = order_[cursor_ + r];
    cursor_ += b_;
  }
  return take(ds_, idx);
}

void save_delimited(const std::string& path, const LabeledDataset& ds) {
  ds.validate();
  std::ofstream f(path);
  if (!f) throw DataError("save_delimited: cannot open " + path);
  f << ds.dim() << "," << ds.num_classes << "\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.dim(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g,", ds.features.at(i, j));
      f << buf;
    }
    f << ds.labels[i] << "\n";
  }
}

LabeledDataset load_delimited(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("load_delimited: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError("load_delimited: empty file " + path);

  std::size_t d = 0;
  int C = 0;
  if (std::sscanf(line.c_str(), "%zu,%d", &d, &C) != 2 || d == 0 || C < 2)
    throw DataError("load_delimited: bad header '" + line + "' in " + path);

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (row.size() != d + 1)
      throw DataError("load_delimited: line " + std::to_string(lineno) + " has " +
                      std::to_string(row.size()) + " fields, expected " +
                      std::to_string(d + 1));
    values.insert(values.end(), row.begin(), row.begin() + static_cast<long>(d));
    labels.push_back(static_cast<int>(row.back()));
  }

  LabeledDataset ds;
  ds.features = Tensor({labels.size(), d}, std::move(values));
  ds.labels = std::move(labels);
  ds.num_classes = C;
  ds.validate();
  return ds;
}

}  // namespace metarisk
