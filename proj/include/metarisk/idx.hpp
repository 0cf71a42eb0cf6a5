#pragma once

#include <string>

#include "metarisk/data.hpp"

namespace metarisk {

// IDX ingestion errors, one class per failure mode.
class IdxError : public DataError {
public:
  using DataError::DataError;
};
class IdxBadMagic : public IdxError {
public:
  using IdxError::IdxError;
};
class IdxCountMismatch : public IdxError {
public:
  using IdxError::IdxError;
};
class IdxTruncated : public IdxError {
public:
  using IdxError::IdxError;
};

/// Parse a big-endian IDX image/label pair: magic 0x00000803 with dims
/// (count, rows, cols) for images, 0x00000801 with (count) for labels.
/// Pixel bytes are scaled to [0,1]; the two count fields must match.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

}  // namespace metarisk
