#include "metarisk/idx.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>

namespace metarisk {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw IdxTruncated("idx: " + path + " truncated in header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

std::ifstream open_bin(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IdxError("idx: cannot open " + path);
  return f;
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi = open_bin(images_path);
  std::uint32_t magic = read_be32(fi, images_path);
  if (magic != kImagesMagic)
    throw IdxBadMagic("idx: " + images_path + " has magic " + std::to_string(magic) +
                      ", expected image tensor magic 2051");
  std::uint32_t count = read_be32(fi, images_path);
  std::uint32_t rows = read_be32(fi, images_path);
  std::uint32_t cols = read_be32(fi, images_path);

  std::ifstream fl = open_bin(labels_path);
  std::uint32_t lmagic = read_be32(fl, labels_path);
  if (lmagic != kLabelsMagic)
    throw IdxBadMagic("idx: " + labels_path + " has magic " + std::to_string(lmagic) +
                      ", expected label vector magic 2049");
  std::uint32_t lcount = read_be32(fl, labels_path);
  if (count != lcount)
    throw IdxCountMismatch("idx: " + std::to_string(count) + " images vs " +
                           std::to_string(lcount) + " labels");

  std::size_t d = std::size_t(rows) * cols;
  std::vector<unsigned char> pixels(std::size_t(count) * d);
  fi.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (fi.gcount() != static_cast<std::streamsize>(pixels.size()))
    throw IdxTruncated("idx: " + images_path + " truncated: expected " +
                       std::to_string(pixels.size()) + " pixel bytes");

  std::vector<unsigned char> raw_labels(count);
  fl.read(reinterpret_cast<char*>(raw_labels.data()), count);
  if (fl.gcount() != static_cast<std::streamsize>(count))
    throw IdxTruncated("idx: " + labels_path + " truncated: expected " +
                       std::to_string(count) + " label bytes");

  LabeledDataset ds;
  ds.features = Tensor({count, d});
  for (std::size_t i = 0; i < pixels.size(); ++i)
    ds.features[i] = static_cast<double>(pixels[i]) / 255.0;
  ds.labels.assign(raw_labels.begin(), raw_labels.end());
  int mx = 0;
  for (int y : ds.labels) mx = std::max(mx, y);
  ds.num_classes = mx + 1;
  return ds;
}

}  // namespace metarisk
