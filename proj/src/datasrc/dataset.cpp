// SPDX-License-Identifier: Apache-2.0
#include "genq/datasrc/dataset.hpp"

#include "genq/common/binary_io.hpp"
#include "genq/datasrc/synth.hpp"

namespace genq::data {

Dataset Dataset::subset(std::span<const nn::Index> rows) const {
  Dataset out;
  out.images = images.gather(rows);
  out.labels.reserve(rows.size());
  for (const nn::Index r : rows) out.labels.push_back(labels[static_cast<std::size_t>(r)]);
  out.class_names = class_names;
  out.provenance = provenance;
  return out;
}

Dataset Dataset::head(nn::Index count) const {
  Dataset out;
  count = std::min(count, size());
  out.images = images.slice(0, count);
  out.labels.assign(labels.begin(), labels.begin() + count);
  out.class_names = class_names;
  out.provenance = provenance;
  return out;
}

void Dataset::validate() const {
  if (labels.empty()) {
    throw ContractError("dataset is empty");
  }
  if (images.rank() != 4 || images.dim(0) != size()) {
    throw ContractError("dataset images " + nn::to_string(images.shape()) + " do not match " +
                        std::to_string(labels.size()) + " labels");
  }
  const int classes = class_names.empty() ? 1 << 16 : static_cast<int>(class_names.size());
  for (const int y : labels) {
    if (y < 0 || y >= classes) {
      throw ContractError("dataset label " + std::to_string(y) + " outside class count");
    }
  }
}

Dataset concat(std::span<const Dataset> parts) {
  Dataset out;
  if (parts.empty()) return out;
  std::vector<nn::TensorF> imgs;
  for (const auto& p : parts) {
    imgs.push_back(p.images);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.images = nn::concat_rows<float>(imgs);
  out.class_names = parts.front().class_names;
  out.provenance = parts.front().provenance;
  return out;
}

std::string encode_dataset(const Dataset& dataset) {
  dataset.validate();
  io::ByteWriter out;
  out.magic(kDatasetMagic);
  out.put(static_cast<std::uint32_t>(dataset.size()));
  out.put(static_cast<std::uint8_t>(dataset.images.dim(1)));
  out.put(static_cast<std::uint16_t>(dataset.images.dim(2)));
  out.put(static_cast<std::uint16_t>(dataset.images.dim(3)));
  for (const int y : dataset.labels) out.put(static_cast<std::uint16_t>(y));
  out.put_all<float>(dataset.images.data());
  return out.take();
}

Dataset decode_dataset(std::string_view bytes) {
  io::ByteReader in(bytes, "dataset file");
  in.expect_magic(kDatasetMagic);
  const auto n = in.get<std::uint32_t>();
  const auto c = in.get<std::uint8_t>();
  const auto h = in.get<std::uint16_t>();
  const auto w = in.get<std::uint16_t>();
  Dataset out;
  for (const auto y : in.get_array<std::uint16_t>(n)) out.labels.push_back(y);
  const nn::Shape shape{static_cast<nn::Index>(n), c, h, w};
  out.images = nn::TensorF(shape, in.get_array<float>(static_cast<std::size_t>(nn::numel(shape))));
  if (!in.at_end()) {
    throw FormatError("dataset file has trailing bytes");
  }
  out.class_names = default_class_names();
  return out;
}

void save_dataset(const Dataset& dataset, const std::string& path) { io::write_file(path, encode_dataset(dataset)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

}  // namespace genq::data
