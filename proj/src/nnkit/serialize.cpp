// SPDX-License-Identifier: Apache-2.0
#include "genq/nnkit/serialize.hpp"

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace genq::io {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open '" + path + "' for reading");
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot open '" + path + "' for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw Error("short write to '" + path + "'");
  }
}

std::uint64_t fnv1a(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  }
  return h;
}

}  // namespace genq::io

namespace genq::nn {
namespace {

void put_record(io::ByteWriter& out, const std::string& name, const TensorF& t) {
  out.put(static_cast<std::uint16_t>(name.size()));
  out.raw(name);
  out.put(static_cast<std::uint8_t>(t.rank()));
  for (const Index d : t.shape()) out.put(static_cast<std::uint32_t>(d));
  out.put_all<float>(t.data());
}

void put_shape_payload(io::ByteWriter& out, const TensorF& t) {
  out.put(static_cast<std::uint8_t>(t.rank()));
  for (const Index d : t.shape()) out.put(static_cast<std::uint32_t>(d));
  out.put_all<float>(t.data());
}

TensorF get_shape_payload(io::ByteReader& in) {
  const auto rank = in.get<std::uint8_t>();
  Shape shape;
  for (std::uint8_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(in.get<std::uint32_t>()));
  const Index count = numel(shape);
  return TensorF(shape, in.get_array<float>(static_cast<std::size_t>(count)));
}

}  // namespace

void encode_model(const Model& model, io::ByteWriter& out) {
  out.magic(kModelMagic);
  out.put(kModelVersion);
  out.put(static_cast<std::uint8_t>(model.architecture()));
  const auto& bn = model.bn_layers();
  out.put(static_cast<std::uint32_t>(model.parameters().size() + 2 * bn.size()));
  for (const auto& p : model.parameters()) put_record(out, p.name, p.value);
  for (std::size_t i = 0; i < bn.size(); ++i) {
    put_record(out, "bn" + std::to_string(i) + ".running_mean", bn[i].running_mean);
    put_record(out, "bn" + std::to_string(i) + ".running_var", bn[i].running_var);
  }
}

Model decode_model(io::ByteReader& in) {
  in.expect_magic(kModelMagic);
  const auto version = in.get<std::uint16_t>();
  if (version != kModelVersion) {
    throw FormatError("model file version " + std::to_string(version) + " is not supported");
  }
  const auto arch_tag = in.get<std::uint8_t>();
  if (arch_tag > static_cast<std::uint8_t>(Architecture::tiny_vit)) {
    throw FormatError("unknown architecture tag " + std::to_string(arch_tag));
  }
  const auto count = in.get<std::uint32_t>();
  std::map<std::string, TensorF> records;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = in.get<std::uint16_t>();
    std::string name(in.take(len));
    TensorF value = get_shape_payload(in);
    if (!records.emplace(std::move(name), std::move(value)).second) {
      throw FormatError("duplicate record in model file");
    }
  }
  Model model = Model::create(static_cast<Architecture>(arch_tag), 0);
  auto take = [&](const std::string& name, TensorF& dst) {
    const auto it = records.find(name);
    if (it == records.end()) {
      throw FormatError("model file lacks record '" + name + "'");
    }
    if (it->second.shape() != dst.shape()) {
      throw FormatError("record '" + name + "' has shape " + to_string(it->second.shape()) + ", expected " +
                        to_string(dst.shape()));
    }
    dst = std::move(it->second);
    records.erase(it);
  };
  for (auto& p : model.parameters()) {
    take(p.name, p.value);
    p.zero_grad();
  }
  for (std::size_t i = 0; i < model.bn_layers().size(); ++i) {
    take("bn" + std::to_string(i) + ".running_mean", model.bn_layers()[i].running_mean);
    take("bn" + std::to_string(i) + ".running_var", model.bn_layers()[i].running_var);
  }
  if (!records.empty()) {
    throw FormatError("model file has unexpected record '" + records.begin()->first + "'");
  }
  return model;
}

std::string encode_model(const Model& model) {
  io::ByteWriter out;
  encode_model(model, out);
  return out.take();
}

Model decode_model(std::string_view bytes) {
  io::ByteReader in(bytes, "model file");
  Model m = decode_model(in);
  if (!in.at_end()) {
    throw FormatError("model file has trailing bytes");
  }
  return m;
}

void save_model(const Model& model, const std::string& path) { io::write_file(path, encode_model(model)); }

Model load_model(const std::string& path) { return decode_model(io::read_file(path)); }

std::string encode_tensor(const TensorF& tensor) {
  io::ByteWriter out;
  out.magic(kTensorMagic);
  put_shape_payload(out, tensor);
  return out.take();
}

TensorF decode_tensor(std::string_view bytes) {
  io::ByteReader in(bytes, "tensor file");
  in.expect_magic(kTensorMagic);
  TensorF t = get_shape_payload(in);
  if (!in.at_end()) {
    throw FormatError("tensor file has trailing bytes");
  }
  return t;
}

void save_tensor(const TensorF& tensor, const std::string& path) { io::write_file(path, encode_tensor(tensor)); }

TensorF load_tensor(const std::string& path) { return decode_tensor(io::read_file(path)); }

std::uint64_t model_hash(const Model& model) { return io::fnv1a(encode_model(model)); }

}  // namespace genq::nn
