// SPDX-License-Identifier: Apache-2.0
#include "genq/quant/serialize.hpp"

#include "genq/nnkit/serialize.hpp"

namespace genq::quant {
namespace {

void put_section(io::ByteWriter& out, const QuantParam& q) {
  out.magic(kQuantMagic);
  out.put(static_cast<std::uint8_t>(q.role));
  out.put(static_cast<std::uint8_t>(q.bits));
  out.put(q.step);
  out.put(static_cast<std::int32_t>(q.zero_point));
  out.put(static_cast<std::int32_t>(q.lower));
  out.put(static_cast<std::int32_t>(q.upper));
  out.put(static_cast<std::uint8_t>(q.stage));
  out.put(static_cast<std::uint8_t>((q.v ? 1U : 0U) | (q.u ? 2U : 0U)));
  for (const auto* t : {q.v ? &*q.v : nullptr, q.u ? &*q.u : nullptr}) {
    if (t == nullptr) continue;
    out.put(static_cast<std::uint32_t>(t->size()));
    out.put_all<float>(t->data());
  }
}

QuantParam get_section(io::ByteReader& in, const nn::Shape& shape) {
  in.expect_magic(kQuantMagic);
  QuantParam q;
  const auto role = in.get<std::uint8_t>();
  if (role > 1) throw FormatError("quantizer section: unknown role " + std::to_string(role));
  q.role = static_cast<Role>(role);
  q.bits = in.get<std::uint8_t>();
  q.step = in.get<float>();
  q.zero_point = in.get<std::int32_t>();
  q.lower = in.get<std::int32_t>();
  q.upper = in.get<std::int32_t>();
  const auto stage = in.get<std::uint8_t>();
  if (stage > 2) throw FormatError("quantizer section: unknown stage " + std::to_string(stage));
  q.stage = static_cast<Stage>(stage);
  const auto flags = in.get<std::uint8_t>();
  for (const unsigned bit : {1U, 2U}) {
    if ((flags & bit) == 0) continue;
    const auto count = in.get<std::uint32_t>();
    if (static_cast<nn::Index>(count) != nn::numel(shape)) {
      throw FormatError("quantizer section: payload of " + std::to_string(count) + " values for a tensor of " +
                        std::to_string(nn::numel(shape)));
    }
    TensorF t(shape, in.get_array<float>(count));
    (bit == 1U ? q.v : q.u) = std::move(t);
  }
  try {
    q.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("quantizer section: ") + e.what());
  }
  return q;
}

}  // namespace

std::string encode_quantized(const QuantizedModel& qm) {
  qm.validate();
  io::ByteWriter out;
  nn::encode_model(qm.base, out);
  for (const auto& q : qm.weights) put_section(out, q);
  for (const auto& q : qm.activations) put_section(out, q);
  return out.take();
}

QuantizedModel decode_quantized(std::string_view bytes) {
  io::ByteReader in(bytes, "quantized model file");
  nn::Model base = nn::decode_model(in);
  QuantizedModel qm{std::move(base), {}, {}, {}};
  for (const auto& site : qm.base.weight_sites()) {
    qm.weights.push_back(get_section(in, qm.base.parameters()[site.parameter].value.shape()));
  }
  for (std::size_t i = 0; i < qm.base.activation_sites().size(); ++i) {
    qm.activations.push_back(get_section(in, {}));
  }
  if (!in.at_end()) {
    throw FormatError("quantized model file has trailing bytes");
  }
  return qm;
}

void save_quantized(const QuantizedModel& qm, const std::string& path) { io::write_file(path, encode_quantized(qm)); }

QuantizedModel load_quantized(const std::string& path) { return decode_quantized(io::read_file(path)); }

}  // namespace genq::quant
