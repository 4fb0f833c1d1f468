// Copyright 2026 The lidar-ptq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lptq/error.hpp"
#include "lptq/nn/network.hpp"

// PTQF v1 layout, all integers and floats little-endian:
//
//   "PTQF" | version u16 | layer count u16 | input channels u16
//   per layer:
//     name length u16 | name bytes (UTF-8)
//     role u8 | activation u8 | precision u8 | flags u8
//     out_ch u32 | in_ch u32 | kH u32 | kW u32 | stride u16 | padding u16
//     weight f32[out*in*kH*kW] | bias f32[out]
//     [flags & 1] weight QuantParams: scale f64 | zero_point i32 | bits u8
//     [flags & 2] input QuantParams
//     [flags & 4] rounding offsets f32[out*in*kH*kW]
//   flags & 8 marks a layer exempt from quantization.

namespace lptq::nn {

inline constexpr char kPtqfMagic[4] = {'P', 'T', 'Q', 'F'};
inline constexpr std::uint16_t kPtqfVersion = 1;

namespace io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  std::uint8_t u8() { need(1); return buf_[pos_++]; }
  std::uint16_t u16() { return le<std::uint16_t>(); }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw FormatError("truncated file at byte " + std::to_string(pos_));
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

inline void write_params(ByteWriter& w, const QuantParams& p) {
  w.f64(p.scale);
  w.i32(p.zero_point);
  w.u8(static_cast<std::uint8_t>(p.bits));
}

inline QuantParams read_params(ByteReader& r) {
  QuantParams p;
  p.scale = r.f64();
  p.zero_point = r.i32();
  p.bits = r.u8();
  p.validate();
  return p;
}

}  // namespace io

/// Serialize to PTQF v1. Tensor data is stored as 32-bit floats regardless
/// of T.
template <typename T>
std::vector<std::uint8_t> encode_ptqf(const Network<T>& net) {
  net.validate();
  io::ByteWriter w;
  w.bytes(kPtqfMagic, 4);
  w.u16(kPtqfVersion);
  w.u16(static_cast<std::uint16_t>(net.layers.size()));
  w.u16(static_cast<std::uint16_t>(net.input_channels));
  for (const auto& l : net.layers) {
    w.u16(static_cast<std::uint16_t>(l.name.size()));
    w.bytes(l.name.data(), l.name.size());
    w.u8(static_cast<std::uint8_t>(l.role));
    w.u8(static_cast<std::uint8_t>(l.activation));
    w.u8(static_cast<std::uint8_t>(l.precision));
    const std::uint8_t flags = (l.w_quant ? 1 : 0) | (l.a_quant ? 2 : 0) | (l.theta ? 4 : 0) |
                               (l.fp_exempt ? 8 : 0);
    w.u8(flags);
    for (int d : l.weight.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.u16(static_cast<std::uint16_t>(l.stride));
    w.u16(static_cast<std::uint16_t>(l.padding));
    for (T v : l.weight.vec()) w.f32(static_cast<float>(v));
    for (T v : l.bias.vec()) w.f32(static_cast<float>(v));
    if (l.w_quant) io::write_params(w, *l.w_quant);
    if (l.a_quant) io::write_params(w, *l.a_quant);
    if (l.theta) {
      for (T v : l.theta->theta.vec()) w.f32(static_cast<float>(v));
    }
  }
  return w.buffer();
}

template <typename T>
Network<T> decode_ptqf(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kPtqfMagic, 4) != 0) throw FormatError("not a PTQF file (bad magic)");
  const auto version = r.u16();
  if (version != kPtqfVersion) {
    throw FormatError("unsupported PTQF version " + std::to_string(version));
  }
  Network<T> net;
  const auto count = r.u16();
  net.input_channels = r.u16();
  for (int i = 0; i < count; ++i) {
    LayerSpec<T> l;
    l.name.resize(r.u16());
    r.bytes(l.name.data(), l.name.size());
    const auto role = r.u8();
    const auto act = r.u8();
    const auto prec = r.u8();
    const auto flags = r.u8();
    if (role > 2 || act > 1 || prec > 1 || flags > 15) {
      throw FormatError("layer '" + l.name + "': invalid header byte");
    }
    l.role = static_cast<LayerRole>(role);
    l.activation = static_cast<Activation>(act);
    l.precision = static_cast<Precision>(prec);
    l.fp_exempt = (flags & 8) != 0;
    std::vector<int> shape(4);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    l.stride = r.u16();
    l.padding = r.u16();
    l.weight = Tensor<T>(shape);
    for (auto& v : l.weight.vec()) v = static_cast<T>(r.f32());
    l.bias = Tensor<T>({shape[0]});
    for (auto& v : l.bias.vec()) v = static_cast<T>(r.f32());
    if (flags & 1) l.w_quant = io::read_params(r);
    if (flags & 2) l.a_quant = io::read_params(r);
    if (flags & 4) {
      Tensor<T> th(shape);
      for (auto& v : th.vec()) v = static_cast<T>(r.f32());
      l.theta = RoundingOffsets<T>{std::move(th)};
    }
    net.layers.push_back(std::move(l));
  }
  if (!r.done()) throw FormatError("trailing bytes after last layer");
  net.validate();
  return net;
}

template <typename T>
void save_ptqf(const Network<T>& net, const std::string& path) {
  io::write_file(path, encode_ptqf(net));
}

template <typename T>
Network<T> load_ptqf(const std::string& path) {
  return decode_ptqf<T>(io::read_file(path));
}

}  // namespace lptq::nn
