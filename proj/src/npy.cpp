// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/npy.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <regex>
#include <sstream>

namespace mcbm::npy {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr size_t kMagicLen = 6;
constexpr size_t kPreludeLen = kMagicLen + 2 + 2;  // magic, version, header length
constexpr size_t kAlign = 64;

const char* descr_of(Dtype d) { return d == Dtype::kFloat32 ? "<f4" : "<i8"; }
size_t item_size(Dtype d) { return d == Dtype::kFloat32 ? 4 : 8; }

std::string header_text(Dtype dtype, const std::vector<int64_t>& shape) {
  std::ostringstream dict;
  dict << "{'descr': '" << descr_of(dtype) << "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) {
    dict << shape[i];
    if (shape.size() == 1 || i + 1 < shape.size()) dict << ',';
    if (i + 1 < shape.size()) dict << ' ';
  }
  dict << "), }";
  std::string h = dict.str();
  // Pad with spaces so the data section starts on an aligned boundary, ending in '\n'.
  const size_t total = kPreludeLen + h.size() + 1;
  const size_t padded = (total + kAlign - 1) / kAlign * kAlign;
  h.append(padded - total, ' ');
  h.push_back('\n');
  return h;
}

template <typename T>
std::string encode_impl(Dtype dtype, const BasicTensor<T>& t) {
  const std::string header = header_text(dtype, t.shape());
  if (header.size() > 0xFFFF) throw FormatError("npy header too long for version 1.0");
  std::string out;
  out.reserve(kPreludeLen + header.size() + t.data().size_bytes());
  out.append(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  const auto len = static_cast<uint16_t>(header.size());
  out.push_back(static_cast<char>(len & 0xFF));
  out.push_back(static_cast<char>(len >> 8));
  out += header;
  out.append(reinterpret_cast<const char*>(t.data().data()), t.data().size_bytes());
  return out;
}

Header parse_header(const std::string& bytes, const std::string& origin, size_t& data_offset) {
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError(origin + ": " + why);
  };
  if (bytes.size() < kPreludeLen || bytes.compare(0, kMagicLen, kMagic, kMagicLen) != 0) {
    throw fail("missing NPY magic string");
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  const auto minor = static_cast<unsigned char>(bytes[7]);
  if (major != 1 || minor != 0) {
    throw fail("unsupported NPY version " + std::to_string(major) + "." + std::to_string(minor) +
               " (only 1.0)");
  }
  const size_t hlen = static_cast<unsigned char>(bytes[8]) |
                      (static_cast<size_t>(static_cast<unsigned char>(bytes[9])) << 8);
  if (bytes.size() < kPreludeLen + hlen) throw fail("truncated header");
  const std::string dict = bytes.substr(kPreludeLen, hlen);
  data_offset = kPreludeLen + hlen;

  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;
  Header h;
  if (!std::regex_search(dict, m, descr_re)) throw fail("header has no 'descr'");
  if (m[1] == "<f4") {
    h.dtype = Dtype::kFloat32;
  } else if (m[1] == "<i8") {
    h.dtype = Dtype::kInt64;
  } else {
    throw fail("unsupported dtype '" + m[1].str() + "' (only '<f4' and '<i8')");
  }
  if (!std::regex_search(dict, m, order_re)) throw fail("header has no 'fortran_order'");
  if (m[1] == "True") throw fail("fortran-order arrays are not supported");
  if (!std::regex_search(dict, m, shape_re)) throw fail("header has no 'shape'");
  std::stringstream dims(m[1].str());
  std::string tok;
  while (std::getline(dims, tok, ',')) {
    const auto first = tok.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    try {
      h.shape.push_back(std::stoll(tok.substr(first)));
    } catch (const std::exception&) {
      throw fail("malformed shape entry '" + tok + "'");
    }
  }
  if (h.shape.empty()) throw fail("0-d arrays are not supported");
  for (int64_t d : h.shape) {
    if (d <= 0) throw fail("zero or negative extent in shape " + shape_string(h.shape));
  }
  return h;
}

template <typename T>
BasicTensor<T> decode_impl(Dtype want, const std::string& bytes, const std::string& origin) {
  size_t offset = 0;
  const Header h = parse_header(bytes, origin, offset);
  if (h.dtype != want) {
    throw FormatError(origin + ": expected dtype " + descr_of(want) + ", found " +
                      descr_of(h.dtype));
  }
  int64_t count = 1;
  for (int64_t d : h.shape) count *= d;
  const size_t nbytes = static_cast<size_t>(count) * item_size(h.dtype);
  if (bytes.size() != offset + nbytes) {
    throw FormatError(origin + ": data section holds " + std::to_string(bytes.size() - offset) +
                      " bytes, shape " + shape_string(h.shape) + " needs " +
                      std::to_string(nbytes));
  }
  std::vector<T> data(static_cast<size_t>(count));
  std::memcpy(data.data(), bytes.data() + offset, nbytes);
  return BasicTensor<T>(h.shape, std::move(data));
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

}  // namespace

Header read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string prelude(kPreludeLen, '\0');
  in.read(prelude.data(), static_cast<std::streamsize>(kPreludeLen));
  if (in.gcount() != static_cast<std::streamsize>(kPreludeLen)) {
    throw FormatError(path.string() + ": file too short for an NPY header");
  }
  const size_t hlen = static_cast<unsigned char>(prelude[8]) |
                      (static_cast<size_t>(static_cast<unsigned char>(prelude[9])) << 8);
  std::string rest(hlen, '\0');
  in.read(rest.data(), static_cast<std::streamsize>(hlen));
  size_t offset = 0;
  Header h = parse_header(prelude + rest, path.string(), offset);
  h.data_offset = offset;
  return h;
}

std::string encode(const Tensor& t) { return encode_impl(Dtype::kFloat32, t); }
std::string encode(const LabelTensor& t) { return encode_impl(Dtype::kInt64, t); }

Tensor decode_tensor(const std::string& bytes, const std::string& origin) {
  return decode_impl<float>(Dtype::kFloat32, bytes, origin);
}

LabelTensor decode_labels(const std::string& bytes, const std::string& origin) {
  return decode_impl<int64_t>(Dtype::kInt64, bytes, origin);
}

Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(slurp(path), path.string());
}

LabelTensor read_labels(const std::filesystem::path& path) {
  return decode_labels(slurp(path), path.string());
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { dump(path, encode(t)); }
void write_tensor(const std::filesystem::path& path, const LabelTensor& t) {
  dump(path, encode(t));
}

}  // namespace mcbm::npy
