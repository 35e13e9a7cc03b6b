#include "key2mesh/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "key2mesh/error.hpp"

namespace k2m {
namespace {

static_assert(std::endian::native == std::endian::little,
              "payload encoding assumes a little-endian host");

template <typename T>
void append_raw(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

}  // namespace

void write_container(const std::filesystem::path& path, std::string_view magic, const Json& header,
                     std::span<const std::uint8_t> payload) {
  if (magic.size() != 4) throw Error(ErrorCode::Contract, "magic must be 4 bytes");
  const std::string text = header.dump();
  std::vector<std::uint8_t> bytes;
  bytes.reserve(8 + text.size() + payload.size());
  bytes.insert(bytes.end(), magic.begin(), magic.end());
  append_raw(bytes, static_cast<std::uint32_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw Error(ErrorCode::BadMagic,
                "'" + path.string() + "' does not start with " + std::string(magic));
  }
  if (bytes.size() < 8) throw Error(ErrorCode::Truncated, "missing header length");
  std::uint32_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(len)) {
    throw Error(ErrorCode::Truncated, "header extends past end of '" + path.string() + "'");
  }
  Container c;
  try {
    c.header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, "header of '" + path.string() + "': " + e.what());
  }
  c.payload.assign(bytes.begin() + 8 + len, bytes.end());
  return c;
}

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

DType dtype_from_name(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw Error(ErrorCode::Parse, "unknown dtype '" + name + "'");
}

void PayloadWriter::put_f32(std::span<const double> values) {
  for (double v : values) append_raw(bytes_, static_cast<float>(v));
}

void PayloadWriter::put_f64(std::span<const double> values) {
  for (double v : values) append_raw(bytes_, v);
}

void PayloadWriter::put_i32(std::span<const int> values) {
  for (int v : values) append_raw(bytes_, static_cast<std::int32_t>(v));
}

void PayloadReader::need(std::size_t n) const {
  if (pos_ + n > bytes_.size()) {
    throw Error(ErrorCode::Truncated, "payload needs " + std::to_string(pos_ + n) +
                                          " bytes, has " + std::to_string(bytes_.size()));
  }
}

void PayloadReader::seek(std::size_t offset) {
  if (offset > bytes_.size()) throw Error(ErrorCode::Truncated, "seek past payload end");
  pos_ = offset;
}

std::vector<double> PayloadReader::get_f32(std::size_t count) {
  need(count * 4);
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, bytes_.data() + pos_ + 4 * i, 4);
    out[i] = f;
  }
  pos_ += count * 4;
  return out;
}

std::vector<double> PayloadReader::get_f64(std::size_t count) {
  need(count * 8);
  std::vector<double> out(count);
  std::memcpy(out.data(), bytes_.data() + pos_, count * 8);
  pos_ += count * 8;
  return out;
}

std::vector<int> PayloadReader::get_i32(std::size_t count) {
  need(count * 4);
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::int32_t v;
    std::memcpy(&v, bytes_.data() + pos_ + 4 * i, 4);
    out[i] = v;
  }
  pos_ += count * 4;
  return out;
}

void TensorArchive::put(const std::string& name, Tensor t, DType dtype) {
  tensors_[name] = Entry{std::move(t), dtype};
}

const Tensor& TensorArchive::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Error(ErrorCode::Parse, "archive has no tensor '" + name + "'");
  return it->second.tensor;
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

void TensorArchive::save(const std::filesystem::path& path, std::string_view magic) const {
  Json header = meta_;
  Json index = Json::object();
  PayloadWriter w;
  for (const auto& [name, e] : tensors_) {
    index[name] = {{"dtype", dtype_name(e.dtype)}, {"shape", e.tensor.shape()}, {"offset", w.offset()}};
    if (e.dtype == DType::F32) {
      w.put_f32(e.tensor.span());
    } else {
      w.put_f64(e.tensor.span());
    }
  }
  header["tensors"] = std::move(index);
  write_container(path, magic, header, w.bytes());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path, std::string_view magic) {
  Container c = read_container(path, magic);
  TensorArchive a;
  PayloadReader r(c.payload);
  try {
    for (const auto& [name, desc] : c.header.at("tensors").items()) {
      const DType dtype = dtype_from_name(desc.at("dtype").get<std::string>());
      Shape shape = desc.at("shape").get<Shape>();
      r.seek(desc.at("offset").get<std::size_t>());
      const std::size_t n = shape_size(shape);
      std::vector<double> data = dtype == DType::F32 ? r.get_f32(n) : r.get_f64(n);
      a.tensors_[name] = Entry{Tensor(std::move(shape), std::move(data)), dtype};
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Parse, "tensor index of '" + path.string() + "': " + e.what());
  }
  c.header.erase("tensors");
  a.meta_ = std::move(c.header);
  return a;
}

}  // namespace k2m
