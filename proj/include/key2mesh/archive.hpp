#pragma once
// Binary container shared by every on-disk format:
//   4-byte magic | u32 LE header length | UTF-8 JSON header | raw LE payload

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "key2mesh/tensor.hpp"

namespace k2m {

using Json = nlohmann::json;

struct Container {
  Json header;
  std::vector<std::uint8_t> payload;
};

void write_container(const std::filesystem::path& path, std::string_view magic, const Json& header,
                     std::span<const std::uint8_t> payload);
/// Throws Io, BadMagic, Truncated or Parse.
Container read_container(const std::filesystem::path& path, std::string_view magic);

enum class DType { F32, F64 };

const char* dtype_name(DType d);
DType dtype_from_name(const std::string& name);

/// Little-endian payload writer.
class PayloadWriter {
 public:
  std::size_t offset() const { return bytes_.size(); }
  void put_f32(std::span<const double> values);
  void put_f64(std::span<const double> values);
  void put_i32(std::span<const int> values);
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Little-endian payload reader with bounds checks (Truncated on overrun).
class PayloadReader {
 public:
  explicit PayloadReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  void seek(std::size_t offset);
  std::vector<double> get_f32(std::size_t count);
  std::vector<double> get_f64(std::size_t count);
  std::vector<int> get_i32(std::size_t count);
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Named tensors with per-tensor dtype, serialised as
/// {"tensors": {name: {"dtype", "shape", "offset"}}, ...extra header fields}.
class TensorArchive {
 public:
  void put(const std::string& name, Tensor t, DType dtype = DType::F64);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  std::vector<std::string> names() const;

  Json& meta() { return meta_; }
  const Json& meta() const { return meta_; }

  void save(const std::filesystem::path& path, std::string_view magic) const;
  static TensorArchive load(const std::filesystem::path& path, std::string_view magic);

 private:
  struct Entry {
    Tensor tensor;
    DType dtype;
  };
  std::map<std::string, Entry> tensors_;
  Json meta_ = Json::object();
};

}  // namespace k2m
