#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hallucheck {

/// A tensor from a .safetensors archive, widened to float.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const;
};

/// Minimal reader for the safetensors container (F32, F16, BF16, F64).
class SafeTensors {
 public:
  static SafeTensors load(const std::filesystem::path& path);
  static SafeTensors parse(const std::vector<unsigned char>& bytes);

  bool contains(const std::string& name) const { return tensors_.contains(name); }
  const Tensor& get(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  /// Removes `prefix` from every tensor name that carries it.
  void strip_prefix(const std::string& prefix);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> metadata_;
};

/// Writes F32 tensors (names sorted) with string metadata.
void save_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata = {});

}  // namespace hallucheck
