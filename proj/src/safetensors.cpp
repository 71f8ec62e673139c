#include "hallucheck/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "hallucheck/error.hpp"

namespace hallucheck {

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1f;
  std::uint32_t mant = h & 0x3ff;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) bits = sign;
    else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400) == 0) {
        mant <<= 1;
        --exp;
      }
      bits = sign | (exp << 23) | ((mant & 0x3ff) << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

SafeTensors SafeTensors::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot read " + path.string());
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

SafeTensors SafeTensors::parse(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw ParseError("safetensors: truncated header");
  std::uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | bytes[i];
  if (8 + hlen > bytes.size()) throw ParseError("safetensors: header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("safetensors: bad header: ") + e.what());
  }
  const unsigned char* base = bytes.data() + 8 + hlen;
  const std::size_t data_len = bytes.size() - 8 - hlen;

  SafeTensors st;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : info.items())
        st.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    const auto dtype = info.at("dtype").get<std::string>();
    const auto offs = info.at("data_offsets").get<std::vector<std::size_t>>();
    if (offs.size() != 2 || offs[1] < offs[0] || offs[1] > data_len)
      throw ParseError("safetensors: bad offsets for " + name);
    Tensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    const auto n = static_cast<std::size_t>(t.numel());
    const unsigned char* p = base + offs[0];
    const std::size_t nbytes = offs[1] - offs[0];
    t.data.resize(n);
    if (dtype == "F32") {
      if (nbytes != n * 4) throw ParseError("safetensors: size mismatch for " + name);
      std::memcpy(t.data.data(), p, nbytes);
    } else if (dtype == "F64") {
      if (nbytes != n * 8) throw ParseError("safetensors: size mismatch for " + name);
      for (std::size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, p + 8 * i, 8);
        t.data[i] = static_cast<float>(d);
      }
    } else if (dtype == "F16" || dtype == "BF16") {
      if (nbytes != n * 2) throw ParseError("safetensors: size mismatch for " + name);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint16_t h = static_cast<std::uint16_t>(p[2 * i] | (p[2 * i + 1] << 8));
        t.data[i] = dtype == "F16" ? half_to_float(h) : std::bit_cast<float>(std::uint32_t(h) << 16);
      }
    } else {
      throw ParseError("safetensors: unsupported dtype " + dtype + " for " + name);
    }
    st.tensors_.emplace(name, std::move(t));
  }
  return st;
}

const Tensor& SafeTensors::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw Unavailable("weight tensor '" + name + "' missing");
  return it->second;
}

void SafeTensors::strip_prefix(const std::string& prefix) {
  std::map<std::string, Tensor> out;
  for (auto& [k, v] : tensors_)
    out.emplace(k.starts_with(prefix) ? k.substr(prefix.size()) : k, std::move(v));
  tensors_ = std::move(out);
}

void save_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (static_cast<std::size_t>(t.numel()) != t.data.size())
      throw ValidationError("safetensors: shape of '" + name + "' does not match its data");
    const std::size_t n = t.data.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + n}}};
    offset += n;
  }
  std::string h = header.dump();
  h.append((8 - h.size() % 8) % 8, ' ');  // keep the data section aligned
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  unsigned char len[8];
  for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((h.size() >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(len), 8);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 4));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace hallucheck
