#include "mvt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mvt/errors.hpp"

namespace mvt {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'C', 'K'};
constexpr uint16_t kVersion = 1;

template <typename T>
void put_le(std::vector<char>& out, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::span<const char> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string get_string(size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void need(size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw IoError(origin_ + ": truncated checkpoint at byte offset " + std::to_string(pos_));
    }
  }

  size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  std::span<const char> bytes_;
  std::string origin_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_checkpoint(const std::vector<NamedArray>& arrays) {
  std::vector<char> out(kMagic, kMagic + 4);
  put_le<uint16_t>(out, kVersion);
  put_le<uint32_t>(out, static_cast<uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    if (a.name.size() > 0xFFFF) throw ValidationError("checkpoint: name too long: " + a.name.substr(0, 32));
    if (a.shape.size() > 0xFF) throw ValidationError("checkpoint: rank too large for " + a.name);
    if (static_cast<size_t>(shape_numel(a.shape)) != a.data.size()) {
      throw ValidationError("checkpoint: shape/data mismatch for " + a.name);
    }
    put_le<uint16_t>(out, static_cast<uint16_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    put_le<uint8_t>(out, static_cast<uint8_t>(a.shape.size()));
    for (auto d : a.shape) put_le<uint32_t>(out, static_cast<uint32_t>(d));
    for (float v : a.data) put_le<uint32_t>(out, std::bit_cast<uint32_t>(v));
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(std::span<const char> bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (r.get_string(4) != std::string(kMagic, 4)) throw IoError(origin + ": bad checkpoint magic at byte offset 0");
  const auto version = r.get<uint16_t>();
  if (version != kVersion) {
    throw IoError(origin + ": unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = r.get<uint32_t>();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    const auto name_len = r.get<uint16_t>();
    a.name = r.get_string(name_len);
    const auto rank = r.get<uint8_t>();
    for (uint8_t k = 0; k < rank; ++k) a.shape.push_back(r.get<uint32_t>());
    const auto n = static_cast<size_t>(shape_numel(a.shape));
    r.need(n * 4);
    a.data.resize(n);
    for (size_t k = 0; k < n; ++k) a.data[k] = std::bit_cast<float>(r.get<uint32_t>());
    arrays.push_back(std::move(a));
  }
  if (!r.done()) throw IoError(origin + ": trailing bytes at byte offset " + std::to_string(r.pos()));
  return arrays;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  const auto bytes = encode_checkpoint(arrays);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

std::vector<NamedArray> snapshot(std::span<const Parameter> params, const std::string& prefix) {
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    NamedArray a{prefix + p.name, p.tensor.shape(), {}};
    a.data.assign(p.tensor.data().begin(), p.tensor.data().end());
    out.push_back(std::move(a));
  }
  return out;
}

void restore(std::span<Parameter> params, const std::vector<NamedArray>& arrays, const std::string& prefix) {
  for (auto& p : params) {
    const std::string key = prefix + p.name;
    const NamedArray* found = nullptr;
    for (const auto& a : arrays) {
      if (a.name == key) {
        found = &a;
        break;
      }
    }
    if (!found) throw IoError("checkpoint is missing parameter '" + key + "'");
    if (found->shape != p.tensor.shape()) {
      throw IoError("checkpoint shape mismatch for '" + key + "': " + shape_str(found->shape) + " vs " +
                    shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.data();
    for (size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<Real>(found->data[k]);
  }
}

std::vector<NamedArray> snapshot_optimizer(std::span<const Parameter> params, const OptimState& state) {
  std::vector<NamedArray> out;
  out.push_back({"optim.step", {}, {static_cast<float>(state.step)}});
  if (state.first_moment.size() != params.size()) return out;
  for (size_t i = 0; i < params.size(); ++i) {
    out.push_back({"optim.m." + params[i].name, params[i].tensor.shape(),
                   std::vector<float>(state.first_moment[i].begin(), state.first_moment[i].end())});
    out.push_back({"optim.v." + params[i].name, params[i].tensor.shape(),
                   std::vector<float>(state.second_moment[i].begin(), state.second_moment[i].end())});
  }
  return out;
}

void restore_optimizer(std::span<const Parameter> params, const std::vector<NamedArray>& arrays, OptimState& state) {
  auto find = [&](const std::string& name) -> const NamedArray* {
    for (const auto& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  };
  const NamedArray* step = find("optim.step");
  if (!step || step->data.size() != 1) throw IoError("checkpoint has no optimizer state");
  state.step = static_cast<int64_t>(step->data[0]);
  state.first_moment.clear();
  state.second_moment.clear();
  if (state.step == 0) return;
  for (const auto& p : params) {
    const NamedArray* m = find("optim.m." + p.name);
    const NamedArray* v = find("optim.v." + p.name);
    if (!m || !v || m->shape != p.tensor.shape() || v->shape != p.tensor.shape()) {
      throw IoError("checkpoint optimizer state missing or mismatched for '" + p.name + "'");
    }
    state.first_moment.emplace_back(m->data.begin(), m->data.end());
    state.second_moment.emplace_back(v->data.begin(), v->data.end());
  }
}

}  // namespace mvt
