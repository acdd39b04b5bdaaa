#include "moco/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "moco/error.hpp"

namespace moco {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are raw little-endian");

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', '1'};

template <typename U>
void append(std::vector<unsigned char>& out, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename U>
  U read(const char* what) {
    U v;
    take(&v, sizeof(U), what);
    return v;
  }

  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointErrorCode::kTruncated,
                            std::string("checkpoint truncated while reading ") + what +
                                " at byte " + std::to_string(pos_));
    }
    if (n) std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const char* to_string(Dtype d) {
  switch (d) {
    case Dtype::kF32: return "f32";
    case Dtype::kF64: return "f64";
    case Dtype::kU64: return "u64";
  }
  return "?";
}

std::size_t dtype_size(Dtype d) { return d == Dtype::kF32 ? 4 : 8; }

template <typename T>
void Checkpoint::put(const std::string& name, const Grid<T>& grid) {
  CheckpointArray a;
  a.dtype = dtype_of<T>();
  a.shape = grid.shape();
  a.bytes.resize(grid.size() * sizeof(T));
  if (grid.size()) std::memcpy(a.bytes.data(), grid.data(), a.bytes.size());
  arrays_[name] = std::move(a);
}

void Checkpoint::put_u64(const std::string& name, const std::vector<std::uint64_t>& values) {
  CheckpointArray a;
  a.dtype = Dtype::kU64;
  a.shape = {values.size()};
  a.bytes.resize(values.size() * 8);
  if (!values.empty()) std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  arrays_[name] = std::move(a);
}

const CheckpointArray& Checkpoint::at(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) {
    throw CheckpointError(CheckpointErrorCode::kMissingArray,
                          "checkpoint has no array '" + name + "'");
  }
  return it->second;
}

template <typename T>
Grid<T> Checkpoint::grid(const std::string& name) const {
  const CheckpointArray& a = at(name);
  if (a.dtype != dtype_of<T>()) {
    throw CheckpointError(CheckpointErrorCode::kBadDtype,
                          "array '" + name + "' is " + to_string(a.dtype) + ", expected " +
                              to_string(dtype_of<T>()));
  }
  std::vector<T> v(a.bytes.size() / sizeof(T));
  if (!v.empty()) std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return Grid<T>(a.shape, std::move(v));
}

std::vector<std::uint64_t> Checkpoint::u64(const std::string& name) const {
  const CheckpointArray& a = at(name);
  if (a.dtype != Dtype::kU64) {
    throw CheckpointError(CheckpointErrorCode::kBadDtype,
                          "array '" + name + "' is " + to_string(a.dtype) + ", expected u64");
  }
  std::vector<std::uint64_t> v(a.bytes.size() / 8);
  if (!v.empty()) std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

std::vector<unsigned char> Checkpoint::serialize() const {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  append<std::uint32_t>(out, kVersion);
  append<std::uint32_t>(out, static_cast<std::uint32_t>(arrays_.size()));
  for (const auto& [name, a] : arrays_) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw CheckpointError(CheckpointErrorCode::kIo, "array name too long: " + name);
    }
    if (a.shape.size() > 255) {
      throw CheckpointError(CheckpointErrorCode::kIo, "array rank too large: " + name);
    }
    append<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append<std::uint8_t>(out, static_cast<std::uint8_t>(a.dtype));
    append<std::uint8_t>(out, static_cast<std::uint8_t>(a.shape.size()));
    for (std::size_t d : a.shape) append<std::uint64_t>(out, d);
    out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<unsigned char>& bytes) {
  Reader r(bytes);
  char magic[4];
  if (bytes.size() < 4) {
    throw CheckpointError(CheckpointErrorCode::kTruncated, "checkpoint shorter than its magic");
  }
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorCode::kBadMagic, "not an MMC1 checkpoint (bad magic)");
  }
  const auto version = r.read<std::uint32_t>("version");
  if (version != kVersion) {
    throw CheckpointError(CheckpointErrorCode::kBadVersion,
                          "unsupported checkpoint version " + std::to_string(version) +
                              " (expected " + std::to_string(kVersion) + ")");
  }
  const auto count = r.read<std::uint32_t>("array count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.read<std::uint16_t>("name length");
    std::string name(len, '\0');
    r.take(name.data(), len, "name");
    const auto dt = r.read<std::uint8_t>("dtype");
    if (dt > 2) {
      throw CheckpointError(CheckpointErrorCode::kBadDtype,
                            "array '" + name + "' has unknown dtype code " + std::to_string(dt));
    }
    CheckpointArray a;
    a.dtype = static_cast<Dtype>(dt);
    const auto rank = r.read<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.read<std::uint64_t>("dims");
      if (d == 0 || n > std::numeric_limits<std::size_t>::max() / d) {
        throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                              "array '" + name + "' has an invalid dimension");
      }
      a.shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
    }
    const std::size_t nbytes = n * dtype_size(a.dtype);
    if (nbytes / dtype_size(a.dtype) != n) {
      throw CheckpointError(CheckpointErrorCode::kShapeMismatch,
                            "array '" + name + "' is too large");
    }
    if (nbytes > bytes.size()) {
      throw CheckpointError(CheckpointErrorCode::kTruncated,
                            "checkpoint truncated in payload of '" + name + "'");
    }
    a.bytes.resize(nbytes);
    r.take(a.bytes.data(), nbytes, "payload");
    ck.arrays_[name] = std::move(a);
  }
  if (!r.done()) {
    throw CheckpointError(CheckpointErrorCode::kTruncated,
                          "checkpoint has trailing bytes after the last array");
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const std::vector<unsigned char> bytes = serialize();
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw CheckpointError(CheckpointErrorCode::kIo, "cannot write " + tmp.string());
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(CheckpointErrorCode::kIo, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError(CheckpointErrorCode::kIo,
                          "cannot move " + tmp.string() + " to " + path.string() + ": " +
                              ec.message());
  }
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw CheckpointError(CheckpointErrorCode::kIo, "not a regular file: " + path.string());
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrorCode::kIo, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.code(), path.string() + ": " + e.what());
  }
}

template void Checkpoint::put(const std::string&, const Grid<float>&);
template void Checkpoint::put(const std::string&, const Grid<double>&);
template Grid<float> Checkpoint::grid(const std::string&) const;
template Grid<double> Checkpoint::grid(const std::string&) const;

}  // namespace moco
