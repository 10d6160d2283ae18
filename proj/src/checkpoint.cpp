#include "cnvs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cnvs {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    T value;
    take(&value, sizeof(T));
    return value;
  }
  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  std::vector<std::uint8_t> out{'P', 'M', 'C', 'K'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) {
      put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    }
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.data<T>();
      const auto* p = reinterpret_cast<const std::uint8_t*>(d.data());
      out.insert(out.end(), p, p + d.size_bytes());
    });
  }
  return out;
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.take(magic, 4);
  if (std::memcmp(magic, "PMCK", 4) != 0) {
    throw IoError("not a PMCK checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint32_t>(), '\0');
    r.take(name.data(), name.size());
    Shape shape(r.get<std::uint32_t>());
    for (auto& e : shape) {
      e = static_cast<std::int64_t>(r.get<std::uint64_t>());
    }
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) {
      throw IoError("unknown dtype tag " + std::to_string(tag) + " for tensor " + name);
    }
    Tensor t = Tensor::zeros(shape, static_cast<DType>(tag));
    dispatch(t.dtype(), [&]<class T>() {
      auto d = t.mutable_data<T>();
      r.take(d.data(), d.size_bytes());
    });
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) {
    throw IoError("trailing bytes after checkpoint payload");
  }
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed for " + path.string());
  }
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

NamedTensors load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace cnvs
