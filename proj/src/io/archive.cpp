#include "tformer/archive.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace tformer {

std::string archive_error_name(ArchiveErrorCode code) {
  switch (code) {
    case ArchiveErrorCode::bad_magic: return "BadMagic";
    case ArchiveErrorCode::unsupported_version: return "UnsupportedVersion";
    case ArchiveErrorCode::checksum_mismatch: return "ChecksumMismatch";
    case ArchiveErrorCode::unknown_tensor: return "UnknownTensor";
    case ArchiveErrorCode::shape_mismatch: return "ShapeMismatch";
    case ArchiveErrorCode::missing_tensor: return "MissingTensor";
    case ArchiveErrorCode::dtype_mismatch: return "DTypeMismatch";
    case ArchiveErrorCode::truncated: return "Truncated";
    case ArchiveErrorCode::malformed: return "Malformed";
    case ArchiveErrorCode::io: return "IOError";
  }
  return "ArchiveError";
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(
        std::min<std::size_t>(bytes.size() - done, std::numeric_limits<uInt>::max()));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <Real T>
  void values(std::span<const T> data) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    buf_.reserve(buf_.size() + data.size() * sizeof(T));
    for (T v : data) {
      U bits;
      std::memcpy(&bits, &v, sizeof bits);
      le(bits, sizeof bits);
    }
  }

  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint64_t le(std::size_t n, const char* what) {
    need(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += n;
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n, const char* what) {
    need(n, what);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > remaining()) {
      throw ArchiveError(ArchiveErrorCode::truncated,
                         std::string("archive ends inside ") + what + " at byte " +
                             std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  DType dtype;
  Shape dims;
  std::size_t offset;  // first value byte
};

struct Parsed {
  ArchiveInfo info;
  std::vector<Record> records;
};

Parsed parse(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  Parsed p;
  const std::string magic = r.text(4, "magic");
  if (std::memcmp(magic.data(), kArchiveMagic, 4) != 0) {
    throw ArchiveError(ArchiveErrorCode::bad_magic, "not a TFWA archive");
  }
  p.info.version = static_cast<std::uint32_t>(r.le(4, "version"));
  if (p.info.version != kArchiveVersion) {
    throw ArchiveError(ArchiveErrorCode::unsupported_version,
                       "version " + std::to_string(p.info.version) + " (supported: 1)");
  }
  const std::size_t config_len = r.le(4, "config length");
  const std::string config_text = r.text(config_len, "config");
  p.info.tensor_count = r.le(4, "tensor count");

  for (std::size_t i = 0; i < p.info.tensor_count; ++i) {
    Record rec;
    rec.name = r.text(r.le(2, "name length"), "tensor name");
    const auto tag = r.le(1, "dtype");
    if (tag > 1) throw ArchiveError(ArchiveErrorCode::malformed, "dtype tag " + std::to_string(tag));
    rec.dtype = static_cast<DType>(tag);
    const auto rank = r.le(1, "rank");
    if (rank < 1 || rank > 4) {
      throw ArchiveError(ArchiveErrorCode::malformed, rec.name + ": rank " + std::to_string(rank));
    }
    std::size_t count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      rec.dims.push_back(r.le(4, "dims"));
      if (rec.dims.back() == 0 || count > std::numeric_limits<std::size_t>::max() / rec.dims.back()) {
        throw ArchiveError(ArchiveErrorCode::malformed, rec.name + ": bad dimension");
      }
      count *= rec.dims.back();
    }
    rec.offset = r.pos();
    if (count > r.remaining() / dtype_size(rec.dtype)) {
      throw ArchiveError(ArchiveErrorCode::truncated, "archive ends inside tensor " + rec.name);
    }
    r.skip(count * dtype_size(rec.dtype), "tensor values");
    if (!p.records.empty() && !(p.records.back().name < rec.name)) {
      throw ArchiveError(ArchiveErrorCode::malformed, "records not sorted by name at " + rec.name);
    }
    p.records.push_back(std::move(rec));
  }
  const std::size_t body = r.pos();
  const auto stored = static_cast<std::uint32_t>(r.le(4, "checksum"));
  if (r.remaining() != 0) {
    throw ArchiveError(ArchiveErrorCode::malformed,
                       std::to_string(r.remaining()) + " trailing bytes after checksum");
  }
  const std::uint32_t actual = crc32(bytes.first(body));
  if (stored != actual) {
    std::ostringstream os;
    os << std::hex << "stored CRC-32 0x" << stored << ", computed 0x" << actual;
    throw ArchiveError(ArchiveErrorCode::checksum_mismatch, os.str());
  }
  try {
    p.info.config = config_from_json(config_text);
  } catch (const ConfigError& e) {
    throw ArchiveError(ArchiveErrorCode::malformed, std::string("config: ") + e.what());
  }
  p.info.dtype = p.records.empty() ? DType::f32 : p.records.front().dtype;
  for (const auto& rec : p.records) {
    if (rec.dtype != p.info.dtype) {
      throw ArchiveError(ArchiveErrorCode::dtype_mismatch, rec.name + " has a different dtype");
    }
  }
  p.info.bytes = bytes.size();
  return p;
}

template <Real T>
T read_value(const std::uint8_t* src) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= U{src[i]} << (8 * i);
  T v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

template <Real T>
std::vector<std::uint8_t> export_archive(const TFormerModel<T>& model) {
  auto tensors = model.named_tensors();
  std::sort(tensors.begin(), tensors.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::string config = config_to_json(model.config());

  Writer w;
  w.bytes(std::string(kArchiveMagic, 4));
  w.u32(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.bytes(config);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ArchiveError(ArchiveErrorCode::malformed, "tensor name too long: " + name);
    }
    require_finite(*t, "export");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(dtype_of<T>()));
    w.u8(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->dims()) w.u32(static_cast<std::uint32_t>(d));
    w.values(t->data());
  }
  const std::uint32_t crc = crc32(w.buffer());
  w.u32(crc);
  return std::move(w.buffer());
}

template <Real T>
std::size_t export_archive(const TFormerModel<T>& model, std::ostream& sink) {
  const auto bytes = export_archive(model);
  sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  sink.flush();
  if (!sink) throw ArchiveError(ArchiveErrorCode::io, "write failed");
  return bytes.size();
}

template <Real T>
std::size_t export_archive(const TFormerModel<T>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArchiveError(ArchiveErrorCode::io, "cannot open " + path.string() + " for writing");
  return export_archive(model, out);
}

ArchiveInfo inspect_archive(std::span<const std::uint8_t> bytes) { return parse(bytes).info; }

template <Real T>
TFormerModel<T> import_archive(std::span<const std::uint8_t> bytes) {
  const Parsed p = parse(bytes);
  if (!p.records.empty() && p.info.dtype != dtype_of<T>()) {
    throw ArchiveError(ArchiveErrorCode::dtype_mismatch,
                       std::string("archive stores ") + (p.info.dtype == DType::f32 ? "f32" : "f64") +
                           " values");
  }
  auto model = TFormerModel<T>::build(p.info.config, nullptr);
  std::map<std::string, Tensor<T>*> slots;
  for (auto& [name, t] : model.named_tensors()) slots.emplace(name, t);

  for (const auto& rec : p.records) {
    auto it = slots.find(rec.name);
    if (it == slots.end()) throw ArchiveError(ArchiveErrorCode::unknown_tensor, rec.name);
    Tensor<T>& dst = *it->second;
    if (dst.dims() != rec.dims) {
      throw ArchiveError(ArchiveErrorCode::shape_mismatch,
                         rec.name + " is " + shape_str(rec.dims) + ", config expects " +
                             shape_str(dst.dims()));
    }
    const std::uint8_t* src = bytes.data() + rec.offset;
    for (auto& v : dst.data()) {
      v = read_value<T>(src);
      src += sizeof(T);
    }
    slots.erase(it);
  }
  if (!slots.empty()) {
    throw ArchiveError(ArchiveErrorCode::missing_tensor, slots.begin()->first);
  }
  return model;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveErrorCode::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw ArchiveError(ArchiveErrorCode::io, "read failed: " + path.string());
  return bytes;
}

std::size_t archive_size(const TFormerConfig& cfg, DType dtype) {
  std::size_t n = 4 + 4 + 4 + config_to_json(cfg).size() + 4;
  for (const auto& [name, dims] : weight_layout(cfg)) {
    n += 2 + name.size() + 1 + 1 + 4 * dims.size() + dtype_size(dtype) * shape_numel(dims);
  }
  return n + 4;
}

Savings savings_against(std::uint64_t model_params, const ReferenceModel& ref) {
  Savings s;
  s.reference = ref.name;
  s.reference_params = ref.params;
  if (model_params > 0) s.ratio = static_cast<double>(ref.params) / static_cast<double>(model_params);
  if (ref.params > 0) {
    s.fraction_saved = 1.0 - static_cast<double>(model_params) / static_cast<double>(ref.params);
  }
  return s;
}

template <Real T>
TransmissionReport payload_report(const TFormerModel<T>& model,
                                  std::span<const ReferenceModel> references) {
  TransmissionReport r;
  r.payload_bytes = export_archive(model).size();
  r.parameter_count = model.count_parameters().total;
  r.bytes_per_parameter = static_cast<double>(r.payload_bytes) / static_cast<double>(r.parameter_count);
  for (const auto& ref : references) r.savings.push_back(savings_against(r.parameter_count, ref));
  return r;
}

std::string format_table(const TransmissionReport& r) {
  std::ostringstream os;
  os << "payload_bytes        " << r.payload_bytes << '\n'
     << "parameter_count      " << r.parameter_count << '\n'
     << std::fixed << std::setprecision(4) << "bytes_per_parameter  " << r.bytes_per_parameter
     << '\n';
  for (const auto& s : r.savings) {
    os << std::setprecision(3) << "vs " << s.reference << " (" << s.reference_params
       << " params): " << s.ratio << "x fewer, " << 100.0 * s.fraction_saved << "% saved\n";
  }
  return os.str();
}

std::string to_json(const TransmissionReport& r, int indent) {
  nlohmann::json savings = nlohmann::json::array();
  for (const auto& s : r.savings) {
    savings.push_back({{"reference", s.reference},
                       {"reference_params", s.reference_params},
                       {"ratio", s.ratio},
                       {"fraction_saved", s.fraction_saved}});
  }
  const nlohmann::json j{{"payload_bytes", r.payload_bytes},
                         {"parameter_count", r.parameter_count},
                         {"bytes_per_parameter", r.bytes_per_parameter},
                         {"savings", savings}};
  return j.dump(indent);
}

#define TFORMER_ARCHIVE(T)                                                                  \
  template std::vector<std::uint8_t> export_archive(const TFormerModel<T>&);                \
  template std::size_t export_archive(const TFormerModel<T>&, std::ostream&);               \
  template std::size_t export_archive(const TFormerModel<T>&, const std::filesystem::path&); \
  template TFormerModel<T> import_archive<T>(std::span<const std::uint8_t>);                \
  template TransmissionReport payload_report(const TFormerModel<T>&, std::span<const ReferenceModel>);

TFORMER_ARCHIVE(float)
TFORMER_ARCHIVE(double)
#undef TFORMER_ARCHIVE

}  // namespace tformer
