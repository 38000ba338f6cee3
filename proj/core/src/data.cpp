#include "collab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "collab/rng.hpp"
#include "json.hpp"

namespace collab {

namespace {

using json = nlohmann::json;

constexpr char kDatasetMagic[4] = {'C', 'L', 'D', 'S'};
constexpr char kTensorMagic[4] = {'C', 'L', 'T', 'S'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Bounds-checked little-endian reader that reports byte offsets.
class Reader {
 public:
  Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  void magic(const char (&expected)[4]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data(), expected, 4) != 0) {
      fail(ErrorKind::format, source_ + ": bad magic at byte 0, expected \"" +
                                  std::string(expected, 4) + "\"");
    }
    pos_ = 4;
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<unsigned char>(bytes_[pos_]) |
                      static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::size_t pos() const { return pos_; }

  void finish() const {
    if (pos_ != bytes_.size()) {
      fail(ErrorKind::format, source_ + ": " + std::to_string(bytes_.size() - pos_) +
                                  " trailing bytes at offset " + std::to_string(pos_));
    }
  }

  [[noreturn]] void error_at(std::size_t offset, const std::string& what) const {
    fail(ErrorKind::format, source_ + ": " + what + " at byte " + std::to_string(offset));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::format, source_ + ": truncated reading " + what + " at byte " +
                                  std::to_string(pos_) + " (file has " +
                                  std::to_string(bytes_.size()) + " bytes)");
    }
  }

  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) fail(ErrorKind::format, std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

template <typename T>
Tensor<T> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t sz = image_size();
  std::vector<T> v(indices.size() * sz);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const float* src = images.data() + indices[b] * sz;
    std::transform(src, src + sz, v.begin() + static_cast<std::ptrdiff_t>(b * sz),
                   [](float p) { return static_cast<T>(p); });
  }
  return Tensor<T>::constant({indices.size(), channels, height, width}, std::move(v));
}

std::vector<int> Dataset::batch_labels(const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

template Tensor<float> Dataset::batch<float>(const std::vector<std::size_t>&) const;
template Tensor<double> Dataset::batch<double>(const std::vector<std::size_t>&) const;

SplitDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) fail(ErrorKind::config, "synthetic data needs at least 2 classes");
  if (!std::isfinite(spec.signal) || !std::isfinite(spec.noise_sigma) || spec.noise_sigma < 0.0) {
    fail(ErrorKind::config, "synthetic signal and noise_sigma must be finite (sigma >= 0)");
  }
  if (spec.channels < 1 || spec.height < 1 || spec.width < 1) {
    fail(ErrorKind::config, "synthetic extents must be positive");
  }
  const Rng root(spec.seed);
  const std::size_t sz = spec.channels * spec.height * spec.width;
  std::vector<std::vector<double>> templates(spec.classes, std::vector<double>(sz));
  for (std::size_t k = 0; k < spec.classes; ++k) {
    Rng r = root.derive("template", k);
    for (double& v : templates[k]) v = r.uniform();
  }
  auto make = [&](std::size_t per_class, const char* stream) {
    Dataset ds;
    ds.classes = spec.classes;
    ds.channels = spec.channels;
    ds.height = spec.height;
    ds.width = spec.width;
    const std::size_t n = per_class * spec.classes;
    ds.images.resize(n * sz);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = i % spec.classes;
      ds.labels[i] = static_cast<int>(k);
      Rng r = root.derive(stream, i);
      for (std::size_t p = 0; p < sz; ++p) {
        const double v = templates[k][p] * spec.signal + spec.noise_sigma * r.normal();
        ds.images[i * sz + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    return ds;
  };
  return {make(spec.train_per_class, "train"), make(spec.test_per_class, "test")};
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  if (ds.images.size() != ds.size() * ds.image_size()) {
    fail(ErrorKind::format, "dataset image buffer does not match its extents");
  }
  std::string out(kDatasetMagic, 4);
  put_u16(out, kVersion);
  put_u32(out, checked_u32(ds.classes, "classes"));
  put_u32(out, checked_u32(ds.size(), "n"));
  put_u32(out, checked_u32(ds.channels, "C"));
  put_u32(out, checked_u32(ds.height, "H"));
  put_u32(out, checked_u32(ds.width, "W"));
  for (int label : ds.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= ds.classes || label > 0xffff) {
      fail(ErrorKind::format, "label " + std::to_string(label) + " out of range");
    }
    put_u16(out, static_cast<std::uint16_t>(label));
  }
  for (float p : ds.images) {
    std::uint32_t bits;
    std::memcpy(&bits, &p, 4);
    put_u32(out, bits);
  }
  write_file(path, out);
}

Dataset load_dataset(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  r.magic(kDatasetMagic);
  const std::size_t version_at = r.pos();
  const std::uint16_t version = r.u16("version");
  if (version != kVersion) r.error_at(version_at, "unsupported version " + std::to_string(version));
  Dataset ds;
  ds.classes = r.u32("classes");
  const std::size_t n = r.u32("n");
  ds.channels = r.u32("C");
  ds.height = r.u32("H");
  ds.width = r.u32("W");
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.pos();
    const std::uint16_t label = r.u16("label");
    if (label >= ds.classes) {
      r.error_at(at, "label " + std::to_string(label) + " out of range for " +
                         std::to_string(ds.classes) + " classes");
    }
    ds.labels[i] = label;
  }
  ds.images.resize(n * ds.image_size());
  for (float& p : ds.images) {
    const std::uint32_t bits = r.u32("pixel");
    std::memcpy(&p, &bits, 4);
  }
  r.finish();
  return ds;
}

void save_tensor(const std::filesystem::path& path, const Shape& shape,
                 const std::vector<double>& values) {
  if (shape_numel(shape) != values.size()) {
    fail(ErrorKind::format, "tensor values do not match shape " + shape_str(shape));
  }
  std::string out(kTensorMagic, 4);
  put_u16(out, kVersion);
  put_u32(out, checked_u32(shape.size(), "rank"));
  for (std::size_t e : shape) put_u32(out, checked_u32(e, "extent"));
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  }
  write_file(path, out);
}

TensorFile load_tensor(const std::filesystem::path& path) {
  Reader r(read_file(path), path.string());
  r.magic(kTensorMagic);
  const std::size_t version_at = r.pos();
  const std::uint16_t version = r.u16("version");
  if (version != kVersion) r.error_at(version_at, "unsupported version " + std::to_string(version));
  TensorFile t;
  const std::uint32_t rank = r.u32("rank");
  if (rank > 8) r.error_at(r.pos() - 4, "rank " + std::to_string(rank) + " too large");
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.u32("extent"));
  t.values.resize(shape_numel(t.shape));
  for (double& v : t.values) {
    const std::uint64_t bits = r.u64("value");
    std::memcpy(&v, &bits, 8);
  }
  r.finish();
  return t;
}

std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string metrics_csv(const RunMetrics& metrics) {
  std::string out =
      "epoch,lr,train_loss_total,baseline,out,mid,pull_push,kernel,train_err,test_err,noisy_labels\n";
  for (const auto& e : metrics.epochs) {
    out += std::to_string(e.epoch);
    for (double v : {e.lr, e.train_loss_total, e.terms.baseline, e.terms.out, e.terms.mid,
                     e.terms.pull_push, e.terms.kernel, e.train_error, e.test_error}) {
      out += ',';
      out += format_g6(v);
    }
    out += ',';
    out += std::to_string(e.noisy_labels);
    out += '\n';
  }
  return out;
}

RunSummary make_summary(const RunMetrics& metrics, const std::string& config_json) {
  RunSummary s;
  s.config_json = config_json;
  s.initial_test_error = metrics.initial_test_error;
  s.best_test_error = metrics.best_test_error;
  s.best_epoch = metrics.best_epoch;
  s.epochs = metrics.epochs.size();
  return s;
}

std::string summary_json(const RunSummary& summary) {
  json j;
  j["config"] = summary.config_json.empty() ? json::object() : json::parse(summary.config_json);
  j["initial_test_error"] = summary.initial_test_error;
  j["best_test_error"] = summary.best_test_error;
  j["best_epoch"] = summary.best_epoch;
  j["epochs"] = summary.epochs;
  return j.dump(2) + "\n";
}

RunSummary read_summary(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
    RunSummary s;
    s.config_json = j.at("config").dump();
    s.initial_test_error = j.at("initial_test_error").get<double>();
    s.best_test_error = j.at("best_test_error").get<double>();
    s.best_epoch = j.at("best_epoch").get<std::size_t>();
    s.epochs = j.at("epochs").get<std::size_t>();
    return s;
  } catch (const json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void write_metrics(const std::filesystem::path& dir, const RunMetrics& metrics,
                   const std::string& config_json) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "metrics.csv", metrics_csv(metrics));
  write_file(dir / "summary.json", summary_json(make_summary(metrics, config_json)));
  json t;
  t["wall_time_s"] = metrics.wall_time_s;
  write_file(dir / "timing.json", t.dump(2) + "\n");
}

}  // namespace collab
